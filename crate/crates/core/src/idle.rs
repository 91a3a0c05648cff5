//! Counter of outstanding work items with an awaitable "drained" condition.

use std::sync::Arc;

use tokio::sync::watch;

#[derive(Debug, Clone)]
pub struct InFlight(Arc<watch::Sender<usize>>);

impl Default for InFlight {
    fn default() -> Self {
        InFlight(Arc::new(watch::channel(0).0))
    }
}

impl InFlight {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin(&self) {
        self.0.send_modify(|c| *c += 1);
    }

    pub fn end(&self) {
        self.0.send_modify(|c| *c = c.saturating_sub(1));
    }

    pub fn count(&self) -> usize {
        *self.0.borrow()
    }

    pub async fn wait_idle(&self) {
        let mut rx = self.0.subscribe();
        // The sender lives in `self`, so the channel cannot close here.
        let _ = rx.wait_for(|c| *c == 0).await;
    }
}
