//! Background notification delivery with bounded exponential-backoff retry.
//!
//! Each subscription owns one worker task and one unbounded queue, so
//! deliveries for a subscription leave in the order the mutations happened
//! and a slow endpoint never blocks a mutator.

use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde_json::Value;
use tokio::sync::mpsc;
use url::Url;

use super::subscription::{Notification, SubscriptionSlot};
use crate::idle::InFlight;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            initial_backoff: Duration::from_millis(200),
            max_backoff: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay to wait after failed attempt number `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.saturating_sub(1));
        self.initial_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DeliveryError {
    #[error("endpoint answered HTTP {0}")]
    Status(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unsupported endpoint scheme {0:?}")]
    Scheme(String),
}

/// Something that can carry a notification body to an endpoint.
#[async_trait]
pub trait Notifier: Send + Sync {
    async fn deliver(&self, endpoint: &Url, body: &Value) -> Result<(), DeliveryError>;
}

#[derive(Debug, Clone)]
pub struct HttpNotifier {
    client: reqwest::Client,
}

impl HttpNotifier {
    pub fn new() -> Self {
        HttpNotifier {
            client: reqwest::Client::builder()
                .timeout(Duration::from_secs(10))
                .build()
                .expect("reqwest client"),
        }
    }
}

impl Default for HttpNotifier {
    fn default() -> Self {
        Self::new()
    }
}

#[async_trait]
impl Notifier for HttpNotifier {
    async fn deliver(&self, endpoint: &Url, body: &Value) -> Result<(), DeliveryError> {
        if !matches!(endpoint.scheme(), "http" | "https") {
            return Err(DeliveryError::Scheme(endpoint.scheme().to_string()));
        }
        let resp = self
            .client
            .post(endpoint.clone())
            .json(body)
            .send()
            .await
            .map_err(|e| DeliveryError::Transport(e.to_string()))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(DeliveryError::Status(resp.status().as_u16()))
        }
    }
}

pub(crate) struct Dispatcher {
    notifier: Arc<dyn Notifier>,
    policy: RetryPolicy,
    runtime: tokio::runtime::Handle,
    pending: InFlight,
}

pub(crate) type DeliveryQueue = mpsc::UnboundedSender<Notification>;

impl Dispatcher {
    pub fn new(notifier: Arc<dyn Notifier>, policy: RetryPolicy) -> Self {
        Dispatcher {
            notifier,
            policy,
            runtime: tokio::runtime::Handle::try_current().expect("the broker must be created inside a Tokio runtime"),
            pending: InFlight::new(),
        }
    }

    pub fn pending(&self) -> &InFlight {
        &self.pending
    }

    pub fn spawn_worker(&self, slot: Arc<SubscriptionSlot>) -> DeliveryQueue {
        let (tx, rx) = mpsc::unbounded_channel();
        self.runtime.spawn(run_worker(
            rx,
            slot,
            self.notifier.clone(),
            self.policy,
            self.pending.clone(),
        ));
        tx
    }

    pub fn enqueue(&self, queue: &DeliveryQueue, n: Notification) {
        self.pending.begin();
        if queue.send(n).is_err() {
            self.pending.end();
        }
    }
}

async fn run_worker(
    mut rx: mpsc::UnboundedReceiver<Notification>,
    slot: Arc<SubscriptionSlot>,
    notifier: Arc<dyn Notifier>,
    policy: RetryPolicy,
    pending: InFlight,
) {
    while let Some(n) = rx.recv().await {
        let body = n.to_wire();
        for attempt in 1..=policy.max_attempts {
            slot.attempted.fetch_add(1, Ordering::SeqCst);
            match notifier.deliver(&slot.endpoint, &body).await {
                Ok(()) => {
                    slot.succeeded.fetch_add(1, Ordering::SeqCst);
                    break;
                }
                Err(e) if attempt < policy.max_attempts => {
                    let wait = policy.backoff(attempt);
                    tracing::warn!(subscription = %slot.id, attempt, error = %e, ?wait, "notification delivery failed, retrying");
                    tokio::time::sleep(wait).await;
                }
                Err(e) => {
                    tracing::error!(subscription = %slot.id, attempts = attempt, error = %e, "notification dropped after final attempt");
                }
            }
        }
        pending.end();
    }
}
