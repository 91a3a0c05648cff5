//! Minimal NGSI-LD context broker.
//!
//! Holds only the current state of each entity. Every successful create or
//! update is matched against the subscription table while the store lock is
//! held, and the resulting notifications are queued for background delivery.

mod client;
mod dispatch;
pub mod http;
mod query;
mod subscription;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

pub use client::{ContextBroker, HttpBrokerClient};
pub use dispatch::{DeliveryError, HttpNotifier, Notifier, RetryPolicy};
pub use query::{CompareOp, NearFilter, Predicate, Query, QueryError};
pub use subscription::{Notification, Subscription, SubscriptionRequest, SubscriptionStatus};

use crate::entity::{Entity, EntityError, EntityId, Patch, Representation};
use crate::idle::InFlight;
use crate::time::{system_clock, SharedClock, StrictlyIncreasing};
use dispatch::{DeliveryQueue, Dispatcher};
use subscription::SubscriptionSlot;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BrokerError {
    #[error("entity {0} already exists")]
    AlreadyExists(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("invalid entity: {0}")]
    InvalidEntity(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid subscription: {0}")]
    InvalidSubscription(String),
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("broker unavailable: {0}")]
    Unavailable(String),
}

impl From<EntityError> for BrokerError {
    fn from(e: EntityError) -> Self {
        BrokerError::InvalidEntity(e.to_string())
    }
}

impl From<QueryError> for BrokerError {
    fn from(e: QueryError) -> Self {
        BrokerError::InvalidQuery(e.0)
    }
}

#[derive(Clone)]
pub struct BrokerConfig {
    pub retry: RetryPolicy,
    pub clock: SharedClock,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            retry: RetryPolicy::default(),
            clock: system_clock(),
        }
    }
}

struct SubscriptionEntry {
    slot: Arc<SubscriptionSlot>,
    queue: DeliveryQueue,
}

struct Inner {
    entities: RwLock<BTreeMap<EntityId, Entity>>,
    subscriptions: RwLock<BTreeMap<String, SubscriptionEntry>>,
    dispatcher: Dispatcher,
    stamps: StrictlyIncreasing,
    subscription_seq: AtomicU64,
    client_types: RwLock<HashMap<String, BTreeSet<String>>>,
}

/// Cheaply cloneable handle to one broker instance.
#[derive(Clone)]
pub struct Broker {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker")
            .field("entities", &self.inner.entities.read().len())
            .field("subscriptions", &self.inner.subscriptions.read().len())
            .finish()
    }
}

impl Broker {
    /// Must be called from within a Tokio runtime; delivery workers are
    /// spawned onto it.
    pub fn new(notifier: Arc<dyn Notifier>) -> Self {
        Self::with_config(notifier, BrokerConfig::default())
    }

    pub fn with_config(notifier: Arc<dyn Notifier>, config: BrokerConfig) -> Self {
        Broker {
            inner: Arc::new(Inner {
                entities: RwLock::new(BTreeMap::new()),
                subscriptions: RwLock::new(BTreeMap::new()),
                dispatcher: Dispatcher::new(notifier, config.retry),
                stamps: StrictlyIncreasing::new(config.clock),
                subscription_seq: AtomicU64::new(0),
                client_types: RwLock::new(HashMap::new()),
            }),
        }
    }

    pub fn create_entity(&self, e: Entity) -> Result<EntityId, BrokerError> {
        let mut store = self.inner.entities.write();
        if store.contains_key(e.id()) {
            return Err(BrokerError::AlreadyExists(e.id().to_string()));
        }
        let id = e.id().clone();
        let touched: BTreeSet<String> = e.attributes().keys().cloned().collect();
        self.evaluate_and_dispatch(&e, &touched);
        store.insert(id.clone(), e);
        Ok(id)
    }

    /// Replaces the patched attributes and reports exactly the patched names
    /// as touched, whether or not their values changed.
    pub fn update_attributes(&self, id: &EntityId, patch: Patch) -> Result<BTreeSet<String>, BrokerError> {
        let mut store = self.inner.entities.write();
        let current = store.get(id).ok_or_else(|| BrokerError::NotFound(id.to_string()))?;
        if let Some(t) = &patch.entity_type {
            if t != current.entity_type() {
                return Err(EntityError::TypeChange {
                    existing: current.entity_type().to_string(),
                    requested: t.clone(),
                }
                .into());
            }
        }
        let mut next = current.clone();
        let mut touched = BTreeSet::new();
        for (name, attr) in patch.attributes {
            next.set(&name, attr)?;
            touched.insert(name);
        }
        if !touched.is_empty() {
            self.evaluate_and_dispatch(&next, &touched);
            store.insert(id.clone(), next);
        }
        Ok(touched)
    }

    pub fn get_entity(&self, id: &EntityId) -> Result<Entity, BrokerError> {
        self.inner
            .entities
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| BrokerError::NotFound(id.to_string()))
    }

    pub fn render_entity(&self, id: &EntityId, rep: Representation) -> Result<serde_json::Value, BrokerError> {
        self.get_entity(id).map(|e| e.render(rep))
    }

    pub fn query_entities(&self, q: &Query) -> Vec<Entity> {
        q.apply(self.inner.entities.read().values())
    }

    /// Every entity, ordered by id.
    pub fn dump(&self) -> Vec<Entity> {
        self.inner.entities.read().values().cloned().collect()
    }

    pub fn entity_count(&self) -> usize {
        self.inner.entities.read().len()
    }

    pub fn delete_entity(&self, id: &EntityId) -> Result<(), BrokerError> {
        self.inner
            .entities
            .write()
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| BrokerError::NotFound(id.to_string()))
    }

    pub fn create_subscription(&self, req: SubscriptionRequest) -> Result<String, BrokerError> {
        let endpoint = req.validate().map_err(BrokerError::InvalidSubscription)?;
        let mut subs = self.inner.subscriptions.write();
        let id = match &req.id {
            Some(id) if subs.contains_key(id) => return Err(BrokerError::AlreadyExists(id.clone())),
            Some(id) => id.clone(),
            None => loop {
                let n = self.inner.subscription_seq.fetch_add(1, Ordering::SeqCst) + 1;
                let candidate = format!("urn:ngsi-ld:Subscription:{n}");
                if !subs.contains_key(&candidate) {
                    break candidate;
                }
            },
        };
        let slot = Arc::new(SubscriptionSlot::new(id.clone(), &req, endpoint));
        let queue = self.inner.dispatcher.spawn_worker(slot.clone());
        subs.insert(id.clone(), SubscriptionEntry { slot, queue });
        Ok(id)
    }

    pub fn subscription(&self, id: &str) -> Option<Subscription> {
        self.inner.subscriptions.read().get(id).map(|s| s.slot.view())
    }

    pub fn subscriptions(&self) -> Vec<Subscription> {
        self.inner
            .subscriptions
            .read()
            .values()
            .map(|s| s.slot.view())
            .collect()
    }

    /// Computes one notification per active subscription whose type filter
    /// matches and whose watched set meets `touched` (or is empty), queues
    /// each for delivery, and returns them.
    ///
    /// Called once per successful mutation with the post-update snapshot.
    pub fn evaluate_and_dispatch(&self, entity: &Entity, touched: &BTreeSet<String>) -> Vec<Notification> {
        let subs = self.inner.subscriptions.read();
        let mut out = Vec::new();
        for entry in subs.values() {
            if !entry.slot.matches(entity.entity_type(), touched) {
                continue;
            }
            let n = Notification {
                subscription_id: entry.slot.id.clone(),
                fired_at: self.inner.stamps.next(),
                entities: vec![entity.clone()],
                touched: touched.clone(),
            };
            entry.slot.fired.fetch_add(1, Ordering::SeqCst);
            self.inner.dispatcher.enqueue(&entry.queue, n.clone());
            out.push(n);
        }
        out
    }

    pub fn pending_deliveries(&self) -> usize {
        self.inner.dispatcher.pending().count()
    }

    /// Resolves once every queued notification has been delivered or dropped.
    pub async fn wait_delivered(&self) {
        self.inner.dispatcher.pending().wait_idle().await
    }

    pub fn deliveries(&self) -> &InFlight {
        self.inner.dispatcher.pending()
    }

    /// Binds an authenticated client to the entity types it may touch.
    pub fn restrict_client(&self, client_id: impl Into<String>, types: impl IntoIterator<Item = String>) {
        self.inner
            .client_types
            .write()
            .insert(client_id.into(), types.into_iter().collect());
    }

    /// `None` when the client is unrestricted.
    pub fn allowed_types(&self, client_id: &str) -> Option<BTreeSet<String>> {
        self.inner.client_types.read().get(client_id).cloned()
    }
}
