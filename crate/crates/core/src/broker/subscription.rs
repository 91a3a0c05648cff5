use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use url::Url;

use crate::entity::{validate_attribute_name, Entity, EntityId};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubscriptionStatus {
    Active,
    Paused,
}

/// A subscription registration as submitted by a client.
#[derive(Debug, Clone, PartialEq)]
pub struct SubscriptionRequest {
    pub id: Option<String>,
    pub entity_type: String,
    /// Empty means every attribute.
    pub watched_attributes: BTreeSet<String>,
    pub endpoint: String,
    pub active: bool,
}

impl SubscriptionRequest {
    pub fn new(entity_type: impl Into<String>, endpoint: impl Into<String>) -> Self {
        SubscriptionRequest {
            id: None,
            entity_type: entity_type.into(),
            watched_attributes: BTreeSet::new(),
            endpoint: endpoint.into(),
            active: true,
        }
    }

    pub fn watching<I, S>(mut self, attrs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.watched_attributes = attrs.into_iter().map(Into::into).collect();
        self
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "type": "Subscription",
            "entities": [{ "type": self.entity_type }],
            "notification": { "endpoint": { "uri": self.endpoint, "accept": "application/json" } },
            "isActive": self.active,
        });
        if !self.watched_attributes.is_empty() {
            v["watchedAttributes"] = json!(self.watched_attributes);
        }
        if let Some(id) = &self.id {
            v["id"] = json!(id);
        }
        v
    }

    pub fn from_json(v: &Value) -> Result<Self, String> {
        let entity_type = v["entities"]
            .as_array()
            .and_then(|es| match es.as_slice() {
                [one] => one["type"].as_str(),
                _ => None,
            })
            .ok_or("entities must hold exactly one {type} selector")?
            .to_string();
        let endpoint = v["notification"]["endpoint"]["uri"]
            .as_str()
            .ok_or("notification.endpoint.uri is required")?
            .to_string();
        let watched_attributes = match &v["watchedAttributes"] {
            Value::Null => BTreeSet::new(),
            Value::Array(a) => a
                .iter()
                .map(|x| {
                    x.as_str()
                        .map(str::to_string)
                        .ok_or("watchedAttributes must be strings")
                })
                .collect::<Result<_, _>>()?,
            _ => return Err("watchedAttributes must be an array".into()),
        };
        let active = match &v["isActive"] {
            Value::Null => true,
            Value::Bool(b) => *b,
            _ => return Err("isActive must be a boolean".into()),
        };
        Ok(SubscriptionRequest {
            id: v["id"].as_str().map(str::to_string),
            entity_type,
            watched_attributes,
            endpoint,
            active,
        })
    }

    pub(crate) fn validate(&self) -> Result<Url, String> {
        if self.entity_type.is_empty() || self.entity_type.contains(':') {
            return Err(format!("invalid entity type {:?}", self.entity_type));
        }
        for a in &self.watched_attributes {
            validate_attribute_name(a).map_err(|e| e.to_string())?;
        }
        if let Some(id) = &self.id {
            EntityId::parse(id).map_err(|e| e.to_string())?;
        }
        Url::parse(&self.endpoint).map_err(|e| format!("endpoint {:?} is not a URI: {e}", self.endpoint))
    }
}

/// Read-only view of a registered subscription with its delivery counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Subscription {
    pub id: String,
    pub entity_type_filter: String,
    pub watched_attributes: BTreeSet<String>,
    pub notification_endpoint: String,
    pub status: SubscriptionStatus,
    pub notifications_fired: u64,
    pub deliveries_attempted: u64,
    pub deliveries_succeeded: u64,
}

#[derive(Debug)]
pub(crate) struct SubscriptionSlot {
    pub id: String,
    pub entity_type: String,
    pub watched: BTreeSet<String>,
    pub endpoint: Url,
    pub status: SubscriptionStatus,
    pub fired: AtomicU64,
    pub attempted: AtomicU64,
    pub succeeded: AtomicU64,
}

impl SubscriptionSlot {
    pub fn new(id: String, req: &SubscriptionRequest, endpoint: Url) -> Self {
        SubscriptionSlot {
            id,
            entity_type: req.entity_type.clone(),
            watched: req.watched_attributes.clone(),
            endpoint,
            status: if req.active {
                SubscriptionStatus::Active
            } else {
                SubscriptionStatus::Paused
            },
            fired: AtomicU64::new(0),
            attempted: AtomicU64::new(0),
            succeeded: AtomicU64::new(0),
        }
    }

    pub fn matches(&self, entity_type: &str, touched: &BTreeSet<String>) -> bool {
        self.status == SubscriptionStatus::Active
            && self.entity_type == entity_type
            && !touched.is_empty()
            && (self.watched.is_empty() || !self.watched.is_disjoint(touched))
    }

    pub fn view(&self) -> Subscription {
        Subscription {
            id: self.id.clone(),
            entity_type_filter: self.entity_type.clone(),
            watched_attributes: self.watched.clone(),
            notification_endpoint: self.endpoint.to_string(),
            status: self.status,
            notifications_fired: self.fired.load(Ordering::SeqCst),
            deliveries_attempted: self.attempted.load(Ordering::SeqCst),
            deliveries_succeeded: self.succeeded.load(Ordering::SeqCst),
        }
    }
}

/// A change notification: post-update snapshots of the entities involved.
#[derive(Debug, Clone, PartialEq)]
pub struct Notification {
    pub subscription_id: String,
    pub fired_at: Timestamp,
    pub entities: Vec<Entity>,
    /// Attribute names written by the mutation that fired this notification.
    /// Empty when unknown.
    pub touched: BTreeSet<String>,
}

impl Notification {
    /// Wire body: `{subscriptionId, notifiedAt, data}` with simplified
    /// entities, plus a non-standard `touchedAttributes` list.
    pub fn to_wire(&self) -> Value {
        json!({
            "subscriptionId": self.subscription_id,
            "notifiedAt": self.fired_at,
            "data": self.entities.iter().map(Entity::simplified).collect::<Vec<_>>(),
            "touchedAttributes": self.touched,
        })
    }

    pub fn from_wire(v: &Value) -> Result<Self, String> {
        let subscription_id = v["subscriptionId"]
            .as_str()
            .ok_or("missing subscriptionId")?
            .to_string();
        let fired_at = v["notifiedAt"]
            .as_str()
            .ok_or("missing notifiedAt")?
            .parse()
            .map_err(|e: crate::time::TimestampParseError| e.to_string())?;
        let entities = v["data"]
            .as_array()
            .ok_or("missing data array")?
            .iter()
            .map(|e| Entity::from_json(e).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        if entities.is_empty() {
            return Err("notification carries no entities".into());
        }
        let touched = match v.get("touchedAttributes") {
            None | Some(Value::Null) => BTreeSet::new(),
            Some(t) => serde_json::from_value(t.clone()).map_err(|_| "touchedAttributes must be a list of names")?,
        };
        Ok(Notification {
            subscription_id,
            fired_at,
            entities,
            touched,
        })
    }
}
