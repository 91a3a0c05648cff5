//! Dataflow engine: a graph of processors joined by bounded queues that
//! homogenizes records, builds entity history, generates catalog metadata,
//! publishes to the portal, and pulls datasets back into a broker.

mod graph;
pub mod http;
mod mapping;
mod model;
mod ops;
mod processors;
mod source;
mod store;

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

pub use graph::{run_graph, ConnectionSpec, GraphHandle, GraphSpec, ProcessorCounters, ProcessorSpec};
pub use mapping::{
    attribute_for_distribution, dataset_title, distribution_title, organization_name, MappingRules, MetadataTracker,
    DIGITAL_TWIN_KEYWORD,
};
pub use model::{AttrType, AttributeSpec, ModelRegistry, ModelSpec};
pub use ops::{
    dataset_fetch, ngsi_to_ckan, republish_to_broker, to_smart_model, update_ckan_metadata, upsert, Fetched, LatLng,
    NotificationIngress, PublishCache, PublishReport, SmartModelRules, UpsertReport,
};
pub use processors::{FlowEnv, Processor};
pub use source::{csv_rows, publish_rows};
pub use store::{DeadLetter, HistoryRecord, HistoryStore};

use crate::broker::BrokerError;
use crate::entity::Entity;
use crate::odp::PortalError;
use crate::time::Timestamp;

/// Well-known `attributes_meta` keys.
pub mod meta {
    pub const SUBSCRIPTION: &str = "subscriptionId";
    pub const NOTIFIED_AT: &str = "notifiedAt";
    pub const DATASET: &str = "dataset";
    pub const RESOURCE_ID: &str = "resourceId";
    pub const RESOURCE_NAME: &str = "resourceName";
    pub const ATTRIBUTE: &str = "attribute";
    /// Set to `"true"` on the final row fetched from a dataset.
    pub const LAST_ROW: &str = "lastRow";
    pub const OBSERVED_AT: &str = "observedAt";
    pub const DROPPED_FIELDS: &str = "droppedFields";
    pub const UPSERT: &str = "upsert";
    /// Comma-separated attribute names written by the originating mutation.
    pub const TOUCHED: &str = "touched";
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("malformed notification: {0}")]
    MalformedNotification(String),
    #[error("unmappable record: {0}")]
    UnmappableRecord(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid processor config: {0}")]
    InvalidConfig(String),
    #[error("record is not entity-shaped")]
    NotEntityShaped,
    #[error("dataset name {dataset} is owned by organization {owner}")]
    NameConflict { dataset: String, owner: String },
    #[error("dataset {0} not found")]
    DatasetNotFound(String),
    #[error("portal unavailable: {0}")]
    PortalUnavailable(String),
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("portal rejected request: {0}")]
    Portal(PortalError),
    #[error("broker unavailable: {0}")]
    BrokerUnavailable(String),
    #[error("invalid entity: {0}")]
    InvalidEntity(String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("unknown processor {0}")]
    UnknownProcessor(String),
    #[error("graph stopped")]
    Stopped,
}

impl From<PortalError> for FlowError {
    fn from(e: PortalError) -> Self {
        match e {
            PortalError::DatasetNotFound(d) => FlowError::DatasetNotFound(d),
            PortalError::Unavailable(m) => FlowError::PortalUnavailable(m),
            PortalError::Unauthorized(m) => FlowError::Unauthorized(m),
            other => FlowError::Portal(other),
        }
    }
}

impl From<BrokerError> for FlowError {
    fn from(e: BrokerError) -> Self {
        match e {
            BrokerError::InvalidEntity(m) => FlowError::InvalidEntity(m),
            BrokerError::Unauthorized(m) | BrokerError::Forbidden(m) => FlowError::Unauthorized(m),
            other => FlowError::BrokerUnavailable(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    BrokerNotification,
    OdpFetch,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Entity(Entity),
    /// A tabular row: field name to raw value.
    Row(Map<String, Value>),
    /// An undecoded notification body, consumed by the ingress processor.
    Notification(Value),
}

/// The unit of flow between processors.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub payload: Payload,
    pub provenance: Provenance,
    pub received_at: Timestamp,
    pub attributes_meta: BTreeMap<String, String>,
    /// Catalog record attached by the metadata processor.
    pub catalog: Option<crate::odp::CatalogMetadata>,
}

impl FlowRecord {
    pub fn new(payload: Payload, provenance: Provenance, received_at: Timestamp) -> Self {
        FlowRecord {
            payload,
            provenance,
            received_at,
            attributes_meta: BTreeMap::new(),
            catalog: None,
        }
    }

    pub fn entity(e: Entity, provenance: Provenance, received_at: Timestamp) -> Self {
        Self::new(Payload::Entity(e), provenance, received_at)
    }

    pub fn row(row: Map<String, Value>, provenance: Provenance, received_at: Timestamp) -> Self {
        Self::new(Payload::Row(row), provenance, received_at)
    }

    pub fn with_meta(mut self, k: &str, v: impl Into<String>) -> Self {
        self.attributes_meta.insert(k.to_string(), v.into());
        self
    }

    pub fn meta(&self, k: &str) -> Option<&str> {
        self.attributes_meta.get(k).map(String::as_str)
    }

    pub fn as_entity(&self) -> Result<&Entity, FlowError> {
        match &self.payload {
            Payload::Entity(e) => Ok(e),
            _ => Err(FlowError::NotEntityShaped),
        }
    }

    /// Timestamp stamped on derived rows: the notification time when known.
    pub fn recorded_at(&self) -> Timestamp {
        self.meta(meta::NOTIFIED_AT)
            .and_then(|s| s.parse().ok())
            .unwrap_or(self.received_at)
    }

    /// Classifies an external JSON body: a notification if it has the
    /// notification keys, otherwise a row.
    pub fn from_external(body: Value, received_at: Timestamp) -> Result<Self, FlowError> {
        match body {
            Value::Object(obj) if obj.contains_key("subscriptionId") && obj.contains_key("data") => Ok(Self::new(
                Payload::Notification(Value::Object(obj)),
                Provenance::BrokerNotification,
                received_at,
            )),
            Value::Object(obj) => Ok(Self::row(obj, Provenance::File, received_at)),
            _ => Err(FlowError::UnmappableRecord("body must be a JSON object".into())),
        }
    }

    pub fn to_json(&self) -> Value {
        let payload = match &self.payload {
            Payload::Entity(e) => json!({ "entity": e.simplified() }),
            Payload::Row(r) => json!({ "row": r }),
            Payload::Notification(n) => json!({ "notification": n }),
        };
        json!({
            "payload": payload,
            "provenance": self.provenance,
            "received_at": self.received_at,
            "attributes_meta": self.attributes_meta,
        })
    }
}
