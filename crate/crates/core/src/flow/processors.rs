//! Processor kinds and the environment they are built against.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::mapping::{MappingRules, MetadataTracker};
use super::model::ModelRegistry;
use super::ops::{
    dataset_fetch, ngsi_to_ckan, to_smart_model, update_ckan_metadata, upsert, NotificationIngress, PublishCache,
    SmartModelRules,
};
use super::store::{DeadLetter, HistoryRecord, HistoryStore};
use super::{meta, FlowError, FlowRecord, Payload};
use crate::broker::ContextBroker;
use crate::odp::PortalApi;
use crate::time::{system_clock, SharedClock, Timestamp};

/// Shared services processors are wired to.
#[derive(Clone)]
pub struct FlowEnv {
    pub portal: Option<Arc<dyn PortalApi>>,
    pub brokers: HashMap<String, Arc<dyn ContextBroker>>,
    pub history: Arc<HistoryStore>,
    pub dead_letter: Arc<DeadLetter>,
    pub models: Arc<ModelRegistry>,
    pub clock: SharedClock,
    /// Values for `${name}` placeholders in processor configs.
    pub vars: HashMap<String, String>,
}

impl std::fmt::Debug for FlowEnv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowEnv")
            .field("portal", &self.portal.is_some())
            .field("brokers", &self.brokers.keys().collect::<Vec<_>>())
            .field("vars", &self.vars)
            .finish()
    }
}

impl Default for FlowEnv {
    fn default() -> Self {
        Self::new(system_clock())
    }
}

impl FlowEnv {
    pub fn new(clock: SharedClock) -> Self {
        FlowEnv {
            portal: None,
            brokers: HashMap::new(),
            history: Arc::new(HistoryStore::in_memory()),
            dead_letter: Arc::new(DeadLetter::in_memory()),
            models: Arc::new(ModelRegistry::builtin()),
            clock,
            vars: HashMap::new(),
        }
    }

    pub fn with_portal(mut self, p: Arc<dyn PortalApi>) -> Self {
        self.portal = Some(p);
        self
    }

    pub fn with_broker(mut self, name: &str, b: Arc<dyn ContextBroker>) -> Self {
        self.brokers.insert(name.to_string(), b);
        self
    }

    pub fn with_history(mut self, h: Arc<HistoryStore>) -> Self {
        self.history = h;
        self
    }

    pub fn with_dead_letter(mut self, d: Arc<DeadLetter>) -> Self {
        self.dead_letter = d;
        self
    }

    pub fn with_models(mut self, m: Arc<ModelRegistry>) -> Self {
        self.models = m;
        self
    }

    pub fn with_var(mut self, k: &str, v: impl Into<String>) -> Self {
        self.vars.insert(k.to_string(), v.into());
        self
    }

    fn portal(&self) -> Result<Arc<dyn PortalApi>, FlowError> {
        self.portal
            .clone()
            .ok_or_else(|| FlowError::InvalidConfig("no portal configured".into()))
    }

    fn broker(&self, name: &str) -> Result<Arc<dyn ContextBroker>, FlowError> {
        self.brokers
            .get(name)
            .cloned()
            .ok_or_else(|| FlowError::InvalidConfig(format!("unknown broker {name:?}")))
    }

    /// Replaces `${name}` in every string of `config`.
    pub fn substitute(&self, config: &Value) -> Result<Value, FlowError> {
        Ok(match config {
            Value::String(s) => Value::String(self.expand(s)?),
            Value::Array(a) => Value::Array(a.iter().map(|v| self.substitute(v)).collect::<Result<_, _>>()?),
            Value::Object(o) => Value::Object(
                o.iter()
                    .map(|(k, v)| Ok((k.clone(), self.substitute(v)?)))
                    .collect::<Result<Map<_, _>, FlowError>>()?,
            ),
            other => other.clone(),
        })
    }

    fn expand(&self, s: &str) -> Result<String, FlowError> {
        let mut out = String::with_capacity(s.len());
        let mut rest = s;
        while let Some(start) = rest.find("${") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after
                .find('}')
                .ok_or_else(|| FlowError::InvalidConfig(format!("unterminated placeholder in {s:?}")))?;
            let name = &after[..end];
            let v = self
                .vars
                .get(name)
                .ok_or_else(|| FlowError::InvalidConfig(format!("undefined variable {name:?}")))?;
            out.push_str(v);
            rest = &after[end + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// A graph node. `process` is called with one record at a time, in queue
/// order; the outputs are forwarded to every downstream connection.
#[async_trait]
pub trait Processor: Send + Sync {
    fn kind(&self) -> &'static str;
    async fn process(&self, rec: FlowRecord) -> Result<Vec<FlowRecord>, FlowError>;
    /// Kind-specific running totals.
    fn report(&self) -> Value {
        Value::Null
    }
}

fn parse<T: DeserializeOwned>(kind: &str, config: Value) -> Result<T, FlowError> {
    let config = if config.is_null() { json!({}) } else { config };
    serde_json::from_value(config).map_err(|e| FlowError::InvalidConfig(format!("{kind}: {e}")))
}

/// Instantiates a processor of `kind` from its JSON config.
pub fn build(kind: &str, config: &Value, env: &FlowEnv) -> Result<Arc<dyn Processor>, FlowError> {
    let config = env.substitute(config)?;
    let p: Arc<dyn Processor> = match kind {
        "notification_ingress" => Arc::new(Ingress(NotificationIngress::new())),
        "to_smart_model" => Arc::new(SmartModel {
            rules: parse(kind, config)?,
            models: env.models.clone(),
            dropped: Mutex::new(0),
        }),
        "update_ckan_metadata" => {
            let rules: MappingRules = parse(kind, config)?;
            rules.validate()?;
            Arc::new(Metadata {
                rules,
                tracker: MetadataTracker::new(),
                clock: env.clock.clone(),
            })
        }
        "ngsi_to_ckan" => {
            let rules: MappingRules = parse(kind, config)?;
            rules.validate()?;
            Arc::new(Ckan {
                portal: env.portal()?,
                rules,
                cache: PublishCache::new(),
                tracker: MetadataTracker::new(),
                clock: env.clock.clone(),
                totals: Mutex::new(CkanTotals::default()),
            })
        }
        "history_sink" => Arc::new(History {
            store: env.history.clone(),
        }),
        "dataset_fetch" => Arc::new(Fetch {
            portal: env.portal()?,
            clock: env.clock.clone(),
            redirects: Mutex::new(Vec::new()),
        }),
        "merge_rows" => {
            let cfg: MergeConfig = parse(kind, config)?;
            Arc::new(MergeRows {
                require: cfg.require,
                pending: Mutex::new(BTreeMap::new()),
            })
        }
        "republish_to_broker" => {
            let cfg: RepublishConfig = parse(kind, config)?;
            Arc::new(Republish {
                broker: env.broker(&cfg.broker)?,
                totals: Mutex::new((0, 0)),
            })
        }
        other => return Err(FlowError::UnknownProcessor(other.to_string())),
    };
    Ok(p)
}

struct Ingress(NotificationIngress);

#[async_trait]
impl Processor for Ingress {
    fn kind(&self) -> &'static str {
        "notification_ingress"
    }
    async fn process(&self, rec: FlowRecord) -> Result<Vec<FlowRecord>, FlowError> {
        self.0.ingest(rec)
    }
    fn report(&self) -> Value {
        json!({ "duplicates": self.0.duplicates() })
    }
}

struct SmartModel {
    rules: SmartModelRules,
    models: Arc<ModelRegistry>,
    dropped: Mutex<u64>,
}

#[async_trait]
impl Processor for SmartModel {
    fn kind(&self) -> &'static str {
        "to_smart_model"
    }
    async fn process(&self, rec: FlowRecord) -> Result<Vec<FlowRecord>, FlowError> {
        let out = to_smart_model(rec, &self.rules, &self.models)?;
        let n: u64 = out.meta(meta::DROPPED_FIELDS).and_then(|s| s.parse().ok()).unwrap_or(0);
        *self.dropped.lock() += n;
        Ok(vec![out])
    }
    fn report(&self) -> Value {
        json!({ "dropped_fields": *self.dropped.lock() })
    }
}

struct Metadata {
    rules: MappingRules,
    tracker: MetadataTracker,
    clock: SharedClock,
}

#[async_trait]
impl Processor for Metadata {
    fn kind(&self) -> &'static str {
        "update_ckan_metadata"
    }
    async fn process(&self, mut rec: FlowRecord) -> Result<Vec<FlowRecord>, FlowError> {
        let m = update_ckan_metadata(&rec, &self.rules, &self.tracker, self.clock.now())?;
        rec.catalog = Some(m);
        Ok(vec![rec])
    }
}

#[derive(Default)]
struct CkanTotals {
    reports: u64,
    datasets_created: u64,
    resources_created: u64,
    rows_appended: u64,
}

struct Ckan {
    portal: Arc<dyn PortalApi>,
    rules: MappingRules,
    cache: PublishCache,
    /// Used only for records that arrive without a catalog record.
    tracker: MetadataTracker,
    clock: SharedClock,
    totals: Mutex<CkanTotals>,
}

#[async_trait]
impl Processor for Ckan {
    fn kind(&self) -> &'static str {
        "ngsi_to_ckan"
    }
    async fn process(&self, rec: FlowRecord) -> Result<Vec<FlowRecord>, FlowError> {
        let m = match &rec.catalog {
            Some(m) => m.clone(),
            None => update_ckan_metadata(&rec, &self.rules, &self.tracker, self.clock.now())?,
        };
        let r = ngsi_to_ckan(self.portal.as_ref(), &rec, &m, &self.rules, &self.cache).await?;
        let mut t = self.totals.lock();
        t.reports += 1;
        t.datasets_created += u64::from(r.dataset_created);
        t.resources_created += r.resources_created.len() as u64;
        t.rows_appended += r.rows_appended as u64;
        Ok(vec![rec])
    }
    fn report(&self) -> Value {
        let t = self.totals.lock();
        json!({
            "reports": t.reports,
            "datasets_created": t.datasets_created,
            "resources_created": t.resources_created,
            "rows_appended": t.rows_appended,
        })
    }
}

struct History {
    store: Arc<HistoryStore>,
}

#[async_trait]
impl Processor for History {
    fn kind(&self) -> &'static str {
        "history_sink"
    }
    async fn process(&self, rec: FlowRecord) -> Result<Vec<FlowRecord>, FlowError> {
        let e = rec.as_entity()?;
        self.store.append(&HistoryRecord::from_snapshot(e, rec.recorded_at()))?;
        Ok(vec![rec])
    }
    fn report(&self) -> Value {
        json!({ "length": self.store.len() })
    }
}

struct Fetch {
    portal: Arc<dyn PortalApi>,
    clock: SharedClock,
    redirects: Mutex<Vec<String>>,
}

#[async_trait]
impl Processor for Fetch {
    fn kind(&self) -> &'static str {
        "dataset_fetch"
    }
    /// Triggered by a row `{"dataset": name}`.
    async fn process(&self, rec: FlowRecord) -> Result<Vec<FlowRecord>, FlowError> {
        let name = match &rec.payload {
            Payload::Row(r) => r.get(meta::DATASET).and_then(Value::as_str).map(str::to_string),
            _ => None,
        }
        .or_else(|| rec.meta(meta::DATASET).map(str::to_string))
        .ok_or_else(|| FlowError::UnmappableRecord("fetch trigger needs a dataset name".into()))?;
        let fetched = dataset_fetch(self.portal.as_ref(), &name, self.clock.now()).await?;
        self.redirects.lock().extend(fetched.broker_redirects);
        Ok(fetched.records)
    }
    fn report(&self) -> Value {
        json!({ "broker_redirects": *self.redirects.lock() })
    }
}

#[derive(Deserialize)]
struct MergeConfig {
    /// Attributes that must have a value before a merged row is emitted.
    #[serde(default)]
    require: Vec<String>,
}

#[derive(Default)]
struct Merged {
    fields: Map<String, Value>,
    latest: Option<Timestamp>,
}

/// Folds per-attribute history rows of one dataset into a single row holding
/// the latest value of each attribute, emitted on the dataset's last row.
struct MergeRows {
    require: Vec<String>,
    pending: Mutex<BTreeMap<String, Merged>>,
}

#[async_trait]
impl Processor for MergeRows {
    fn kind(&self) -> &'static str {
        "merge_rows"
    }
    async fn process(&self, rec: FlowRecord) -> Result<Vec<FlowRecord>, FlowError> {
        let dataset = rec
            .meta(meta::DATASET)
            .ok_or_else(|| FlowError::UnmappableRecord("row carries no dataset".into()))?
            .to_string();
        let Payload::Row(row) = &rec.payload else {
            return Err(FlowError::UnmappableRecord("merge_rows expects rows".into()));
        };
        let mut pending = self.pending.lock();
        let slot = pending.entry(dataset.clone()).or_default();
        if let (Some(attr), Some(v)) = (rec.meta(meta::ATTRIBUTE), row.get("value")) {
            let at: Option<Timestamp> = row
                .get("recorded_at")
                .and_then(Value::as_str)
                .and_then(|s| s.parse().ok());
            slot.fields.insert(attr.to_string(), v.clone());
            slot.latest = slot.latest.max(at);
        }
        if rec.meta(meta::LAST_ROW) != Some("true") {
            return Ok(Vec::new());
        }
        let merged = pending.remove(&dataset).unwrap_or_default();
        if let Some(missing) = self.require.iter().find(|a| !merged.fields.contains_key(*a)) {
            return Err(FlowError::UnmappableRecord(format!(
                "dataset {dataset} has no {missing} rows"
            )));
        }
        let mut fields = Map::new();
        fields.insert("id".into(), Value::String(dataset.clone()));
        fields.extend(merged.fields);
        let mut out = FlowRecord::row(fields, rec.provenance, rec.received_at).with_meta(meta::DATASET, dataset);
        if let Some(t) = merged.latest {
            out = out.with_meta(meta::OBSERVED_AT, t.to_string());
        }
        Ok(vec![out])
    }
}

#[derive(Deserialize)]
struct RepublishConfig {
    broker: String,
}

struct Republish {
    broker: Arc<dyn ContextBroker>,
    totals: Mutex<(u64, u64)>,
}

#[async_trait]
impl Processor for Republish {
    fn kind(&self) -> &'static str {
        "republish_to_broker"
    }
    async fn process(&self, rec: FlowRecord) -> Result<Vec<FlowRecord>, FlowError> {
        let created = upsert(self.broker.as_ref(), rec.as_entity()?).await?;
        let mut t = self.totals.lock();
        if created {
            t.0 += 1;
        } else {
            t.1 += 1;
        }
        Ok(vec![
            rec.with_meta(meta::UPSERT, if created { "created" } else { "patched" })
        ])
    }
    fn report(&self) -> Value {
        let t = self.totals.lock();
        json!({ "created": t.0, "patched": t.1 })
    }
}
