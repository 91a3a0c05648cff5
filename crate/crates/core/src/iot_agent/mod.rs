//! IoT gateway: turns `<device>|key|value[|key|value…]` measurement lines into
//! broker attribute updates, and broker-side commands into device payloads
//! of the form `<device>@<directive>`.

pub mod http;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::broker::{BrokerError, ContextBroker};
use crate::entity::{validate_attribute_name, Attribute, Entity, EntityId, Patch, LOCATION};
use crate::geo::GeoPoint;
use crate::time::{system_clock, SharedClock, Timestamp};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IotError {
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("device {device} has no mapping for key {key:?}")]
    UnmappedKey { device: String, key: String },
    #[error("device {0} is already registered")]
    DuplicateDevice(String),
    #[error("invalid registration: {0}")]
    InvalidRegistration(String),
    #[error("no device is bound to entity {0}")]
    UnknownEntity(String),
    #[error("command {command:?} is not defined for entity {entity}")]
    UnknownCommand { entity: String, command: String },
    #[error("broker: {0}")]
    Broker(#[from] BrokerError),
    #[error("iot agent unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeviceRegistration {
    pub device_id: String,
    pub entity_id: EntityId,
    pub entity_type: String,
    #[serde(default)]
    pub attribute_map: BTreeMap<String, String>,
    #[serde(default)]
    pub command_map: BTreeMap<String, String>,
    /// Fixed position written as `location` when the entity is first created.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
}

impl DeviceRegistration {
    pub fn new(device_id: impl Into<String>, entity_id: EntityId) -> Self {
        let entity_type = entity_id.type_segment().to_string();
        DeviceRegistration {
            device_id: device_id.into(),
            entity_id,
            entity_type,
            attribute_map: BTreeMap::new(),
            command_map: BTreeMap::new(),
            location: None,
        }
    }

    pub fn map(mut self, key: &str, attribute: &str) -> Self {
        self.attribute_map.insert(key.into(), attribute.into());
        self
    }

    pub fn command(mut self, name: &str, directive: &str) -> Self {
        self.command_map.insert(name.into(), directive.into());
        self
    }

    pub fn at(mut self, p: GeoPoint) -> Self {
        self.location = Some(p);
        self
    }

    pub fn validate(&self) -> Result<(), IotError> {
        let bad = |m: String| Err(IotError::InvalidRegistration(m));
        if self.device_id.is_empty()
            || self.device_id.contains(['|', '@'])
            || self.device_id.contains(char::is_whitespace)
        {
            return bad(format!("device id {:?}", self.device_id));
        }
        if self.entity_type.is_empty() {
            return bad("entity type is empty".into());
        }
        if self.entity_id.type_segment() != self.entity_type {
            return bad(format!("entity {} is not of type {}", self.entity_id, self.entity_type));
        }
        if self.attribute_map.is_empty() && self.command_map.is_empty() {
            return bad("device maps no attributes and no commands".into());
        }
        for (key, attr) in &self.attribute_map {
            if key.is_empty() || key.contains('|') {
                return bad(format!("device key {key:?}"));
            }
            if attr == LOCATION || validate_attribute_name(attr).is_err() {
                return bad(format!("attribute name {attr:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub device_id: String,
    pub pairs: Vec<(String, String)>,
    pub received_at: Timestamp,
}

impl Measurement {
    pub fn parse(line: &str, received_at: Timestamp) -> Result<Self, IotError> {
        let line = line.trim_end_matches(['\r', '\n']);
        let mut parts = line.split('|');
        let device_id = parts.next().unwrap_or_default();
        if device_id.is_empty() {
            return Err(IotError::MalformedPayload("missing device id".into()));
        }
        let rest: Vec<&str> = parts.collect();
        if rest.is_empty() || !rest.len().is_multiple_of(2) {
            return Err(IotError::MalformedPayload(format!(
                "expected key|value pairs in {line:?}"
            )));
        }
        let pairs = rest
            .chunks(2)
            .map(|kv| {
                if kv[0].is_empty() || kv[1].is_empty() {
                    Err(IotError::MalformedPayload(format!("empty key or value in {line:?}")))
                } else {
                    Ok((kv[0].to_string(), kv[1].to_string()))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Measurement {
            device_id: device_id.to_string(),
            pairs,
            received_at,
        })
    }
}

fn is_decimal(s: &str) -> bool {
    let digits = s.strip_prefix('-').unwrap_or(s);
    let (int, frac) = match digits.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (digits, None),
    };
    !int.is_empty()
        && int.bytes().all(|b| b.is_ascii_digit())
        && frac.is_none_or(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
}

/// Integers and decimals become numbers, `true`/`false` booleans, the rest
/// strings.
pub fn type_value(raw: &str) -> Value {
    match raw {
        "true" => return Value::Bool(true),
        "false" => return Value::Bool(false),
        _ => {}
    }
    if is_decimal(raw) {
        if !raw.contains('.') {
            if let Ok(i) = raw.parse::<i64>() {
                return i.into();
            }
        }
        if let Some(n) = raw.parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
            return Value::Number(n);
        }
    }
    Value::String(raw.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CommandRecord {
    pub entity_id: EntityId,
    pub device_id: String,
    pub command: String,
    pub directive: String,
    pub payload: String,
    pub issued_at: Timestamp,
}

/// Anything that can deliver an actuation command to a device.
#[async_trait]
pub trait CommandSink: Send + Sync {
    async fn send_command(&self, entity_id: &EntityId, command: &str) -> Result<String, IotError>;
}

struct DeviceSlot {
    reg: DeviceRegistration,
    lock: tokio::sync::Mutex<()>,
}

#[derive(Clone)]
pub struct IotAgent {
    devices: Arc<RwLock<BTreeMap<String, Arc<DeviceSlot>>>>,
    broker: Arc<dyn ContextBroker>,
    commands: Arc<Mutex<Vec<CommandRecord>>>,
    clock: SharedClock,
}

impl std::fmt::Debug for IotAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IotAgent")
            .field("devices", &self.devices.read().len())
            .field("commands", &self.commands.lock().len())
            .finish()
    }
}

impl IotAgent {
    pub fn new(broker: Arc<dyn ContextBroker>) -> Self {
        Self::with_clock(broker, system_clock())
    }

    pub fn with_clock(broker: Arc<dyn ContextBroker>, clock: SharedClock) -> Self {
        IotAgent {
            devices: Arc::new(RwLock::new(BTreeMap::new())),
            broker,
            commands: Arc::new(Mutex::new(Vec::new())),
            clock,
        }
    }

    pub fn register_device(&self, r: DeviceRegistration) -> Result<(), IotError> {
        r.validate()?;
        let mut devices = self.devices.write();
        if devices.contains_key(&r.device_id) {
            return Err(IotError::DuplicateDevice(r.device_id));
        }
        devices.insert(
            r.device_id.clone(),
            Arc::new(DeviceSlot {
                reg: r,
                lock: tokio::sync::Mutex::new(()),
            }),
        );
        Ok(())
    }

    pub fn devices(&self) -> Vec<DeviceRegistration> {
        self.devices.read().values().map(|s| s.reg.clone()).collect()
    }

    /// Applies one measurement line and returns the touched attribute names.
    ///
    /// Every key is checked against the device map before anything is
    /// written. Lines for the same device are applied one at a time.
    pub async fn ingest(&self, line: &str) -> Result<BTreeSet<String>, IotError> {
        let m = Measurement::parse(line, self.clock.now())?;
        let slot = self
            .devices
            .read()
            .get(&m.device_id)
            .cloned()
            .ok_or_else(|| IotError::UnknownDevice(m.device_id.clone()))?;
        let reg = &slot.reg;
        let mut patch = Patch::new();
        for (key, raw) in &m.pairs {
            let attr = reg.attribute_map.get(key).ok_or_else(|| IotError::UnmappedKey {
                device: reg.device_id.clone(),
                key: key.clone(),
            })?;
            patch
                .attributes
                .insert(attr.clone(), Attribute::property(type_value(raw)));
        }
        let touched: BTreeSet<String> = patch.attributes.keys().cloned().collect();

        let _guard = slot.lock.lock().await;
        match self.broker.update_attributes(&reg.entity_id, &patch).await {
            Ok(_) => Ok(touched),
            Err(BrokerError::NotFound(_)) => {
                let mut e = Entity::new(reg.entity_id.clone(), reg.entity_type.clone())
                    .map_err(|e| IotError::InvalidRegistration(e.to_string()))?;
                if let Some(p) = reg.location {
                    e.set(LOCATION, Attribute::geo(p)).expect("location is a geo point");
                }
                for (name, attr) in &patch.attributes {
                    e.set(name, attr.clone()).expect("validated at registration");
                }
                match self.broker.create_entity(&e).await {
                    Ok(_) => Ok(touched),
                    // Created concurrently by another writer; fall back to a patch.
                    Err(BrokerError::AlreadyExists(_)) => {
                        self.broker.update_attributes(&reg.entity_id, &patch).await?;
                        Ok(touched)
                    }
                    Err(e) => Err(e.into()),
                }
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn issue_command(&self, entity_id: &EntityId, command: &str) -> Result<CommandRecord, IotError> {
        let devices = self.devices.read();
        let mut bound = devices.values().filter(|s| &s.reg.entity_id == entity_id).peekable();
        if bound.peek().is_none() {
            return Err(IotError::UnknownEntity(entity_id.to_string()));
        }
        let (device_id, directive) = bound
            .find_map(|s| {
                s.reg
                    .command_map
                    .get(command)
                    .map(|d| (s.reg.device_id.clone(), d.clone()))
            })
            .ok_or_else(|| IotError::UnknownCommand {
                entity: entity_id.to_string(),
                command: command.to_string(),
            })?;
        drop(devices);
        let rec = CommandRecord {
            entity_id: entity_id.clone(),
            payload: format!("{device_id}@{directive}"),
            device_id,
            command: command.to_string(),
            directive,
            issued_at: self.clock.now(),
        };
        self.commands.lock().push(rec.clone());
        Ok(rec)
    }

    /// Command log in issue order.
    pub fn commands(&self) -> Vec<CommandRecord> {
        self.commands.lock().clone()
    }

    /// Log entries from position `from` onwards, for devices that poll.
    pub fn commands_since(&self, from: usize) -> Vec<CommandRecord> {
        self.commands.lock().iter().skip(from).cloned().collect()
    }
}

#[async_trait]
impl CommandSink for IotAgent {
    async fn send_command(&self, entity_id: &EntityId, command: &str) -> Result<String, IotError> {
        self.issue_command(entity_id, command).map(|r| r.payload)
    }
}

/// HTTP client for a remote agent.
#[derive(Debug, Clone)]
pub struct HttpIotClient {
    base: String,
    http: reqwest::Client,
}

impl HttpIotClient {
    pub fn new(base: impl Into<String>) -> Self {
        HttpIotClient {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    async fn check(resp: Result<reqwest::Response, reqwest::Error>) -> Result<Value, IotError> {
        let resp = resp.map_err(|e| IotError::Unavailable(e.to_string()))?;
        let status = resp.status();
        let body: Value = resp.json().await.unwrap_or(Value::Null);
        if status.is_success() {
            return Ok(body);
        }
        Err(http::decode_error(&body).unwrap_or_else(|| IotError::Unavailable(format!("agent returned {status}"))))
    }

    pub async fn register_device(&self, r: &DeviceRegistration) -> Result<(), IotError> {
        let url = format!("{}/iot/devices", self.base);
        Self::check(self.http.post(url).json(r).send().await).await.map(|_| ())
    }

    pub async fn ingest(&self, line: &str) -> Result<BTreeSet<String>, IotError> {
        let url = format!("{}/iot/ingest", self.base);
        let req = self
            .http
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "text/plain")
            .body(line.to_string());
        let v = Self::check(req.send().await).await?;
        Ok(v["touched"]
            .as_array()
            .map(|a| a.iter().filter_map(|s| s.as_str().map(str::to_string)).collect())
            .unwrap_or_default())
    }

    pub async fn commands(&self) -> Result<Vec<CommandRecord>, IotError> {
        let url = format!("{}/iot/commands", self.base);
        let text = self
            .http
            .get(url)
            .send()
            .await
            .and_then(|r| r.error_for_status())
            .map_err(|e| IotError::Unavailable(e.to_string()))?
            .text()
            .await
            .map_err(|e| IotError::Unavailable(e.to_string()))?;
        text.lines()
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| IotError::Unavailable(e.to_string())))
            .collect()
    }
}

#[async_trait]
impl CommandSink for HttpIotClient {
    async fn send_command(&self, entity_id: &EntityId, command: &str) -> Result<String, IotError> {
        let url = format!("{}/iot/commands", self.base);
        let body = serde_json::json!({ "entityId": entity_id, "command": command });
        let v = Self::check(self.http.post(url).json(&body).send().await).await?;
        v["payload"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| IotError::Unavailable("command response lacks payload".into()))
    }
}
