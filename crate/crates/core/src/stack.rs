//! Single-process supervisor for the six services: two context brokers,
//! the open-data portal, access control (token endpoint plus the PEP in
//! front of the parking broker), the IoT agent and the flow engine.
//!
//! Every listener is bound before any task starts, so a startup failure
//! leaves nothing running.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::access::proxy::PepProxy;
use crate::access::{AccessControl, ClientCredentialsSource, TokenSource};
use crate::broker::{Broker, BrokerConfig, ContextBroker, HttpBrokerClient, HttpNotifier, SubscriptionRequest};
use crate::flow::{
    http::FlowService, run_graph, DeadLetter, FlowEnv, GraphHandle, GraphSpec, HistoryStore, ModelRegistry,
};
use crate::iot_agent::IotAgent;
use crate::odp::{HttpPortalClient, Portal};
use crate::time::{system_clock, SharedClock};
use crate::twin::{Relay, RequestProcessor, RequestService, REQUEST_TYPE};

pub const PARKING_BROKER: &str = "parking-broker";
pub const URBAN_BROKER: &str = "urban-broker";
pub const ODP: &str = "odp";
pub const ACCESS_CONTROL: &str = "access-control";
pub const IOT_AGENT: &str = "iot-agent";
pub const FLOW_ENGINE: &str = "flow-engine";

pub const SERVICES: [&str; 6] = [
    PARKING_BROKER,
    URBAN_BROKER,
    ODP,
    ACCESS_CONTROL,
    IOT_AGENT,
    FLOW_ENGINE,
];

pub const ENV_PREFIX: &str = "TWINLOD_";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StackError {
    #[error("config error in {path}: {reason}")]
    Config { path: String, reason: String },
    #[error("port {port} for {service} is unavailable: {reason}")]
    PortInUse { service: String, port: u16, reason: String },
    #[error("service failure: {0}")]
    Service(String),
}

impl StackError {
    fn config(path: impl AsRef<Path>, reason: impl ToString) -> Self {
        StackError::Config {
            path: path.as_ref().display().to_string(),
            reason: reason.to_string(),
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            StackError::Config { .. } => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ports {
    pub parking_broker: u16,
    pub urban_broker: u16,
    pub odp: u16,
    pub access_control: u16,
    pub iot_agent: u16,
    pub flow_engine: u16,
}

impl Ports {
    pub fn get(&self, service: &str) -> Option<u16> {
        Some(match service {
            PARKING_BROKER => self.parking_broker,
            URBAN_BROKER => self.urban_broker,
            ODP => self.odp,
            ACCESS_CONTROL => self.access_control,
            IOT_AGENT => self.iot_agent,
            FLOW_ENGINE => self.flow_engine,
            _ => return None,
        })
    }

    fn slot(&mut self, service: &str) -> Option<&mut u16> {
        Some(match service {
            PARKING_BROKER => &mut self.parking_broker,
            URBAN_BROKER => &mut self.urban_broker,
            ODP => &mut self.odp,
            ACCESS_CONTROL => &mut self.access_control,
            IOT_AGENT => &mut self.iot_agent,
            FLOW_ENGINE => &mut self.flow_engine,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BrokerSide {
    /// Subscribed through the PEP with the flow client's token.
    Parking,
    Urban,
}

/// Wires a broker subscription to a processor of a flow graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedConfig {
    pub broker: BrokerSide,
    pub entity_type: String,
    pub graph: String,
    pub processor: String,
    #[serde(default)]
    pub watched: Vec<String>,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCredentials {
    pub client_id: String,
    pub client_secret: String,
}

impl std::fmt::Debug for FlowCredentials {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowCredentials")
            .field("client_id", &self.client_id)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    #[serde(default = "default_host")]
    pub host: String,
    pub ports: Ports,
    #[serde(default = "default_ttl")]
    pub token_ttl_s: u64,
    pub policies: PathBuf,
    pub clients: PathBuf,
    #[serde(default)]
    pub models: Option<PathBuf>,
    #[serde(default)]
    pub graphs: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub feeds: Vec<FeedConfig>,
    #[serde(default)]
    pub scenario: Option<PathBuf>,
    #[serde(default)]
    pub app_dir: Option<PathBuf>,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Entity types each client may touch on the parking broker.
    #[serde(default)]
    pub client_scopes: BTreeMap<String, Vec<String>>,
    pub flow_client: FlowCredentials,
    #[serde(default = "default_ttl")]
    pub request_max_age_s: u64,
    /// Services not to start.
    #[serde(default)]
    pub disabled: Vec<String>,
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_ttl() -> u64 {
    3600
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl StackConfig {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, StackError> {
        let text = std::fs::read_to_string(path).map_err(|e| StackError::config(path, e))?;
        let mut cfg: StackConfig = serde_json::from_str(&text).map_err(|e| StackError::config(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.policies);
        resolve(base, &mut self.clients);
        for p in self
            .models
            .iter_mut()
            .chain(self.graphs.values_mut())
            .chain(self.scenario.iter_mut())
            .chain(self.app_dir.iter_mut())
            .chain(self.data_dir.iter_mut())
        {
            resolve(base, p);
        }
    }

    /// Applies `TWINLOD_*` overrides: `HOST`, `TOKEN_TTL_S`, `POLICIES`,
    /// `CLIENTS`, `MODELS`, `SCENARIO`, `APP_DIR`, `DATA_DIR`, `DISABLED`
    /// (comma separated) and `PORT_<SERVICE>` such as `PORT_URBAN_BROKER`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), StackError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let v = v.as_ref();
            let bad = |reason: &str| StackError::config(format!("env:{}", k.as_ref()), reason);
            match key {
                "HOST" => self.host = v.to_string(),
                "TOKEN_TTL_S" => self.token_ttl_s = v.parse().map_err(|_| bad("not an integer"))?,
                "POLICIES" => self.policies = v.into(),
                "CLIENTS" => self.clients = v.into(),
                "MODELS" => self.models = Some(v.into()),
                "SCENARIO" => self.scenario = Some(v.into()),
                "APP_DIR" => self.app_dir = Some(v.into()),
                "DATA_DIR" => self.data_dir = Some(v.into()),
                "DISABLED" => {
                    self.disabled = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                "CONFIG" | "LOG_LEVEL" | "REPORT" => {}
                other => {
                    let Some(service) = other.strip_prefix("PORT_") else {
                        continue;
                    };
                    let name = service.to_ascii_lowercase().replace('_', "-");
                    let port = v.parse().map_err(|_| bad("not a port number"))?;
                    *self.ports.slot(&name).ok_or_else(|| bad("unknown service"))? = port;
                }
            }
        }
        Ok(())
    }

    /// All ports set to 0, for tests.
    pub fn with_ephemeral_ports(mut self) -> Self {
        self.ports = Ports {
            parking_broker: 0,
            urban_broker: 0,
            odp: 0,
            access_control: 0,
            iot_agent: 0,
            flow_engine: 0,
        };
        self
    }

    pub fn is_enabled(&self, service: &str) -> bool {
        !self.disabled.iter().any(|d| d == service)
    }

    /// Checks file references, service names and port uniqueness.
    pub fn validate(&self) -> Result<(), StackError> {
        for p in [&self.policies, &self.clients]
            .into_iter()
            .chain(self.models.iter())
            .chain(self.graphs.values())
            .chain(self.scenario.iter())
        {
            if !p.is_file() {
                return Err(StackError::config(p, "file not found"));
            }
        }
        for d in &self.disabled {
            if !SERVICES.contains(&d.as_str()) {
                return Err(StackError::config("disabled", format!("unknown service {d:?}")));
            }
        }
        let mut seen: BTreeMap<u16, &str> = BTreeMap::new();
        for s in SERVICES {
            let port = self.ports.get(s).expect("known service");
            if port == 0 {
                continue;
            }
            if let Some(other) = seen.insert(port, s) {
                return Err(StackError::PortInUse {
                    service: s.to_string(),
                    port,
                    reason: format!("also assigned to {other}"),
                });
            }
        }
        for f in &self.feeds {
            if !self.graphs.contains_key(&f.graph) {
                return Err(StackError::config("feeds", format!("unknown graph {:?}", f.graph)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceHealth {
    pub name: String,
    pub url: String,
    pub ready: bool,
}

/// A running stack. Handles are exposed for in-process inspection.
pub struct Stack {
    pub config: StackConfig,
    urls: BTreeMap<String, String>,
    pub clock: SharedClock,
    pub parking_broker: Broker,
    pub urban_broker: Broker,
    pub portal: Portal,
    pub access: Arc<AccessControl>,
    pub proxy: PepProxy,
    pub iot: IotAgent,
    pub flow: FlowService,
    pub cosmos: RequestService,
    pub relay: Relay,
    pub flow_token: Arc<dyn TokenSource>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
    http: reqwest::Client,
}

impl std::fmt::Debug for Stack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stack")
            .field("urls", &self.urls)
            .finish_non_exhaustive()
    }
}

fn health_route(name: &'static str) -> Router {
    Router::new().route(
        "/health",
        get(move || async move { Json(json!({ "service": name, "status": "ok" })) }),
    )
}

fn fresh_file(dir: &Path, name: &str) -> Result<PathBuf, StackError> {
    let p = dir.join(name);
    if p.exists() {
        std::fs::remove_file(&p).map_err(|e| StackError::config(&p, e))?;
    }
    Ok(p)
}

impl Stack {
    pub async fn start(config: StackConfig) -> Result<Stack, StackError> {
        config.validate()?;
        let policies =
            AccessControl::load_policies(&config.policies).map_err(|e| StackError::config(&config.policies, e))?;
        let clients =
            AccessControl::load_clients(&config.clients).map_err(|e| StackError::config(&config.clients, e))?;
        let models = match &config.models {
            Some(p) => ModelRegistry::load(p).map_err(|e| StackError::config(p, e))?,
            None => ModelRegistry::builtin(),
        };
        let mut specs = BTreeMap::new();
        for (name, path) in &config.graphs {
            let spec = GraphSpec::load(path).map_err(|e| StackError::config(path, e))?;
            specs.insert(name.clone(), spec);
        }
        for f in &config.feeds {
            if !specs[&f.graph].processors.iter().any(|p| p.name == f.processor) {
                return Err(StackError::config(
                    &config.graphs[&f.graph],
                    format!("feed targets missing processor {:?}", f.processor),
                ));
            }
        }

        // Bind everything first.
        let mut listeners = BTreeMap::new();
        let mut urls = BTreeMap::new();
        for s in SERVICES {
            let port = config.ports.get(s).expect("known service");
            let addr = format!("{}:{port}", config.host);
            let listener = TcpListener::bind(&addr).await.map_err(|e| StackError::PortInUse {
                service: s.to_string(),
                port,
                reason: e.to_string(),
            })?;
            let local = listener.local_addr().map_err(|e| StackError::Service(e.to_string()))?;
            urls.insert(s.to_string(), format!("http://{local}"));
            if config.is_enabled(s) {
                listeners.insert(s, listener);
            }
        }
        let url = |s: &str| urls[s].clone();

        let clock = system_clock();
        let access = Arc::new(AccessControl::new(
            Duration::from_secs(config.token_ttl_s),
            clock.clone(),
        ));
        for c in clients {
            access
                .register_client(c)
                .map_err(|e| StackError::config(&config.clients, e))?;
        }
        access.set_policies(policies);

        let broker_config = BrokerConfig {
            clock: clock.clone(),
            ..BrokerConfig::default()
        };
        let notifier = Arc::new(HttpNotifier::new());
        let parking = Broker::with_config(notifier.clone(), broker_config.clone());
        for (client, types) in &config.client_scopes {
            parking.restrict_client(client.clone(), types.iter().cloned());
        }
        let urban = Broker::with_config(notifier, broker_config);

        let portal = Portal::new(clock.clone()).with_authorizer(access.clone());
        portal.set_public_base(url(ODP));
        let proxy = PepProxy::new(access.clone(), url(PARKING_BROKER));
        let iot = IotAgent::with_clock(Arc::new(urban.clone()), clock.clone());

        let (history, dead_letter, oplog) = match &config.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| StackError::config(dir, e))?;
                let h =
                    HistoryStore::open(fresh_file(dir, "history.jsonl")?).map_err(|e| StackError::config(dir, e))?;
                let d = DeadLetter::to_file(fresh_file(dir, "dead-letter.jsonl")?);
                (h, d, Some(fresh_file(dir, "requests.jsonl")?))
            }
            None => (HistoryStore::in_memory(), DeadLetter::in_memory(), None),
        };
        let history = Arc::new(history);
        let dead_letter = Arc::new(dead_letter);

        let token_url = format!("{}/oauth/token", url(ACCESS_CONTROL));
        let flow_token: Arc<dyn TokenSource> = Arc::new(ClientCredentialsSource::new(
            token_url,
            config.flow_client.client_id.clone(),
            config.flow_client.client_secret.clone(),
        ));
        let parking_via_pep: Arc<dyn ContextBroker> =
            Arc::new(HttpBrokerClient::new(url(ACCESS_CONTROL)).with_token(flow_token.clone()));
        let env = FlowEnv::new(clock.clone())
            .with_portal(Arc::new(HttpPortalClient::new(url(ODP)).with_token(flow_token.clone())))
            .with_broker("parking", parking_via_pep.clone())
            .with_broker("urban", Arc::new(HttpBrokerClient::new(url(URBAN_BROKER))))
            .with_history(history.clone())
            .with_dead_letter(dead_letter.clone())
            .with_models(Arc::new(models))
            .with_var("parking_broker", url(ACCESS_CONTROL))
            .with_var("urban_broker", url(URBAN_BROKER))
            .with_var("odp", url(ODP));
        let mut graphs: BTreeMap<String, GraphHandle> = BTreeMap::new();
        for (name, spec) in &specs {
            let handle = run_graph(spec, &env).map_err(|e| StackError::config(&config.graphs[name], e))?;
            graphs.insert(name.clone(), handle);
        }
        let flow = FlowService {
            graphs: Arc::new(graphs),
            history,
            dead_letter,
            clock: clock.clone(),
        };

        let mut processor = RequestProcessor::new(
            Arc::new(urban.clone()),
            clock.clone(),
            Duration::from_secs(config.request_max_age_s),
        );
        if let Some(p) = oplog {
            processor = processor.with_log_file(p);
        }
        let cosmos = RequestService::spawn(Arc::new(processor));
        let relay = Relay::new(Arc::new(urban.clone()), config.app_dir.clone());

        let mut routers: BTreeMap<&str, Router> = BTreeMap::new();
        routers.insert(PARKING_BROKER, crate::broker::http::router(parking.clone()));
        routers.insert(
            URBAN_BROKER,
            crate::broker::http::router(urban.clone())
                .merge(relay.router())
                .merge(crate::iot_agent::http::command_router(iot.clone())),
        );
        routers.insert(ODP, crate::odp::http::router(portal.clone()));
        routers.insert(
            ACCESS_CONTROL,
            crate::access::http::router(access.clone()).merge(proxy.clone().router()),
        );
        routers.insert(IOT_AGENT, crate::iot_agent::http::router(iot.clone()));
        routers.insert(
            FLOW_ENGINE,
            crate::flow::http::router(flow.clone()).merge(cosmos.router()),
        );

        let (shutdown, rx) = watch::channel(false);
        let mut tasks = Vec::new();
        for (name, listener) in listeners {
            let app = health_route(name).merge(routers.remove(name).expect("router per service"));
            let mut rx = rx.clone();
            tasks.push(tokio::spawn(async move {
                let stop = async move {
                    let _ = rx.wait_for(|v| *v).await;
                };
                if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(stop).await {
                    tracing::error!(service = name, error = %e, "server stopped");
                }
            }));
        }

        let stack = Stack {
            config,
            urls,
            clock,
            parking_broker: parking,
            urban_broker: urban,
            portal,
            access,
            proxy,
            iot,
            flow,
            cosmos,
            relay,
            flow_token,
            shutdown,
            tasks,
            http: reqwest::Client::builder()
                .timeout(Duration::from_secs(5))
                .build()
                .expect("reqwest client"),
        };
        if let Err(e) = stack.wire(parking_via_pep).await {
            stack.shutdown().await;
            return Err(e);
        }
        Ok(stack)
    }

    async fn wire(&self, parking_via_pep: Arc<dyn ContextBroker>) -> Result<(), StackError> {
        let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
        loop {
            if self
                .health()
                .await
                .iter()
                .all(|h| h.ready || !self.config.is_enabled(&h.name))
            {
                break;
            }
            if tokio::time::Instant::now() > deadline {
                return Err(StackError::Service("services did not become ready".into()));
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }

        let flow_url = self.url(FLOW_ENGINE);
        for f in &self.config.feeds {
            let endpoint = format!("{flow_url}/flow/{}/ingress/{}", f.graph, f.processor);
            let req = SubscriptionRequest::new(f.entity_type.clone(), endpoint).watching(f.watched.clone());
            let result = match f.broker {
                BrokerSide::Parking => {
                    if !self.config.is_enabled(ACCESS_CONTROL) || !self.config.is_enabled(PARKING_BROKER) {
                        tracing::warn!(graph = %f.graph, "parking feed skipped: its services are disabled");
                        continue;
                    }
                    parking_via_pep.create_subscription(&req).await
                }
                BrokerSide::Urban => self.urban_broker.create_subscription(req),
            };
            result.map_err(|e| {
                StackError::Service(format!("subscribing {} for graph {}: {e}", f.entity_type, f.graph))
            })?;
        }
        self.urban_broker
            .create_subscription(SubscriptionRequest::new(
                REQUEST_TYPE,
                format!("{flow_url}/cosmos/notify"),
            ))
            .map_err(|e| StackError::Service(e.to_string()))?;
        for req in Relay::subscriptions(&format!("{}/relay/notify", self.url(URBAN_BROKER))) {
            self.urban_broker
                .create_subscription(req)
                .map_err(|e| StackError::Service(e.to_string()))?;
        }
        Ok(())
    }

    /// Base URL of a service. The PEP lives on `access-control`.
    pub fn url(&self, service: &str) -> String {
        self.urls.get(service).cloned().unwrap_or_default()
    }

    pub fn urls(&self) -> &BTreeMap<String, String> {
        &self.urls
    }

    /// Probes `/health` of every service over HTTP.
    pub async fn health(&self) -> Vec<ServiceHealth> {
        let mut out = Vec::new();
        for s in SERVICES {
            let url = self.url(s);
            let ready = match self.http.get(format!("{url}/health")).send().await {
                Ok(r) => r.status().is_success(),
                Err(_) => false,
            };
            out.push(ServiceHealth {
                name: s.to_string(),
                url,
                ready,
            });
        }
        out
    }

    /// Waits until no notification, flow record or parking request is in
    /// flight anywhere in the stack.
    pub async fn quiesce(&self, timeout: Duration) -> Result<(), StackError> {
        let settle = async {
            loop {
                self.parking_broker.wait_delivered().await;
                self.flow.wait_idle().await;
                self.cosmos.wait_idle().await;
                self.urban_broker.wait_delivered().await;
                self.flow.wait_idle().await;
                let busy = self.parking_broker.pending_deliveries()
                    + self.urban_broker.pending_deliveries()
                    + self.cosmos.pending()
                    + self.flow.graphs.values().map(GraphHandle::in_flight).sum::<usize>();
                if busy == 0 {
                    return;
                }
            }
        };
        tokio::time::timeout(timeout, settle)
            .await
            .map_err(|_| StackError::Service(format!("stack did not settle within {timeout:?}")))
    }

    /// Stops every server and graph.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        for g in self.flow.graphs.values() {
            g.shutdown().await;
        }
        for t in self.tasks {
            let _ = t.await;
        }
    }
}
