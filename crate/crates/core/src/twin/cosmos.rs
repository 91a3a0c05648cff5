//! Request processor of the urban twin: answers each `RequestParking` with
//! a `ResponseParking` pointing at the nearest available parking.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc;

use super::{is_available, nearest_available, Target, TwinError, OFFSTREET_TYPE, SPOT_TYPE};
use crate::broker::{ContextBroker, Notification, Query};
use crate::entity::{Attribute, Entity, EntityId, CORE_CONTEXT};
use crate::flow::upsert;
use crate::idle::InFlight;
use crate::time::{SharedClock, Timestamp};

pub const REQUEST_TYPE: &str = "RequestParking";
pub const RESPONSE_TYPE: &str = "ResponseParking";
pub const RESULT_FOUND: &str = "found";
pub const RESULT_NONE: &str = "none_available";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub request: EntityId,
    pub response: EntityId,
    pub target: Option<Target>,
    pub stale: bool,
    pub decided_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub id: EntityId,
    pub available: bool,
    pub distance_m: f64,
}

/// What the processor saw and decided for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpLogEntry {
    pub request: EntityId,
    pub position: crate::geo::GeoPoint,
    pub candidates: Vec<CandidateView>,
    pub decision: Decision,
}

pub struct RequestProcessor {
    broker: Arc<dyn ContextBroker>,
    clock: SharedClock,
    max_age_ms: AtomicU64,
    log: Mutex<Vec<OpLogEntry>>,
    log_path: Option<PathBuf>,
}

impl std::fmt::Debug for RequestProcessor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RequestProcessor")
            .field("max_age", &self.max_age())
            .field("decisions", &self.log.lock().len())
            .finish()
    }
}

fn response_id(request: &EntityId) -> EntityId {
    EntityId::new(RESPONSE_TYPE, request.suffix()).expect("suffix of a valid id")
}

impl RequestProcessor {
    pub fn new(broker: Arc<dyn ContextBroker>, clock: SharedClock, max_age: Duration) -> Self {
        RequestProcessor {
            broker,
            clock,
            max_age_ms: AtomicU64::new(max_age.as_millis() as u64),
            log: Mutex::new(Vec::new()),
            log_path: None,
        }
    }

    /// Also append every log entry as a JSON line to `path`.
    pub fn with_log_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.log_path = Some(path.into());
        self
    }

    pub fn max_age(&self) -> Duration {
        Duration::from_millis(self.max_age_ms.load(Ordering::Relaxed))
    }

    pub fn set_max_age(&self, d: Duration) {
        self.max_age_ms.store(d.as_millis() as u64, Ordering::Relaxed);
    }

    pub fn op_log(&self) -> Vec<OpLogEntry> {
        self.log.lock().clone()
    }

    fn is_stale(&self, e: &Entity, now: Timestamp) -> bool {
        if e.entity_type() != OFFSTREET_TYPE {
            return false;
        }
        let newest = e.attributes().values().filter_map(Attribute::observed_at).max();
        newest.is_some_and(|t| now.as_millis() > t.as_millis() && now.since(t) > self.max_age())
    }

    /// Decides one request against the current broker state and writes the
    /// response entity.
    pub async fn handle(&self, request: &Entity) -> Result<Decision, TwinError> {
        if request.entity_type() != REQUEST_TYPE {
            return Err(TwinError::InvalidRequest(format!(
                "{} is not a {REQUEST_TYPE}",
                request.id()
            )));
        }
        let position = request
            .location()
            .ok_or_else(|| TwinError::InvalidRequest(format!("{} has no location", request.id())))?;
        let mut candidates = self.broker.query_entities(&Query::by_type(OFFSTREET_TYPE)).await?;
        candidates.extend(self.broker.query_entities(&Query::by_type(SPOT_TYPE)).await?);
        candidates.retain(|c| c.location().is_some());

        let now = self.clock.now();
        let target = match nearest_available(position, &candidates) {
            Ok(t) => Some(t),
            Err(TwinError::NoneAvailable) => None,
            Err(e) => return Err(e),
        };
        let stale = candidates.iter().any(|c| self.is_stale(c, now));
        let decision = Decision {
            request: request.id().clone(),
            response: response_id(request.id()),
            target,
            stale,
            decided_at: now,
        };

        let mut resp = Entity::new(decision.response.clone(), RESPONSE_TYPE)
            .and_then(|e| e.with_attribute("refRequest", Attribute::relationship(decision.request.clone())))
            .and_then(|e| {
                e.with_attribute(
                    "result",
                    Attribute::property(if decision.target.is_some() {
                        RESULT_FOUND
                    } else {
                        RESULT_NONE
                    }),
                )
            })
            .and_then(|e| e.with_attribute("stale", Attribute::property(stale)))
            .and_then(|e| e.with_attribute("decidedAt", Attribute::property(json!(now))))
            .map(|e| e.with_context(CORE_CONTEXT))
            .map_err(|e| TwinError::InvalidRequest(e.to_string()))?;
        if let Some(t) = &decision.target {
            resp.set("refTarget", Attribute::relationship(t.id.clone()))
                .and_then(|_| resp.set("location", Attribute::geo(t.position)))
                .and_then(|_| resp.set("distance", Attribute::property(t.distance_m)))
                .map_err(|e| TwinError::InvalidRequest(e.to_string()))?;
        }
        upsert(self.broker.as_ref(), &resp).await?;

        let entry = OpLogEntry {
            request: decision.request.clone(),
            position,
            candidates: candidates
                .iter()
                .map(|c| CandidateView {
                    id: c.id().clone(),
                    available: is_available(c).unwrap_or(false),
                    distance_m: position.distance_m(&c.location().expect("filtered above")),
                })
                .collect(),
            decision: decision.clone(),
        };
        if let Some(path) = &self.log_path {
            use std::io::Write;
            let line = serde_json::to_string(&entry).expect("op log entry serializes");
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| writeln!(f, "{line}"))
                .map_err(|e| TwinError::Io(format!("{}: {e}", path.display())))?;
        }
        self.log.lock().push(entry);
        Ok(decision)
    }
}

struct ServiceInner {
    processor: Arc<RequestProcessor>,
    handled: Mutex<BTreeSet<EntityId>>,
    queue: mpsc::UnboundedSender<Entity>,
    in_flight: InFlight,
    decisions: Mutex<Vec<Decision>>,
    errors: Mutex<Vec<String>>,
}

/// Hands each request id to the processor exactly once, in arrival order.
#[derive(Clone)]
pub struct RequestService {
    inner: Arc<ServiceInner>,
}

impl std::fmt::Debug for RequestService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RequestService")
            .field("handled", &self.inner.handled.lock().len())
            .finish()
    }
}

impl RequestService {
    /// Spawns the worker; needs a Tokio runtime.
    pub fn spawn(processor: Arc<RequestProcessor>) -> Self {
        let (tx, mut rx) = mpsc::unbounded_channel::<Entity>();
        let inner = Arc::new(ServiceInner {
            processor,
            handled: Mutex::new(BTreeSet::new()),
            queue: tx,
            in_flight: InFlight::new(),
            decisions: Mutex::new(Vec::new()),
            errors: Mutex::new(Vec::new()),
        });
        let weak = Arc::downgrade(&inner);
        tokio::spawn(async move {
            while let Some(req) = rx.recv().await {
                let Some(inner) = weak.upgrade() else { break };
                match inner.processor.handle(&req).await {
                    Ok(d) => inner.decisions.lock().push(d),
                    Err(e) => {
                        tracing::warn!(request = %req.id(), error = %e, "request failed");
                        inner.errors.lock().push(format!("{}: {e}", req.id()));
                    }
                }
                inner.in_flight.end();
            }
        });
        RequestService { inner }
    }

    pub fn processor(&self) -> &Arc<RequestProcessor> {
        &self.inner.processor
    }

    /// Queues a request unless its id was already seen. Returns whether it
    /// was queued.
    pub fn submit(&self, request: Entity) -> bool {
        if request.entity_type() != REQUEST_TYPE || !self.inner.handled.lock().insert(request.id().clone()) {
            return false;
        }
        self.inner.in_flight.begin();
        if self.inner.queue.send(request).is_err() {
            self.inner.in_flight.end();
            return false;
        }
        true
    }

    pub fn pending(&self) -> usize {
        self.inner.in_flight.count()
    }

    pub async fn wait_idle(&self) {
        self.inner.in_flight.wait_idle().await
    }

    pub fn decisions(&self) -> Vec<Decision> {
        self.inner.decisions.lock().clone()
    }

    pub fn errors(&self) -> Vec<String> {
        self.inner.errors.lock().clone()
    }

    /// `POST /cosmos/notify` takes broker notifications;
    /// `GET /cosmos/decisions` lists what was decided.
    pub fn router(&self) -> Router {
        Router::new()
            .route("/cosmos/notify", post(notify))
            .route("/cosmos/decisions", get(decisions))
            .with_state(self.clone())
    }
}

async fn notify(State(svc): State<RequestService>, body: Bytes) -> Result<(StatusCode, Json<Value>), StatusCode> {
    let v: Value = serde_json::from_slice(&body).map_err(|_| StatusCode::BAD_REQUEST)?;
    let n = Notification::from_wire(&v).map_err(|_| StatusCode::BAD_REQUEST)?;
    let queued = n.entities.into_iter().filter(|e| svc.submit(e.clone())).count();
    Ok((StatusCode::ACCEPTED, Json(json!({ "queued": queued }))))
}

async fn decisions(State(svc): State<RequestService>) -> Json<Vec<Decision>> {
    Json(svc.decisions())
}
