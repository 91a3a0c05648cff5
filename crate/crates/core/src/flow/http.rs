//! `/flow/*` HTTP binding: notification ingress, counters, history.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{DeadLetter, FlowError, FlowRecord, GraphHandle, HistoryStore};
use crate::entity::EntityId;
use crate::time::SharedClock;

/// Named running graphs plus the stores they write to.
#[derive(Clone)]
pub struct FlowService {
    pub graphs: Arc<BTreeMap<String, GraphHandle>>,
    pub history: Arc<HistoryStore>,
    pub dead_letter: Arc<DeadLetter>,
    pub clock: SharedClock,
}

impl FlowService {
    pub fn graph(&self, name: &str) -> Option<&GraphHandle> {
        self.graphs.get(name)
    }

    /// Waits until every graph is idle.
    pub async fn wait_idle(&self) {
        // A graph can feed another through a broker, so loop until all are
        // idle at the same time.
        loop {
            for g in self.graphs.values() {
                g.wait_idle().await;
            }
            if self.graphs.values().all(|g| g.in_flight() == 0) {
                return;
            }
        }
    }
}

pub fn router(svc: FlowService) -> Router {
    Router::new()
        .route("/flow/{graph}/ingress/{processor}", post(ingress))
        .route("/flow/{graph}/counters", get(counters))
        .route("/flow/history", get(history))
        .route("/flow/dead-letter", get(dead_letter))
        .with_state(svc)
}

fn error(status: StatusCode, e: &FlowError) -> Response {
    (status, Json(json!({ "error": e.to_string() }))).into_response()
}

async fn ingress(
    State(svc): State<FlowService>,
    Path((graph, processor)): Path<(String, String)>,
    Json(body): Json<Value>,
) -> Response {
    let Some(g) = svc.graph(&graph) else {
        return error(
            StatusCode::NOT_FOUND,
            &FlowError::InvalidGraph(format!("unknown graph {graph}")),
        );
    };
    let rec = match FlowRecord::from_external(body, svc.clock.now()) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, &e),
    };
    match g.inject(&processor, rec).await {
        Ok(()) => (StatusCode::ACCEPTED, Json(json!({ "accepted": true }))).into_response(),
        Err(e @ FlowError::UnknownProcessor(_)) => error(StatusCode::NOT_FOUND, &e),
        Err(e) => error(StatusCode::SERVICE_UNAVAILABLE, &e),
    }
}

async fn counters(State(svc): State<FlowService>, Path(graph): Path<String>) -> Response {
    match svc.graph(&graph) {
        Some(g) => Json(json!({
            "counters": g.counters(),
            "reports": g.reports(),
            "in_flight": g.in_flight(),
        }))
        .into_response(),
        None => error(
            StatusCode::NOT_FOUND,
            &FlowError::InvalidGraph(format!("unknown graph {graph}")),
        ),
    }
}

#[derive(Deserialize)]
struct HistoryParams {
    #[serde(rename = "entityId")]
    entity_id: Option<String>,
}

async fn history(State(svc): State<FlowService>, Query(p): Query<HistoryParams>) -> Response {
    let rows = match p.entity_id {
        None => svc.history.all(),
        Some(raw) => match EntityId::parse(&raw) {
            Ok(id) => svc.history.for_entity(&id),
            Err(e) => return (StatusCode::BAD_REQUEST, Json(json!({ "error": e.to_string() }))).into_response(),
        },
    };
    Json(rows).into_response()
}

async fn dead_letter(State(svc): State<FlowService>) -> Json<Vec<Value>> {
    Json(svc.dead_letter.entries())
}
