//! Server-sent event relay: turns broker notifications into a browser
//! friendly stream, serves a full city snapshot for (re)synchronisation and
//! hosts the static client bundle under `/app`.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;
use tower_http::services::ServeDir;

use super::{OFFSTREET_TYPE, RESPONSE_TYPE, SPOT_TYPE};
use crate::broker::{ContextBroker, Notification, Query, SubscriptionRequest};
use crate::geo::GeoPoint;
use crate::time::Timestamp;

pub const EVENT_KIND: &str = "entity_change";
const CHANNEL_CAPACITY: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotView {
    pub id: String,
    pub position: Option<GeoPoint>,
    pub status: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ParkingView {
    pub id: String,
    pub position: Option<GeoPoint>,
    pub available_spot_number: Option<f64>,
    pub total_spot_number: Option<f64>,
}

/// Everything the map client needs to draw the district from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CityView {
    pub spots: Vec<SpotView>,
    pub parkings: Vec<ParkingView>,
    /// Simplified `ResponseParking` entities.
    pub responses: Vec<Value>,
    pub last_event_at: Option<Timestamp>,
}

struct Inner {
    broker: Arc<dyn ContextBroker>,
    tx: broadcast::Sender<Value>,
    last_event_at: Mutex<Option<Timestamp>>,
    app_dir: Option<PathBuf>,
}

#[derive(Clone)]
pub struct Relay {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Relay {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Relay")
            .field("listeners", &self.inner.tx.receiver_count())
            .finish()
    }
}

impl Relay {
    pub fn new(broker: Arc<dyn ContextBroker>, app_dir: Option<PathBuf>) -> Self {
        let (tx, _) = broadcast::channel(CHANNEL_CAPACITY);
        Relay {
            inner: Arc::new(Inner {
                broker,
                tx,
                last_event_at: Mutex::new(None),
                app_dir,
            }),
        }
    }

    /// Subscriptions the broker needs so that changes reach `notify_url`.
    pub fn subscriptions(notify_url: &str) -> Vec<SubscriptionRequest> {
        [SPOT_TYPE, OFFSTREET_TYPE, RESPONSE_TYPE]
            .into_iter()
            .map(|t| SubscriptionRequest::new(t, notify_url))
            .collect()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Value> {
        self.inner.tx.subscribe()
    }

    /// Fans a notification out to every connected stream.
    pub fn publish(&self, n: &Notification) {
        *self.inner.last_event_at.lock() = Some(n.fired_at);
        for e in &n.entities {
            // No listeners is fine.
            let _ = self
                .inner
                .tx
                .send(json!({ "kind": EVENT_KIND, "entity": e.simplified() }));
        }
    }

    pub async fn snapshot(&self) -> Result<CityView, crate::broker::BrokerError> {
        let b = &self.inner.broker;
        let spots = b
            .query_entities(&Query::by_type(SPOT_TYPE))
            .await?
            .into_iter()
            .map(|e| SpotView {
                id: e.id().to_string(),
                position: e.location(),
                status: e.attribute("status").and_then(|a| a.as_str()).map(str::to_string),
            })
            .collect();
        let parkings = b
            .query_entities(&Query::by_type(OFFSTREET_TYPE))
            .await?
            .into_iter()
            .map(|e| ParkingView {
                id: e.id().to_string(),
                position: e.location(),
                available_spot_number: e.attribute("availableSpotNumber").and_then(|a| a.as_f64()),
                total_spot_number: e.attribute("totalSpotNumber").and_then(|a| a.as_f64()),
            })
            .collect();
        let responses = b
            .query_entities(&Query::by_type(RESPONSE_TYPE))
            .await?
            .iter()
            .map(|e| e.simplified())
            .collect();
        Ok(CityView {
            spots,
            parkings,
            responses,
            last_event_at: *self.inner.last_event_at.lock(),
        })
    }

    /// `POST /relay/notify`, `GET /relay/events`, `GET /relay/snapshot` and
    /// the static bundle under `/app`.
    pub fn router(&self) -> Router {
        let api = Router::new()
            .route("/relay/notify", post(notify))
            .route("/relay/events", get(events))
            .route("/relay/snapshot", get(snapshot))
            .with_state(self.clone());
        match &self.inner.app_dir {
            Some(dir) if dir.is_dir() => {
                api.nest_service("/app", ServeDir::new(dir).append_index_html_on_directories(true))
            }
            _ => api.route("/app", get(placeholder)).route("/app/", get(placeholder)),
        }
    }
}

fn event_stream(rx: broadcast::Receiver<Value>) -> impl Stream<Item = Result<Event, std::convert::Infallible>> {
    futures::stream::unfold(rx, |mut rx| async move {
        let ev = match rx.recv().await {
            Ok(v) => Event::default().event(EVENT_KIND).data(v.to_string()),
            // The client missed events; tell it to refetch the snapshot.
            Err(broadcast::error::RecvError::Lagged(n)) => Event::default()
                .event("resync")
                .data(json!({ "kind": "resync", "missed": n }).to_string()),
            Err(broadcast::error::RecvError::Closed) => return None,
        };
        Some((Ok(ev), rx))
    })
}

async fn notify(State(r): State<Relay>, body: Bytes) -> StatusCode {
    let Ok(v) = serde_json::from_slice::<Value>(&body) else {
        return StatusCode::BAD_REQUEST;
    };
    match Notification::from_wire(&v) {
        Ok(n) => {
            r.publish(&n);
            StatusCode::NO_CONTENT
        }
        Err(_) => StatusCode::BAD_REQUEST,
    }
}

async fn events(State(r): State<Relay>) -> Sse<impl Stream<Item = Result<Event, std::convert::Infallible>>> {
    Sse::new(event_stream(r.subscribe())).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
}

async fn snapshot(State(r): State<Relay>) -> Response {
    match r.snapshot().await {
        Ok(v) => Json(v).into_response(),
        Err(e) => (StatusCode::BAD_GATEWAY, e.to_string()).into_response(),
    }
}

async fn placeholder() -> Html<&'static str> {
    Html("<!doctype html><title>twinlod</title><p>No client bundle installed.</p>")
}
