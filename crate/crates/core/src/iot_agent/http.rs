//! `/iot/*` HTTP binding of the gateway.

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{DeviceRegistration, IotAgent, IotError};
use crate::broker::BrokerError;
use crate::entity::EntityId;

pub fn router(agent: IotAgent) -> Router {
    Router::new()
        .route("/iot/ingest", post(ingest))
        .route("/iot/devices", post(register).get(list_devices))
        .with_state(agent.clone())
        .merge(command_router(agent))
}

/// Only the command endpoints, for mounting next to a UI.
pub fn command_router(agent: IotAgent) -> Router {
    Router::new()
        .route("/iot/commands", post(send_command).get(command_log))
        .with_state(agent)
}

fn kind(e: &IotError) -> (StatusCode, &'static str) {
    match e {
        IotError::UnknownDevice(_) => (StatusCode::NOT_FOUND, "UnknownDevice"),
        IotError::MalformedPayload(_) => (StatusCode::BAD_REQUEST, "MalformedPayload"),
        IotError::UnmappedKey { .. } => (StatusCode::BAD_REQUEST, "UnmappedKey"),
        IotError::DuplicateDevice(_) => (StatusCode::CONFLICT, "DuplicateDevice"),
        IotError::InvalidRegistration(_) => (StatusCode::BAD_REQUEST, "InvalidRegistration"),
        IotError::UnknownEntity(_) => (StatusCode::NOT_FOUND, "UnknownEntity"),
        IotError::UnknownCommand { .. } => (StatusCode::NOT_FOUND, "UnknownCommand"),
        IotError::Broker(_) | IotError::Unavailable(_) => (StatusCode::BAD_GATEWAY, "BrokerUnavailable"),
    }
}

struct ApiError(IotError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, k) = kind(&self.0);
        let mut body = json!({ "error": k, "detail": self.0.to_string() });
        match &self.0 {
            IotError::UnmappedKey { device, key } => {
                body["device"] = json!(device);
                body["key"] = json!(key);
            }
            IotError::UnknownCommand { entity, command } => {
                body["entity"] = json!(entity);
                body["command"] = json!(command);
            }
            IotError::UnknownDevice(s)
            | IotError::MalformedPayload(s)
            | IotError::DuplicateDevice(s)
            | IotError::InvalidRegistration(s)
            | IotError::UnknownEntity(s)
            | IotError::Unavailable(s) => body["subject"] = json!(s),
            IotError::Broker(b) => body["subject"] = json!(b.to_string()),
        }
        (status, Json(body)).into_response()
    }
}

/// Rebuilds an error from a response body produced by this module.
pub(crate) fn decode_error(v: &Value) -> Option<IotError> {
    let s = |k: &str| v[k].as_str().unwrap_or_default().to_string();
    Some(match v["error"].as_str()? {
        "UnknownDevice" => IotError::UnknownDevice(s("subject")),
        "MalformedPayload" => IotError::MalformedPayload(s("subject")),
        "UnmappedKey" => IotError::UnmappedKey {
            device: s("device"),
            key: s("key"),
        },
        "DuplicateDevice" => IotError::DuplicateDevice(s("subject")),
        "InvalidRegistration" => IotError::InvalidRegistration(s("subject")),
        "UnknownEntity" => IotError::UnknownEntity(s("subject")),
        "UnknownCommand" => IotError::UnknownCommand {
            entity: s("entity"),
            command: s("command"),
        },
        _ => IotError::Broker(BrokerError::Unavailable(s("subject"))),
    })
}

async fn ingest(State(a): State<IotAgent>, body: String) -> Result<Json<Value>, ApiError> {
    let touched = a.ingest(&body).await.map_err(ApiError)?;
    Ok(Json(json!({ "touched": touched })))
}

async fn register(State(a): State<IotAgent>, body: axum::body::Bytes) -> Result<Response, ApiError> {
    let reg: DeviceRegistration =
        serde_json::from_slice(&body).map_err(|e| ApiError(IotError::InvalidRegistration(e.to_string())))?;
    a.register_device(reg).map_err(ApiError)?;
    Ok(StatusCode::CREATED.into_response())
}

async fn list_devices(State(a): State<IotAgent>) -> Json<Vec<DeviceRegistration>> {
    Json(a.devices())
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CommandBody {
    entity_id: String,
    command: String,
}

async fn send_command(State(a): State<IotAgent>, body: axum::body::Bytes) -> Result<Json<Value>, ApiError> {
    let req: CommandBody =
        serde_json::from_slice(&body).map_err(|e| ApiError(IotError::MalformedPayload(e.to_string())))?;
    let id = EntityId::parse(&req.entity_id).map_err(|_| ApiError(IotError::UnknownEntity(req.entity_id.clone())))?;
    let rec = a.issue_command(&id, &req.command).map_err(ApiError)?;
    Ok(Json(json!({ "payload": rec.payload, "issuedAt": rec.issued_at })))
}

async fn command_log(State(a): State<IotAgent>) -> Response {
    let mut out = String::new();
    for c in a.commands() {
        out.push_str(&serde_json::to_string(&c).expect("command record serializes"));
        out.push('\n');
    }
    ([(header::CONTENT_TYPE, "application/x-ndjson")], out).into_response()
}
