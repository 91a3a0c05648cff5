//! NGSI-LD HTTP binding.
//!
//! Requests carrying the authenticated-client header (set by the PEP proxy)
//! are confined to the entity types bound to that client.

use std::collections::{BTreeSet, HashMap};

use axum::body::Bytes;
use axum::extract::{Path, Query as QueryParams, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use super::{Broker, BrokerError, Query, SubscriptionRequest};
use crate::access::AUTHENTICATED_CLIENT_HEADER;
use crate::entity::{Entity, EntityId, Patch, Representation};

pub fn router(broker: Broker) -> Router {
    Router::new()
        .route("/ngsi-ld/v1/entities", post(create_entity).get(query_entities))
        .route("/ngsi-ld/v1/entities/{id}", get(get_entity).delete(delete_entity))
        .route("/ngsi-ld/v1/entities/{id}/attrs", patch(update_attributes))
        .route(
            "/ngsi-ld/v1/subscriptions",
            post(create_subscription).get(list_subscriptions),
        )
        .route("/ngsi-ld/v1/subscriptions/{id}", get(get_subscription))
        .with_state(broker)
}

struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "type": format!("https://uri.etsi.org/ngsi-ld/errors/{}", self.1),
            "title": self.1,
            "detail": self.2,
        });
        (
            self.0,
            [(header::CONTENT_TYPE, "application/problem+json")],
            body.to_string(),
        )
            .into_response()
    }
}

impl From<BrokerError> for ApiError {
    fn from(e: BrokerError) -> Self {
        let detail = e.to_string();
        match e {
            BrokerError::AlreadyExists(_) => ApiError(StatusCode::CONFLICT, "AlreadyExists", detail),
            BrokerError::NotFound(_) => ApiError(StatusCode::NOT_FOUND, "ResourceNotFound", detail),
            BrokerError::InvalidEntity(_) | BrokerError::InvalidSubscription(_) => {
                ApiError(StatusCode::BAD_REQUEST, "BadRequestData", detail)
            }
            BrokerError::InvalidQuery(_) => ApiError(StatusCode::BAD_REQUEST, "InvalidRequest", detail),
            BrokerError::Unauthorized(_) => ApiError(StatusCode::UNAUTHORIZED, "Unauthorized", detail),
            BrokerError::Forbidden(_) => ApiError(StatusCode::FORBIDDEN, "Forbidden", detail),
            BrokerError::Unavailable(_) => ApiError(StatusCode::SERVICE_UNAVAILABLE, "InternalError", detail),
        }
    }
}

fn bad_request(detail: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, "BadRequestData", detail.into())
}

fn parse_body(body: &Bytes) -> Result<Value, ApiError> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("body is not JSON: {e}")))
}

fn parse_id(raw: &str) -> Result<EntityId, ApiError> {
    EntityId::parse(raw).map_err(|e| bad_request(e.to_string()))
}

/// Allowed entity types for the calling client, if it is restricted.
fn scope(broker: &Broker, headers: &HeaderMap) -> Option<BTreeSet<String>> {
    let client = headers.get(AUTHENTICATED_CLIENT_HEADER)?.to_str().ok()?;
    broker.allowed_types(client)
}

fn check_type(scope: &Option<BTreeSet<String>>, entity_type: &str) -> Result<(), ApiError> {
    match scope {
        Some(allowed) if !allowed.contains(entity_type) => {
            Err(BrokerError::Forbidden(format!("client may not access entities of type {entity_type}")).into())
        }
        _ => Ok(()),
    }
}

async fn create_entity(State(b): State<Broker>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let e = Entity::from_json(&parse_body(&body)?).map_err(BrokerError::from)?;
    check_type(&scope(&b, &headers), e.entity_type())?;
    let id = b.create_entity(e)?;
    Ok((
        StatusCode::CREATED,
        [(header::LOCATION, format!("/ngsi-ld/v1/entities/{id}"))],
    )
        .into_response())
}

async fn update_attributes(
    State(b): State<Broker>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<StatusCode, ApiError> {
    let id = parse_id(&id)?;
    let scope = scope(&b, &headers);
    if scope.is_some() {
        check_type(&scope, b.get_entity(&id)?.entity_type())?;
    }
    let patch = Patch::from_json(&parse_body(&body)?).map_err(BrokerError::from)?;
    b.update_attributes(&id, patch)?;
    Ok(StatusCode::NO_CONTENT)
}

fn representation(params: &HashMap<String, String>) -> Result<Representation, ApiError> {
    match params.get("options") {
        None => Ok(Representation::Normalized),
        Some(o) => o.parse().map_err(bad_request),
    }
}

async fn get_entity(
    State(b): State<Broker>,
    Path(id): Path<String>,
    QueryParams(params): QueryParams<HashMap<String, String>>,
    headers: HeaderMap,
) -> Result<Json<Value>, ApiError> {
    let id = parse_id(&id)?;
    let rep = representation(&params)?;
    let e = b.get_entity(&id)?;
    check_type(&scope(&b, &headers), e.entity_type())?;
    Ok(Json(e.render(rep)))
}

async fn delete_entity(
    State(b): State<Broker>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<StatusCode, ApiError> {
    let id = parse_id(&id)?;
    let scope = scope(&b, &headers);
    if scope.is_some() {
        check_type(&scope, b.get_entity(&id)?.entity_type())?;
    }
    b.delete_entity(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn query_entities(
    State(b): State<Broker>,
    QueryParams(params): QueryParams<HashMap<String, String>>,
    headers: HeaderMap,
) -> Result<Json<Value>, ApiError> {
    let rep = representation(&params)?;
    let mut q = Query {
        entity_type: params.get("type").cloned(),
        ..Default::default()
    };
    if let Some(raw) = params.get("q") {
        q.predicates = Query::parse_q(raw).map_err(BrokerError::from)?;
    }
    if let Some(georel) = params.get("georel") {
        q.near = Some(
            Query::parse_geo(
                georel,
                params.get("geometry").map(String::as_str),
                params.get("coordinates").map(String::as_str),
            )
            .map_err(BrokerError::from)?,
        );
    }
    let scope = scope(&b, &headers);
    if let Some(t) = &q.entity_type {
        check_type(&scope, t)?;
    }
    let hits = b
        .query_entities(&q)
        .into_iter()
        .filter(|e| scope.as_ref().is_none_or(|s| s.contains(e.entity_type())))
        .map(|e| e.render(rep))
        .collect();
    Ok(Json(Value::Array(hits)))
}

async fn create_subscription(State(b): State<Broker>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let req = SubscriptionRequest::from_json(&parse_body(&body)?).map_err(bad_request)?;
    check_type(&scope(&b, &headers), &req.entity_type)?;
    let id = b.create_subscription(req)?;
    Ok((
        StatusCode::CREATED,
        [(header::LOCATION, format!("/ngsi-ld/v1/subscriptions/{id}"))],
    )
        .into_response())
}

async fn list_subscriptions(State(b): State<Broker>) -> Json<Value> {
    Json(json!(b.subscriptions()))
}

async fn get_subscription(State(b): State<Broker>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    b.subscription(&id)
        .map(|s| Json(json!(s)))
        .ok_or_else(|| BrokerError::NotFound(id).into())
}
