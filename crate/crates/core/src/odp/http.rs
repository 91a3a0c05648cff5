//! CKAN action-API subset plus DCAT and row-dump endpoints.
//!
//! Responses use the CKAN envelope `{"success", "result" | "error"}`.
//! Write actions require a bearer token when the portal has an authorizer;
//! reads are public.

use std::collections::HashMap;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{CatalogMetadata, NewDataset, NewResource, Portal, PortalError, SearchFilters};
use crate::access::{Decision, DenyReason, Verb};

pub fn router(portal: Portal) -> Router {
    Router::new()
        .route("/api/3/action/organization_create", post(organization_create))
        .route("/api/3/action/organization_list", get(organization_list))
        .route("/api/3/action/package_create", post(package_create))
        .route("/api/3/action/package_patch", post(package_patch))
        .route("/api/3/action/package_show", get(package_show))
        .route("/api/3/action/package_search", get(package_search))
        .route("/api/3/action/resource_create", post(resource_create))
        .route("/api/3/action/resource_append", post(resource_append))
        .route("/datasets/{name}", get(dataset_page))
        .route("/datasets/{name}/dcat.rdf", get(dcat))
        .route("/datasets/{name}/resources/{id}/rows", get(rows))
        .with_state(portal)
}

pub(crate) fn error_type(e: &PortalError) -> (StatusCode, &'static str) {
    match e {
        PortalError::Conflict(_) => (StatusCode::CONFLICT, "Conflict Error"),
        PortalError::InvalidName(_) => (StatusCode::CONFLICT, "Validation Error"),
        PortalError::UnknownOrganization(_) => (StatusCode::NOT_FOUND, "Organization Not Found Error"),
        PortalError::DatasetNotFound(_) => (StatusCode::NOT_FOUND, "Not Found Error"),
        PortalError::ResourceNotFound(_) => (StatusCode::NOT_FOUND, "Resource Not Found Error"),
        PortalError::MetadataOnlyResource(_) => (StatusCode::CONFLICT, "Metadata Only Error"),
        PortalError::Invalid(_) => (StatusCode::BAD_REQUEST, "Invalid Request Error"),
        PortalError::Unauthorized(_) => (StatusCode::FORBIDDEN, "Authorization Error"),
        PortalError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "Internal Error"),
    }
}

fn error_subject(e: &PortalError) -> &str {
    match e {
        PortalError::Conflict(s)
        | PortalError::InvalidName(s)
        | PortalError::UnknownOrganization(s)
        | PortalError::DatasetNotFound(s)
        | PortalError::ResourceNotFound(s)
        | PortalError::MetadataOnlyResource(s)
        | PortalError::Invalid(s)
        | PortalError::Unauthorized(s)
        | PortalError::Unavailable(s) => s,
    }
}

struct ApiError(StatusCode, PortalError);

impl From<PortalError> for ApiError {
    fn from(e: PortalError) -> Self {
        ApiError(error_type(&e).0, e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (_, kind) = error_type(&self.1);
        let body = json!({
            "success": false,
            "error": { "__type": kind, "message": self.1.to_string(), "name": error_subject(&self.1) },
        });
        (self.0, Json(body)).into_response()
    }
}

fn ok(result: impl serde::Serialize) -> Json<Value> {
    Json(json!({ "success": true, "result": result }))
}

fn check_write(portal: &Portal, headers: &HeaderMap, path: &str) -> Result<(), ApiError> {
    let Some(ac) = portal.authorizer() else {
        return Ok(());
    };
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|h| h.to_str().ok())
        .and_then(|h| h.strip_prefix("Bearer "))
        .unwrap_or_default();
    match ac.authorize(token, Verb::POST, path) {
        Decision::Allow { .. } => Ok(()),
        Decision::Deny(reason @ (DenyReason::NoToken | DenyReason::Expired)) => Err(ApiError(
            StatusCode::UNAUTHORIZED,
            PortalError::Unauthorized(format!("{reason:?}")),
        )),
        Decision::Deny(DenyReason::NoPolicy) => Err(ApiError(
            StatusCode::FORBIDDEN,
            PortalError::Unauthorized("no_policy".into()),
        )),
    }
}

fn body<T: for<'de> Deserialize<'de>>(raw: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(raw).map_err(|e| PortalError::Invalid(e.to_string()).into())
}

#[derive(Deserialize)]
struct OrgCreate {
    name: String,
    #[serde(default)]
    title: Option<String>,
}

async fn organization_create(State(p): State<Portal>, headers: HeaderMap, raw: Bytes) -> Result<Json<Value>, ApiError> {
    check_write(&p, &headers, "/api/3/action/organization_create")?;
    let req: OrgCreate = body(&raw)?;
    let title = req.title.unwrap_or_else(|| req.name.clone());
    Ok(ok(p.organization_create(&req.name, &title)?))
}

async fn organization_list(State(p): State<Portal>) -> Json<Value> {
    ok(p.organization_list())
}

async fn package_create(State(p): State<Portal>, headers: HeaderMap, raw: Bytes) -> Result<Json<Value>, ApiError> {
    check_write(&p, &headers, "/api/3/action/package_create")?;
    let req: NewDataset = body(&raw)?;
    Ok(ok(p.package_create(req)?))
}

#[derive(Deserialize)]
struct PackagePatch {
    id: String,
    metadata: CatalogMetadata,
}

async fn package_patch(State(p): State<Portal>, headers: HeaderMap, raw: Bytes) -> Result<Json<Value>, ApiError> {
    check_write(&p, &headers, "/api/3/action/package_patch")?;
    let req: PackagePatch = body(&raw)?;
    Ok(ok(p.package_patch(&req.id, req.metadata)?))
}

async fn package_show(
    State(p): State<Portal>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<Value>, ApiError> {
    let id = q.get("id").ok_or_else(|| PortalError::Invalid("missing id".into()))?;
    Ok(ok(p.package_show(id)?))
}

/// Landing URL of a dataset: the same record as `package_show`.
async fn dataset_page(State(p): State<Portal>, Path(name): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(ok(p.package_show(&name)?))
}

async fn package_search(State(p): State<Portal>, Query(q): Query<HashMap<String, String>>) -> Json<Value> {
    let filters = SearchFilters {
        organization: q.get("organization").cloned(),
        keyword: q.get("keyword").cloned(),
    };
    let results = p.package_search(q.get("q").map(String::as_str).unwrap_or(""), &filters);
    ok(json!({ "count": results.len(), "results": results }))
}

#[derive(Deserialize)]
struct ResourceCreate {
    package_id: String,
    #[serde(flatten)]
    resource: NewResource,
}

async fn resource_create(State(p): State<Portal>, headers: HeaderMap, raw: Bytes) -> Result<Json<Value>, ApiError> {
    check_write(&p, &headers, "/api/3/action/resource_create")?;
    let req: ResourceCreate = body(&raw)?;
    Ok(ok(p.resource_create(&req.package_id, req.resource)?))
}

#[derive(Deserialize)]
struct ResourceAppend {
    package_id: String,
    resource_id: String,
    row: Value,
}

async fn resource_append(State(p): State<Portal>, headers: HeaderMap, raw: Bytes) -> Result<Json<Value>, ApiError> {
    check_write(&p, &headers, "/api/3/action/resource_append")?;
    let req: ResourceAppend = body(&raw)?;
    let n = p.resource_append(&req.package_id, &req.resource_id, req.row)?;
    Ok(ok(json!({ "row_count": n })))
}

async fn dcat(State(p): State<Portal>, Path(name): Path<String>) -> Result<Response, ApiError> {
    let xml = p.dcat_export(&name)?;
    Ok(([(header::CONTENT_TYPE, "application/rdf+xml")], xml).into_response())
}

async fn rows(State(p): State<Portal>, Path((name, id)): Path<(String, String)>) -> Result<Response, ApiError> {
    let rows = p.resource_rows(&name, &id)?;
    let mut out = String::new();
    for r in rows {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], out).into_response())
}
