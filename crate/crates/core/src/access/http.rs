//! `POST /oauth/token` (client-credentials grant).

use std::sync::Arc;

use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Form, Json, Router};
use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use super::AccessControl;

pub fn router(ac: Arc<AccessControl>) -> Router {
    Router::new().route("/oauth/token", post(token)).with_state(ac)
}

#[derive(Debug, Deserialize)]
struct TokenForm {
    grant_type: String,
    client_id: Option<String>,
    client_secret: Option<String>,
}

fn oauth_error(status: StatusCode, code: &str) -> Response {
    (status, Json(json!({ "error": code }))).into_response()
}

fn basic_credentials(headers: &HeaderMap) -> Option<(String, String)> {
    let raw = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let encoded = raw.strip_prefix("Basic ")?;
    let decoded = base64::engine::general_purpose::STANDARD.decode(encoded).ok()?;
    let text = String::from_utf8(decoded).ok()?;
    let (id, secret) = text.split_once(':')?;
    Some((id.to_string(), secret.to_string()))
}

async fn token(State(ac): State<Arc<AccessControl>>, headers: HeaderMap, Form(form): Form<TokenForm>) -> Response {
    if form.grant_type != "client_credentials" {
        return oauth_error(StatusCode::BAD_REQUEST, "unsupported_grant_type");
    }
    let creds = match (form.client_id, form.client_secret) {
        (Some(id), Some(secret)) => Some((id, secret)),
        _ => basic_credentials(&headers),
    };
    let Some((id, secret)) = creds else {
        return oauth_error(StatusCode::BAD_REQUEST, "invalid_request");
    };
    match ac.issue_token(&id, &secret) {
        Ok(t) => Json(json!({
            "access_token": t.value,
            "token_type": "Bearer",
            "expires_in": ac.ttl().as_secs().max(1),
        }))
        .into_response(),
        Err(_) => oauth_error(StatusCode::UNAUTHORIZED, "invalid_client"),
    }
}
