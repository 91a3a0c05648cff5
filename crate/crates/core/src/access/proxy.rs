//! Policy enforcement point: a reverse proxy that admits a request only when
//! its bearer token is authorized for the verb and path.
//!
//! Denied requests never reach the upstream: missing, unknown, or expired
//! tokens yield 401, a live token without a matching policy yields 403.
//! Allowed requests are forwarded with their body untouched and with the
//! authenticated-client header set to the caller's client id.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde_json::json;

use super::{AccessControl, Decision, DenyReason, Verb, AUTHENTICATED_CLIENT_HEADER};

const MAX_BODY: usize = 16 * 1024 * 1024;

const HOP_BY_HOP: [&str; 8] = [
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

#[derive(Clone)]
pub struct PepProxy {
    access: Arc<AccessControl>,
    upstream: String,
    http: reqwest::Client,
    forwarded: Arc<AtomicU64>,
}

impl std::fmt::Debug for PepProxy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PepProxy")
            .field("upstream", &self.upstream)
            .field("forwarded", &self.forwarded_count())
            .finish()
    }
}

impl PepProxy {
    pub fn new(access: Arc<AccessControl>, upstream: impl Into<String>) -> Self {
        PepProxy {
            access,
            upstream: upstream.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
            forwarded: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Number of requests that reached the upstream.
    pub fn forwarded_count(&self) -> u64 {
        self.forwarded.load(Ordering::SeqCst)
    }

    pub fn router(self) -> Router {
        Router::new().fallback(enforce).with_state(self)
    }
}

fn deny(status: StatusCode, reason: &str) -> Response {
    let mut resp = (status, axum::Json(json!({ "error": reason }))).into_response();
    if status == StatusCode::UNAUTHORIZED {
        resp.headers_mut()
            .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
    }
    resp
}

async fn enforce(State(proxy): State<PepProxy>, req: Request) -> Response {
    let path_and_query = req
        .uri()
        .path_and_query()
        .map(|p| p.as_str().to_string())
        .unwrap_or_else(|| req.uri().path().to_string());
    let Ok(verb) = req.method().as_str().parse::<Verb>() else {
        return deny(StatusCode::FORBIDDEN, "no_policy");
    };
    let token = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|h| h.to_str().ok())
        .and_then(|h| h.strip_prefix("Bearer "))
        .map(str::trim)
        .unwrap_or_default()
        .to_string();
    if token.is_empty() {
        return deny(StatusCode::UNAUTHORIZED, "no_token");
    }
    let client_id = match proxy.access.authorize(&token, verb, req.uri().path()) {
        Decision::Allow { client_id } => client_id,
        Decision::Deny(DenyReason::NoToken) => return deny(StatusCode::UNAUTHORIZED, "no_token"),
        Decision::Deny(DenyReason::Expired) => return deny(StatusCode::UNAUTHORIZED, "expired"),
        Decision::Deny(DenyReason::NoPolicy) => return deny(StatusCode::FORBIDDEN, "no_policy"),
    };

    let method = req.method().clone();
    let mut headers = req.headers().clone();
    let body = match to_bytes(req.into_body(), MAX_BODY).await {
        Ok(b) => b,
        Err(_) => return deny(StatusCode::PAYLOAD_TOO_LARGE, "body_too_large"),
    };
    for h in HOP_BY_HOP {
        headers.remove(h);
    }
    headers.remove(header::HOST);
    headers.remove(header::CONTENT_LENGTH);
    headers.remove(AUTHENTICATED_CLIENT_HEADER);
    let Ok(client_header) = HeaderValue::from_str(&client_id) else {
        return deny(StatusCode::FORBIDDEN, "no_policy");
    };
    headers.insert(HeaderName::from_static(AUTHENTICATED_CLIENT_HEADER), client_header);

    let url = format!("{}{}", proxy.upstream, path_and_query);
    proxy.forwarded.fetch_add(1, Ordering::SeqCst);
    let upstream = proxy.http.request(method, url).headers(headers).body(body).send().await;
    let upstream = match upstream {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(error = %e, upstream = %proxy.upstream, "upstream unavailable");
            return deny(StatusCode::BAD_GATEWAY, "upstream_unavailable");
        }
    };
    let status = upstream.status();
    let mut resp_headers = upstream.headers().clone();
    for h in HOP_BY_HOP {
        resp_headers.remove(h);
    }
    resp_headers.remove(header::CONTENT_LENGTH);
    let bytes = match upstream.bytes().await {
        Ok(b) => b,
        Err(_) => return deny(StatusCode::BAD_GATEWAY, "upstream_unavailable"),
    };
    let mut resp = Response::new(Body::from(bytes));
    *resp.status_mut() = status;
    *resp.headers_mut() = resp_headers;
    resp
}
