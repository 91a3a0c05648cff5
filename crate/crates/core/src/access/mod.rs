//! Token issuance (client-credentials) and verb/path authorization.
//!
//! Tokens are opaque random strings looked up server-side. Authorization is
//! default-deny: a request is allowed only when the token is live and some
//! policy for one of the client's roles matches both verb and path.

pub mod http;
pub mod proxy;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::{Mutex, RwLock};
use rand::distr::Alphanumeric;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::time::{system_clock, SharedClock, Timestamp};

/// Header the proxy adds to forwarded requests, naming the caller.
pub const AUTHENTICATED_CLIENT_HEADER: &str = "x-authenticated-client";

pub const DEFAULT_TOKEN_TTL: Duration = Duration::from_secs(3600);
const TOKEN_LEN: usize = 40;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AccessError {
    #[error("invalid client credentials")]
    InvalidCredentials,
    #[error("client {0} already registered")]
    DuplicateClient(String),
    #[error("token endpoint error: {0}")]
    TokenEndpoint(String),
    #[error("config error in {path}: {reason}")]
    Config { path: String, reason: String },
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClientCredential {
    pub client_id: String,
    #[serde(skip_serializing)]
    pub client_secret: String,
    pub roles: BTreeSet<String>,
}

impl fmt::Debug for ClientCredential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientCredential")
            .field("client_id", &self.client_id)
            .field("client_secret", &"***")
            .field("roles", &self.roles)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verb {
    GET,
    POST,
    PATCH,
    DELETE,
}

impl FromStr for Verb {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "GET" => Ok(Verb::GET),
            "POST" => Ok(Verb::POST),
            "PATCH" => Ok(Verb::PATCH),
            "DELETE" => Ok(Verb::DELETE),
            other => Err(format!("unsupported verb {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Policy {
    pub role: String,
    pub verb: Verb,
    pub path_pattern: String,
}

impl Policy {
    pub fn allow(role: impl Into<String>, verb: Verb, path_pattern: impl Into<String>) -> Self {
        Policy {
            role: role.into(),
            verb,
            path_pattern: path_pattern.into(),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Serialize)]
pub struct Token {
    pub value: String,
    pub client_id: String,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
}

impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Token")
            .field("client_id", &self.client_id)
            .field("issued_at", &self.issued_at)
            .field("expires_at", &self.expires_at)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    NoToken,
    Expired,
    NoPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Allow { client_id: String },
    Deny(DenyReason),
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Decision::Allow { .. })
    }
}

pub struct AccessControl {
    clients: RwLock<HashMap<String, ClientCredential>>,
    policies: RwLock<Arc<Vec<Policy>>>,
    tokens: RwLock<HashMap<String, Token>>,
    ttl: Duration,
    clock: SharedClock,
}

impl fmt::Debug for AccessControl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AccessControl")
            .field("clients", &self.clients.read().len())
            .field("policies", &self.policies.read().len())
            .field("ttl", &self.ttl)
            .finish()
    }
}

impl Default for AccessControl {
    fn default() -> Self {
        Self::new(DEFAULT_TOKEN_TTL, system_clock())
    }
}

impl AccessControl {
    pub fn new(ttl: Duration, clock: SharedClock) -> Self {
        AccessControl {
            clients: RwLock::new(HashMap::new()),
            policies: RwLock::new(Arc::new(Vec::new())),
            tokens: RwLock::new(HashMap::new()),
            ttl,
            clock,
        }
    }

    pub fn register_client(&self, c: ClientCredential) -> Result<(), AccessError> {
        let mut clients = self.clients.write();
        if clients.contains_key(&c.client_id) {
            return Err(AccessError::DuplicateClient(c.client_id));
        }
        clients.insert(c.client_id.clone(), c);
        Ok(())
    }

    /// Replaces the whole policy table atomically.
    pub fn set_policies(&self, policies: Vec<Policy>) {
        *self.policies.write() = Arc::new(policies);
    }

    pub fn add_policy(&self, p: Policy) {
        let mut table = self.policies.write();
        let mut next = (**table).clone();
        next.push(p);
        *table = Arc::new(next);
    }

    pub fn policies(&self) -> Vec<Policy> {
        (**self.policies.read()).clone()
    }

    pub fn issue_token(&self, client_id: &str, client_secret: &str) -> Result<Token, AccessError> {
        let clients = self.clients.read();
        let c = clients.get(client_id).ok_or(AccessError::InvalidCredentials)?;
        if !constant_time_eq(c.client_secret.as_bytes(), client_secret.as_bytes()) {
            return Err(AccessError::InvalidCredentials);
        }
        let issued_at = self.clock.now();
        let value: String = rand::rng()
            .sample_iter(Alphanumeric)
            .take(TOKEN_LEN)
            .map(char::from)
            .collect();
        let token = Token {
            value: value.clone(),
            client_id: client_id.to_string(),
            issued_at,
            expires_at: issued_at.plus(self.ttl.max(Duration::from_millis(1))),
        };
        self.tokens.write().insert(value, token.clone());
        Ok(token)
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    /// `path` may carry a query string; only the path part is matched.
    pub fn authorize(&self, token_value: &str, verb: Verb, path: &str) -> Decision {
        let client_id = {
            let tokens = self.tokens.read();
            let Some(tok) = tokens.get(token_value) else {
                return Decision::Deny(DenyReason::NoToken);
            };
            if self.clock.now() >= tok.expires_at {
                return Decision::Deny(DenyReason::Expired);
            }
            tok.client_id.clone()
        };
        let roles = match self.clients.read().get(&client_id) {
            Some(c) => c.roles.clone(),
            None => return Decision::Deny(DenyReason::NoToken),
        };
        let path = path.split_once('?').map_or(path, |(p, _)| p);
        let policies = self.policies.read().clone();
        let allowed = policies
            .iter()
            .any(|p| p.verb == verb && roles.contains(&p.role) && path_matches(&p.path_pattern, path));
        if allowed {
            Decision::Allow { client_id }
        } else {
            Decision::Deny(DenyReason::NoPolicy)
        }
    }

    pub fn purge_expired(&self) {
        let now = self.clock.now();
        self.tokens.write().retain(|_, t| t.expires_at > now);
    }

    pub fn load_policies(path: &Path) -> Result<Vec<Policy>, AccessError> {
        read_json(path)
    }

    pub fn load_clients(path: &Path) -> Result<Vec<ClientCredential>, AccessError> {
        read_json(path)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AccessError> {
    let err = |reason: String| AccessError::Config {
        path: path.display().to_string(),
        reason,
    };
    let raw = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&raw).map_err(|e| err(e.to_string()))
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Segment-wise match where `*` stands for any run of characters inside one
/// segment. A final pattern segment ending in `*` also absorbs any deeper
/// segments, so `/ngsi-ld/v1/entities*` covers `/ngsi-ld/v1/entities/<id>`.
pub fn path_matches(pattern: &str, path: &str) -> bool {
    let pat: Vec<&str> = pattern.split('/').collect();
    let segs: Vec<&str> = path.split('/').collect();
    let Some((last, init)) = pat.split_last() else {
        return false;
    };
    if segs.len() < pat.len() {
        return false;
    }
    if !init.iter().zip(&segs).all(|(p, s)| glob(p, s)) {
        return false;
    }
    if last.ends_with('*') {
        glob(last, segs[init.len()])
    } else {
        segs.len() == pat.len() && glob(last, segs[init.len()])
    }
}

fn glob(pattern: &str, s: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == s;
    }
    let (first, rest) = parts.split_first().expect("split yields at least one part");
    let Some(mut remaining) = s.strip_prefix(first) else {
        return false;
    };
    let (last, middle) = rest.split_last().expect("pattern contains '*'");
    for m in middle {
        match remaining.find(m) {
            Some(i) => remaining = &remaining[i + m.len()..],
            None => return false,
        }
    }
    remaining.len() >= last.len() && remaining.ends_with(last)
}

/// Supplies bearer tokens to outbound clients.
#[async_trait]
pub trait TokenSource: Send + Sync {
    async fn token(&self) -> Result<String, AccessError>;
}

#[derive(Debug, Clone)]
pub struct StaticToken(pub String);

#[async_trait]
impl TokenSource for StaticToken {
    async fn token(&self) -> Result<String, AccessError> {
        Ok(self.0.clone())
    }
}

/// Obtains tokens from an access-control service's `/oauth/token`
/// endpoint and caches them until shortly before expiry.
pub struct ClientCredentialsSource {
    token_url: String,
    client_id: String,
    client_secret: String,
    http: reqwest::Client,
    cached: Mutex<Option<(String, std::time::Instant)>>,
}

impl fmt::Debug for ClientCredentialsSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientCredentialsSource")
            .field("token_url", &self.token_url)
            .field("client_id", &self.client_id)
            .finish_non_exhaustive()
    }
}

impl ClientCredentialsSource {
    pub fn new(token_url: impl Into<String>, client_id: impl Into<String>, client_secret: impl Into<String>) -> Self {
        ClientCredentialsSource {
            token_url: token_url.into(),
            client_id: client_id.into(),
            client_secret: client_secret.into(),
            http: reqwest::Client::new(),
            cached: Mutex::new(None),
        }
    }
}

#[derive(Deserialize)]
struct TokenResponse {
    access_token: String,
    expires_in: u64,
}

#[async_trait]
impl TokenSource for ClientCredentialsSource {
    async fn token(&self) -> Result<String, AccessError> {
        if let Some((tok, valid_until)) = &*self.cached.lock() {
            if std::time::Instant::now() < *valid_until {
                return Ok(tok.clone());
            }
        }
        let resp = self
            .http
            .post(&self.token_url)
            .form(&[
                ("grant_type", "client_credentials"),
                ("client_id", self.client_id.as_str()),
                ("client_secret", self.client_secret.as_str()),
            ])
            .send()
            .await
            .map_err(|e| AccessError::TokenEndpoint(e.to_string()))?;
        if resp.status() == reqwest::StatusCode::UNAUTHORIZED {
            return Err(AccessError::InvalidCredentials);
        }
        if !resp.status().is_success() {
            return Err(AccessError::TokenEndpoint(resp.status().to_string()));
        }
        let body: TokenResponse = resp
            .json()
            .await
            .map_err(|e| AccessError::TokenEndpoint(e.to_string()))?;
        let margin = (body.expires_in / 10).max(1);
        let valid_until = std::time::Instant::now() + Duration::from_secs(body.expires_in.saturating_sub(margin));
        *self.cached.lock() = Some((body.access_token.clone(), valid_until));
        Ok(body.access_token)
    }
}
