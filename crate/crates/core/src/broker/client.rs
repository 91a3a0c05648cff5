use std::collections::BTreeSet;
use std::sync::Arc;

use async_trait::async_trait;
use reqwest::StatusCode;
use serde_json::Value;

use super::{Broker, BrokerError, Query, SubscriptionRequest};
use crate::access::TokenSource;
use crate::entity::{Entity, EntityId, Patch};

/// The broker operations other components depend on, reachable either
/// in-process or over HTTP.
#[async_trait]
pub trait ContextBroker: Send + Sync {
    async fn create_entity(&self, e: &Entity) -> Result<EntityId, BrokerError>;
    async fn update_attributes(&self, id: &EntityId, patch: &Patch) -> Result<BTreeSet<String>, BrokerError>;
    async fn get_entity(&self, id: &EntityId) -> Result<Entity, BrokerError>;
    async fn query_entities(&self, q: &Query) -> Result<Vec<Entity>, BrokerError>;
    async fn delete_entity(&self, id: &EntityId) -> Result<(), BrokerError>;
    async fn create_subscription(&self, s: &SubscriptionRequest) -> Result<String, BrokerError>;
}

#[async_trait]
impl ContextBroker for Broker {
    async fn create_entity(&self, e: &Entity) -> Result<EntityId, BrokerError> {
        Broker::create_entity(self, e.clone())
    }

    async fn update_attributes(&self, id: &EntityId, patch: &Patch) -> Result<BTreeSet<String>, BrokerError> {
        Broker::update_attributes(self, id, patch.clone())
    }

    async fn get_entity(&self, id: &EntityId) -> Result<Entity, BrokerError> {
        Broker::get_entity(self, id)
    }

    async fn query_entities(&self, q: &Query) -> Result<Vec<Entity>, BrokerError> {
        Ok(Broker::query_entities(self, q))
    }

    async fn delete_entity(&self, id: &EntityId) -> Result<(), BrokerError> {
        Broker::delete_entity(self, id)
    }

    async fn create_subscription(&self, s: &SubscriptionRequest) -> Result<String, BrokerError> {
        Broker::create_subscription(self, s.clone())
    }
}

/// NGSI-LD HTTP client, optionally presenting a bearer token (for use
/// through the PEP proxy).
#[derive(Clone)]
pub struct HttpBrokerClient {
    base: String,
    http: reqwest::Client,
    token: Option<Arc<dyn TokenSource>>,
}

impl std::fmt::Debug for HttpBrokerClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBrokerClient").field("base", &self.base).finish()
    }
}

impl HttpBrokerClient {
    pub fn new(base: impl Into<String>) -> Self {
        HttpBrokerClient {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
            token: None,
        }
    }

    pub fn with_token(mut self, token: Arc<dyn TokenSource>) -> Self {
        self.token = Some(token);
        self
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub fn entity_url(&self, id: &EntityId) -> String {
        format!("{}/ngsi-ld/v1/entities/{}", self.base, id)
    }

    async fn send(&self, req: reqwest::RequestBuilder) -> Result<reqwest::Response, BrokerError> {
        let req = match &self.token {
            Some(t) => {
                let tok = t.token().await.map_err(|e| BrokerError::Unauthorized(e.to_string()))?;
                req.bearer_auth(tok)
            }
            None => req,
        };
        let resp = req.send().await.map_err(|e| BrokerError::Unavailable(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let detail = resp
            .json::<Value>()
            .await
            .ok()
            .and_then(|v| v["detail"].as_str().map(str::to_string))
            .unwrap_or_else(|| status.to_string());
        Err(match status {
            StatusCode::NOT_FOUND => BrokerError::NotFound(detail),
            StatusCode::CONFLICT => BrokerError::AlreadyExists(detail),
            StatusCode::UNAUTHORIZED => BrokerError::Unauthorized(detail),
            StatusCode::FORBIDDEN => BrokerError::Forbidden(detail),
            StatusCode::BAD_REQUEST => BrokerError::InvalidEntity(detail),
            _ => BrokerError::Unavailable(detail),
        })
    }

    async fn json(resp: reqwest::Response) -> Result<Value, BrokerError> {
        resp.json().await.map_err(|e| BrokerError::Unavailable(e.to_string()))
    }
}

#[async_trait]
impl ContextBroker for HttpBrokerClient {
    async fn create_entity(&self, e: &Entity) -> Result<EntityId, BrokerError> {
        let url = format!("{}/ngsi-ld/v1/entities", self.base);
        self.send(self.http.post(url).json(&e.normalized())).await?;
        Ok(e.id().clone())
    }

    async fn update_attributes(&self, id: &EntityId, patch: &Patch) -> Result<BTreeSet<String>, BrokerError> {
        let url = format!("{}/attrs", self.entity_url(id));
        self.send(self.http.patch(url).json(&patch.to_json())).await?;
        Ok(patch.attributes.keys().cloned().collect())
    }

    async fn get_entity(&self, id: &EntityId) -> Result<Entity, BrokerError> {
        let url = format!("{}?options=normalized", self.entity_url(id));
        let v = Self::json(self.send(self.http.get(url)).await?).await?;
        Entity::from_json(&v).map_err(|e| BrokerError::Unavailable(format!("malformed entity from broker: {e}")))
    }

    async fn query_entities(&self, q: &Query) -> Result<Vec<Entity>, BrokerError> {
        let url = format!("{}/ngsi-ld/v1/entities", self.base);
        let mut params = q.to_params();
        params.push(("options".into(), "normalized".into()));
        let resp = self
            .send(self.http.get(url).query(&params))
            .await
            .map_err(|e| match e {
                BrokerError::InvalidEntity(d) => BrokerError::InvalidQuery(d),
                other => other,
            })?;
        let v = Self::json(resp).await?;
        v.as_array()
            .ok_or_else(|| BrokerError::Unavailable("query response is not an array".into()))?
            .iter()
            .map(|e| Entity::from_json(e).map_err(|e| BrokerError::Unavailable(e.to_string())))
            .collect()
    }

    async fn delete_entity(&self, id: &EntityId) -> Result<(), BrokerError> {
        self.send(self.http.delete(self.entity_url(id))).await?;
        Ok(())
    }

    async fn create_subscription(&self, s: &SubscriptionRequest) -> Result<String, BrokerError> {
        let url = format!("{}/ngsi-ld/v1/subscriptions", self.base);
        let resp = self
            .send(self.http.post(url).json(&s.to_json()))
            .await
            .map_err(|e| match e {
                BrokerError::InvalidEntity(d) => BrokerError::InvalidSubscription(d),
                other => other,
            })?;
        let location = resp
            .headers()
            .get(reqwest::header::LOCATION)
            .and_then(|h| h.to_str().ok())
            .ok_or_else(|| BrokerError::Unavailable("subscription response lacks Location".into()))?;
        Ok(location.rsplit('/').next().unwrap_or_default().to_string())
    }
}
