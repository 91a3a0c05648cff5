use std::sync::Arc;

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use super::{
    CatalogMetadata, DatasetSummary, DatasetView, NewDataset, NewResource, Organization, Portal, PortalError,
    ResourceView, SearchFilters,
};
use crate::access::TokenSource;

/// Portal actions used by the dataflow processors, in-process or over HTTP.
#[async_trait]
pub trait PortalApi: Send + Sync {
    async fn organization_create(&self, name: &str, title: &str) -> Result<Organization, PortalError>;
    async fn package_create(&self, d: &NewDataset) -> Result<DatasetView, PortalError>;
    async fn package_show(&self, name: &str) -> Result<DatasetView, PortalError>;
    async fn package_patch(&self, name: &str, m: &CatalogMetadata) -> Result<DatasetView, PortalError>;
    async fn resource_create(&self, dataset: &str, r: &NewResource) -> Result<ResourceView, PortalError>;
    async fn resource_append(&self, dataset: &str, resource_id: &str, row: &Value) -> Result<usize, PortalError>;
    async fn package_search(&self, q: &str, f: &SearchFilters) -> Result<Vec<DatasetSummary>, PortalError>;
    async fn resource_rows(&self, dataset: &str, resource_id: &str) -> Result<Vec<Value>, PortalError>;
    async fn dcat_export(&self, name: &str) -> Result<String, PortalError>;
}

#[async_trait]
impl PortalApi for Portal {
    async fn organization_create(&self, name: &str, title: &str) -> Result<Organization, PortalError> {
        Portal::organization_create(self, name, title)
    }

    async fn package_create(&self, d: &NewDataset) -> Result<DatasetView, PortalError> {
        Portal::package_create(self, d.clone())
    }

    async fn package_show(&self, name: &str) -> Result<DatasetView, PortalError> {
        Portal::package_show(self, name)
    }

    async fn package_patch(&self, name: &str, m: &CatalogMetadata) -> Result<DatasetView, PortalError> {
        Portal::package_patch(self, name, m.clone())
    }

    async fn resource_create(&self, dataset: &str, r: &NewResource) -> Result<ResourceView, PortalError> {
        Portal::resource_create(self, dataset, r.clone())
    }

    async fn resource_append(&self, dataset: &str, resource_id: &str, row: &Value) -> Result<usize, PortalError> {
        Portal::resource_append(self, dataset, resource_id, row.clone())
    }

    async fn package_search(&self, q: &str, f: &SearchFilters) -> Result<Vec<DatasetSummary>, PortalError> {
        Ok(Portal::package_search(self, q, f))
    }

    async fn resource_rows(&self, dataset: &str, resource_id: &str) -> Result<Vec<Value>, PortalError> {
        Portal::resource_rows(self, dataset, resource_id)
    }

    async fn dcat_export(&self, name: &str) -> Result<String, PortalError> {
        Portal::dcat_export(self, name)
    }
}

/// CKAN action-API client.
#[derive(Clone)]
pub struct HttpPortalClient {
    base: String,
    http: reqwest::Client,
    token: Option<Arc<dyn TokenSource>>,
}

impl std::fmt::Debug for HttpPortalClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpPortalClient").field("base", &self.base).finish()
    }
}

fn decode_error(v: &Value, status: reqwest::StatusCode) -> PortalError {
    let err = &v["error"];
    let subject = err["name"].as_str().unwrap_or_default().to_string();
    match err["__type"].as_str().unwrap_or_default() {
        "Conflict Error" => PortalError::Conflict(subject),
        "Validation Error" => PortalError::InvalidName(subject),
        "Organization Not Found Error" => PortalError::UnknownOrganization(subject),
        "Not Found Error" => PortalError::DatasetNotFound(subject),
        "Resource Not Found Error" => PortalError::ResourceNotFound(subject),
        "Metadata Only Error" => PortalError::MetadataOnlyResource(subject),
        "Invalid Request Error" => PortalError::Invalid(subject),
        "Authorization Error" => PortalError::Unauthorized(subject),
        _ => PortalError::Unavailable(format!("portal returned {status}")),
    }
}

impl HttpPortalClient {
    pub fn new(base: impl Into<String>) -> Self {
        HttpPortalClient {
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

    async fn send(&self, req: reqwest::RequestBuilder) -> Result<reqwest::Response, PortalError> {
        let req = match &self.token {
            Some(t) => req.bearer_auth(t.token().await.map_err(|e| PortalError::Unauthorized(e.to_string()))?),
            None => req,
        };
        let resp = req.send().await.map_err(|e| PortalError::Unavailable(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let v = resp.json::<Value>().await.unwrap_or(Value::Null);
        Err(decode_error(&v, status))
    }

    async fn result<T: DeserializeOwned>(&self, req: reqwest::RequestBuilder) -> Result<T, PortalError> {
        let v: Value = self
            .send(req)
            .await?
            .json()
            .await
            .map_err(|e| PortalError::Unavailable(e.to_string()))?;
        if v["success"] != Value::Bool(true) {
            return Err(decode_error(&v, reqwest::StatusCode::OK));
        }
        serde_json::from_value(v["result"].clone())
            .map_err(|e| PortalError::Unavailable(format!("malformed portal response: {e}")))
    }

    fn action(&self, name: &str) -> String {
        format!("{}/api/3/action/{}", self.base, name)
    }

    fn dataset_url(&self, name: &str) -> String {
        let mut u = url::Url::parse(&self.base).expect("portal base is a valid URL");
        u.path_segments_mut()
            .expect("base URL")
            .pop_if_empty()
            .push("datasets")
            .push(name);
        u.to_string()
    }
}

#[async_trait]
impl PortalApi for HttpPortalClient {
    async fn organization_create(&self, name: &str, title: &str) -> Result<Organization, PortalError> {
        let body = json!({ "name": name, "title": title });
        self.result(self.http.post(self.action("organization_create")).json(&body))
            .await
    }

    async fn package_create(&self, d: &NewDataset) -> Result<DatasetView, PortalError> {
        self.result(self.http.post(self.action("package_create")).json(d)).await
    }

    async fn package_show(&self, name: &str) -> Result<DatasetView, PortalError> {
        self.result(self.http.get(self.action("package_show")).query(&[("id", name)]))
            .await
    }

    async fn package_patch(&self, name: &str, m: &CatalogMetadata) -> Result<DatasetView, PortalError> {
        let body = json!({ "id": name, "metadata": m });
        self.result(self.http.post(self.action("package_patch")).json(&body))
            .await
    }

    async fn resource_create(&self, dataset: &str, r: &NewResource) -> Result<ResourceView, PortalError> {
        let mut body = serde_json::to_value(r).map_err(|e| PortalError::Invalid(e.to_string()))?;
        body["package_id"] = json!(dataset);
        self.result(self.http.post(self.action("resource_create")).json(&body))
            .await
    }

    async fn resource_append(&self, dataset: &str, resource_id: &str, row: &Value) -> Result<usize, PortalError> {
        let body = json!({ "package_id": dataset, "resource_id": resource_id, "row": row });
        let v: Value = self
            .result(self.http.post(self.action("resource_append")).json(&body))
            .await?;
        Ok(v["row_count"].as_u64().unwrap_or_default() as usize)
    }

    async fn package_search(&self, q: &str, f: &SearchFilters) -> Result<Vec<DatasetSummary>, PortalError> {
        let mut params = vec![("q", q.to_string())];
        if let Some(o) = &f.organization {
            params.push(("organization", o.clone()));
        }
        if let Some(k) = &f.keyword {
            params.push(("keyword", k.clone()));
        }
        let v: Value = self
            .result(self.http.get(self.action("package_search")).query(&params))
            .await?;
        serde_json::from_value(v["results"].clone()).map_err(|e| PortalError::Unavailable(e.to_string()))
    }

    async fn resource_rows(&self, dataset: &str, resource_id: &str) -> Result<Vec<Value>, PortalError> {
        let url = format!("{}/resources/{}/rows", self.dataset_url(dataset), resource_id);
        let text = self
            .send(self.http.get(url))
            .await?
            .text()
            .await
            .map_err(|e| PortalError::Unavailable(e.to_string()))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| PortalError::Unavailable(e.to_string())))
            .collect()
    }

    async fn dcat_export(&self, name: &str) -> Result<String, PortalError> {
        let url = format!("{}/dcat.rdf", self.dataset_url(name));
        self.send(self.http.get(url))
            .await?
            .text()
            .await
            .map_err(|e| PortalError::Unavailable(e.to_string()))
    }
}
