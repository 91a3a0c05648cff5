//! CKAN-compatible open-data portal: organizations, datasets (packages),
//! resources with append-only rows, keyword search, and DCAT export.

mod client;
pub mod dcat;
pub mod http;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use client::{HttpPortalClient, PortalApi};

use crate::access::AccessControl;
use crate::time::{system_clock, SharedClock, Timestamp};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PortalError {
    #[error("name already in use: {0}")]
    Conflict(String),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("unknown organization {0}")]
    UnknownOrganization(String),
    #[error("dataset {0} not found")]
    DatasetNotFound(String),
    #[error("resource {0} not found")]
    ResourceNotFound(String),
    #[error("resource {0} is metadata-only and holds no rows")]
    MetadataOnlyResource(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("portal unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Organization {
    pub name: String,
    pub title: String,
    pub created_at: Timestamp,
}

/// DCAT-aligned catalog record of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogMetadata {
    pub dataset_title: String,
    #[serde(default)]
    pub description: String,
    pub issued: Timestamp,
    pub modified: Timestamp,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub distribution_titles: Vec<String>,
    /// Where the data can be read: a portal resource, or the broker entity
    /// for metadata-only datasets.
    #[serde(default)]
    pub access_url: Option<String>,
}

impl CatalogMetadata {
    pub fn minimal(title: impl Into<String>, at: Timestamp) -> Self {
        CatalogMetadata {
            dataset_title: title.into(),
            description: String::new(),
            issued: at,
            modified: at,
            keywords: Vec::new(),
            distribution_titles: Vec::new(),
            access_url: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ResourceContent {
    Rows(Vec<Value>),
    External(String),
}

#[derive(Debug, Clone, PartialEq)]
struct Resource {
    id: String,
    name: String,
    format: String,
    content: ResourceContent,
}

#[derive(Debug, Clone, PartialEq)]
struct Dataset {
    name: String,
    title: String,
    owner_org: String,
    metadata: CatalogMetadata,
    resources: Vec<Resource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewDataset {
    pub name: String,
    pub title: String,
    pub owner_org: String,
    #[serde(default)]
    pub metadata: Option<CatalogMetadata>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewResource {
    pub name: String,
    #[serde(default = "default_format")]
    pub format: String,
    /// Set for metadata-only resources whose data lives elsewhere.
    #[serde(default)]
    pub external_url: Option<String>,
}

fn default_format() -> String {
    "JSONL".into()
}

impl NewResource {
    pub fn rows(name: impl Into<String>) -> Self {
        NewResource {
            name: name.into(),
            format: default_format(),
            external_url: None,
        }
    }

    pub fn external(name: impl Into<String>, url: impl Into<String>) -> Self {
        NewResource {
            name: name.into(),
            format: "JSON-LD".into(),
            external_url: Some(url.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceView {
    pub id: String,
    pub name: String,
    pub format: String,
    /// Row-dump endpoint, or the external URL for metadata-only resources.
    pub url: String,
    pub metadata_only: bool,
    pub row_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetView {
    pub name: String,
    pub title: String,
    pub owner_org: String,
    pub metadata: CatalogMetadata,
    pub resources: Vec<ResourceView>,
}

impl DatasetView {
    pub fn resource_named(&self, name: &str) -> Option<&ResourceView> {
        self.resources.iter().find(|r| r.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub title: String,
    pub owner_org: String,
    pub keywords: Vec<String>,
    pub num_resources: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchFilters {
    pub organization: Option<String>,
    pub keyword: Option<String>,
}

fn valid_org_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 100
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
}

fn valid_dataset_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 200
        && !name
            .chars()
            .any(|c| c.is_whitespace() || c.is_control() || matches!(c, '/' | '?' | '#' | '%'))
}

struct State {
    organizations: BTreeMap<String, Organization>,
    datasets: BTreeMap<String, Dataset>,
}

/// In-memory portal. Reads see a consistent snapshot under a shared lock.
#[derive(Clone)]
pub struct Portal {
    state: Arc<RwLock<State>>,
    clock: SharedClock,
    resource_seq: Arc<AtomicU64>,
    public_base: Arc<RwLock<String>>,
    authorizer: Option<Arc<AccessControl>>,
}

impl std::fmt::Debug for Portal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.state.read();
        f.debug_struct("Portal")
            .field("organizations", &s.organizations.len())
            .field("datasets", &s.datasets.len())
            .finish()
    }
}

impl Default for Portal {
    fn default() -> Self {
        Self::new(system_clock())
    }
}

impl Portal {
    pub fn new(clock: SharedClock) -> Self {
        Portal {
            state: Arc::new(RwLock::new(State {
                organizations: BTreeMap::new(),
                datasets: BTreeMap::new(),
            })),
            clock,
            resource_seq: Arc::new(AtomicU64::new(0)),
            public_base: Arc::new(RwLock::new("http://localhost".into())),
            authorizer: None,
        }
    }

    /// HTTP writes will require a bearer token authorized by `ac`.
    pub fn with_authorizer(mut self, ac: Arc<AccessControl>) -> Self {
        self.authorizer = Some(ac);
        self
    }

    pub fn authorizer(&self) -> Option<&Arc<AccessControl>> {
        self.authorizer.as_ref()
    }

    /// Base URL used in row-dump links and DCAT identifiers.
    pub fn set_public_base(&self, base: impl Into<String>) {
        *self.public_base.write() = base.into().trim_end_matches('/').to_string();
    }

    pub fn public_base(&self) -> String {
        self.public_base.read().clone()
    }

    pub fn rows_url(&self, dataset: &str, resource_id: &str) -> String {
        format!(
            "{}/datasets/{}/resources/{}/rows",
            self.public_base(),
            dataset,
            resource_id
        )
    }

    pub fn organization_create(&self, name: &str, title: &str) -> Result<Organization, PortalError> {
        if !valid_org_name(name) {
            return Err(PortalError::InvalidName(name.to_string()));
        }
        let mut s = self.state.write();
        if s.organizations.contains_key(name) {
            return Err(PortalError::Conflict(name.to_string()));
        }
        let org = Organization {
            name: name.to_string(),
            title: title.to_string(),
            created_at: self.clock.now(),
        };
        s.organizations.insert(name.to_string(), org.clone());
        Ok(org)
    }

    pub fn organization_list(&self) -> Vec<Organization> {
        self.state.read().organizations.values().cloned().collect()
    }

    pub fn package_create(&self, d: NewDataset) -> Result<DatasetView, PortalError> {
        if !valid_dataset_name(&d.name) {
            return Err(PortalError::InvalidName(d.name));
        }
        if d.title.trim().is_empty() {
            return Err(PortalError::Invalid("dataset title must not be empty".into()));
        }
        let mut s = self.state.write();
        if !s.organizations.contains_key(&d.owner_org) {
            return Err(PortalError::UnknownOrganization(d.owner_org));
        }
        if s.datasets.contains_key(&d.name) {
            return Err(PortalError::Conflict(d.name));
        }
        let now = self.clock.now();
        let mut metadata = d
            .metadata
            .unwrap_or_else(|| CatalogMetadata::minimal(d.title.clone(), now));
        metadata.dataset_title = d.title.clone();
        if metadata.modified < metadata.issued {
            metadata.modified = metadata.issued;
        }
        let ds = Dataset {
            name: d.name.clone(),
            title: d.title,
            owner_org: d.owner_org,
            metadata,
            resources: Vec::new(),
        };
        let view = self.view(&ds);
        s.datasets.insert(d.name, ds);
        Ok(view)
    }

    /// Replaces the catalog record, keeping the original `issued` and never
    /// moving `modified` backwards.
    pub fn package_patch(&self, name: &str, mut m: CatalogMetadata) -> Result<DatasetView, PortalError> {
        let mut s = self.state.write();
        let ds = s
            .datasets
            .get_mut(name)
            .ok_or_else(|| PortalError::DatasetNotFound(name.to_string()))?;
        m.issued = ds.metadata.issued;
        m.modified = m.modified.max(ds.metadata.modified).max(m.issued);
        m.distribution_titles = ds.resources.iter().map(|r| r.name.clone()).collect();
        if m.dataset_title.trim().is_empty() {
            m.dataset_title = ds.title.clone();
        }
        ds.title = m.dataset_title.clone();
        ds.metadata = m;
        Ok(self.view(ds))
    }

    pub fn package_show(&self, name: &str) -> Result<DatasetView, PortalError> {
        let s = self.state.read();
        s.datasets
            .get(name)
            .map(|d| self.view(d))
            .ok_or_else(|| PortalError::DatasetNotFound(name.to_string()))
    }

    pub fn resource_create(&self, dataset: &str, r: NewResource) -> Result<ResourceView, PortalError> {
        if r.name.trim().is_empty() {
            return Err(PortalError::Invalid("resource name must not be empty".into()));
        }
        let mut s = self.state.write();
        let ds = s
            .datasets
            .get_mut(dataset)
            .ok_or_else(|| PortalError::DatasetNotFound(dataset.to_string()))?;
        let id = format!("res-{:06}", self.resource_seq.fetch_add(1, Ordering::SeqCst) + 1);
        let content = match r.external_url {
            Some(u) => ResourceContent::External(u),
            None => ResourceContent::Rows(Vec::new()),
        };
        let res = Resource {
            id,
            name: r.name,
            format: r.format,
            content,
        };
        ds.metadata.distribution_titles.push(res.name.clone());
        ds.metadata.modified = ds.metadata.modified.max(self.clock.now());
        let view = self.resource_view(&ds.name, &res);
        ds.resources.push(res);
        Ok(view)
    }

    /// Appends one row and returns the resource's new row count.
    pub fn resource_append(&self, dataset: &str, resource_id: &str, row: Value) -> Result<usize, PortalError> {
        let now = self.clock.now();
        let mut s = self.state.write();
        let ds = s
            .datasets
            .get_mut(dataset)
            .ok_or_else(|| PortalError::DatasetNotFound(dataset.to_string()))?;
        let res = ds
            .resources
            .iter_mut()
            .find(|r| r.id == resource_id)
            .ok_or_else(|| PortalError::ResourceNotFound(resource_id.to_string()))?;
        let ResourceContent::Rows(rows) = &mut res.content else {
            return Err(PortalError::MetadataOnlyResource(resource_id.to_string()));
        };
        rows.push(row);
        let n = rows.len();
        ds.metadata.modified = ds.metadata.modified.max(now);
        Ok(n)
    }

    pub fn resource_rows(&self, dataset: &str, resource_id: &str) -> Result<Vec<Value>, PortalError> {
        let s = self.state.read();
        let ds = s
            .datasets
            .get(dataset)
            .ok_or_else(|| PortalError::DatasetNotFound(dataset.to_string()))?;
        let res = ds
            .resources
            .iter()
            .find(|r| r.id == resource_id)
            .ok_or_else(|| PortalError::ResourceNotFound(resource_id.to_string()))?;
        match &res.content {
            ResourceContent::Rows(rows) => Ok(rows.clone()),
            ResourceContent::External(_) => Err(PortalError::MetadataOnlyResource(resource_id.to_string())),
        }
    }

    /// Case-insensitive substring search over name, title, description and
    /// keywords; an empty query matches every dataset. Ordered by name.
    pub fn package_search(&self, query: &str, filters: &SearchFilters) -> Vec<DatasetSummary> {
        let needle = query.trim().to_lowercase();
        let s = self.state.read();
        s.datasets
            .values()
            .filter(|d| filters.organization.as_ref().is_none_or(|o| &d.owner_org == o))
            .filter(|d| {
                filters
                    .keyword
                    .as_ref()
                    .is_none_or(|k| d.metadata.keywords.iter().any(|kw| kw.eq_ignore_ascii_case(k)))
            })
            .filter(|d| {
                needle.is_empty()
                    || d.name.to_lowercase().contains(&needle)
                    || d.title.to_lowercase().contains(&needle)
                    || d.metadata.description.to_lowercase().contains(&needle)
                    || d.metadata.keywords.iter().any(|k| k.to_lowercase().contains(&needle))
            })
            .map(|d| DatasetSummary {
                name: d.name.clone(),
                title: d.title.clone(),
                owner_org: d.owner_org.clone(),
                keywords: d.metadata.keywords.clone(),
                num_resources: d.resources.len(),
            })
            .collect()
    }

    pub fn dataset_count(&self) -> usize {
        self.state.read().datasets.len()
    }

    pub fn dcat_export(&self, name: &str) -> Result<String, PortalError> {
        let view = self.package_show(name)?;
        Ok(dcat::render(&view, &self.public_base()))
    }

    fn resource_view(&self, dataset: &str, r: &Resource) -> ResourceView {
        let (url, metadata_only, row_count) = match &r.content {
            ResourceContent::Rows(rows) => (self.rows_url(dataset, &r.id), false, rows.len()),
            ResourceContent::External(u) => (u.clone(), true, 0),
        };
        ResourceView {
            id: r.id.clone(),
            name: r.name.clone(),
            format: r.format.clone(),
            url,
            metadata_only,
            row_count,
        }
    }

    fn view(&self, d: &Dataset) -> DatasetView {
        DatasetView {
            name: d.name.clone(),
            title: d.title.clone(),
            owner_org: d.owner_org.clone(),
            metadata: d.metadata.clone(),
            resources: d.resources.iter().map(|r| self.resource_view(&d.name, r)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::{Clock, ManualClock};
    use serde_json::json;
    use std::time::Duration;

    const DS: &str = "urn:ngsi-ld:OffStreetParking:1";

    fn seeded() -> (Portal, Arc<ManualClock>) {
        let clock = ManualClock::new(Timestamp::from_millis(1_700_000_000_000));
        let p = Portal::new(clock.clone());
        p.organization_create("offstreetparking", "OffStreetParking").unwrap();
        p.package_create(NewDataset {
            name: DS.into(),
            title: "Parking 1".into(),
            owner_org: "offstreetparking".into(),
            metadata: None,
        })
        .unwrap();
        (p, clock)
    }

    #[test]
    fn organization_rules() {
        let p = Portal::default();
        p.organization_create("offstreetparking", "OffStreetParking").unwrap();
        assert_eq!(
            p.organization_create("offstreetparking", "x").unwrap_err(),
            PortalError::Conflict("offstreetparking".into())
        );
        assert_eq!(
            p.organization_create("Bad Name!", "x").unwrap_err(),
            PortalError::InvalidName("Bad Name!".into())
        );
    }

    #[test]
    fn package_rules() {
        let (p, _) = seeded();
        let again = NewDataset {
            name: DS.into(),
            title: "Parking 1".into(),
            owner_org: "offstreetparking".into(),
            metadata: None,
        };
        assert!(matches!(p.package_create(again.clone()), Err(PortalError::Conflict(_))));
        let ghost = NewDataset {
            name: "other".into(),
            owner_org: "ghost".into(),
            ..again
        };
        assert!(matches!(
            p.package_create(ghost),
            Err(PortalError::UnknownOrganization(_))
        ));
        assert_eq!(p.package_show(DS).unwrap().title, "Parking 1");
    }

    #[test]
    fn rows_append_in_order_and_advance_modified() {
        let (p, clock) = seeded();
        let r = p
            .resource_create(DS, NewResource::rows("Occupancy level of Parking 1"))
            .unwrap();
        let before = p.package_show(DS).unwrap().metadata;
        clock.advance(Duration::from_secs(5));
        assert_eq!(p.resource_append(DS, &r.id, json!({"value": 132})).unwrap(), 1);
        assert_eq!(p.resource_append(DS, &r.id, json!({"value": 131})).unwrap(), 2);
        let rows = p.resource_rows(DS, &r.id).unwrap();
        assert_eq!(rows, vec![json!({"value": 132}), json!({"value": 131})]);
        let after = p.package_show(DS).unwrap().metadata;
        assert_eq!(after.issued, before.issued);
        assert!(after.modified > before.modified);
        assert!(matches!(
            p.resource_append(DS, "nope", json!(1)),
            Err(PortalError::ResourceNotFound(_))
        ));
        assert!(matches!(
            p.resource_append("nope", &r.id, json!(1)),
            Err(PortalError::DatasetNotFound(_))
        ));
    }

    #[test]
    fn external_resources_reject_rows() {
        let (p, _) = seeded();
        let r = p
            .resource_create(
                DS,
                NewResource::external("Occupancy level of Parking 1", "http://broker/e"),
            )
            .unwrap();
        assert!(r.metadata_only);
        assert_eq!(r.url, "http://broker/e");
        assert_eq!(
            p.resource_append(DS, &r.id, json!(1)).unwrap_err(),
            PortalError::MetadataOnlyResource(r.id)
        );
    }

    #[test]
    fn search() {
        let (p, _) = seeded();
        let names = |q: &str| {
            p.package_search(q, &SearchFilters::default())
                .into_iter()
                .map(|d| d.name)
                .collect::<Vec<_>>()
        };
        assert_eq!(names("Parking"), [DS]);
        assert_eq!(names("pArKiNg 1"), [DS]);
        assert!(names("zeppelin").is_empty());
        assert_eq!(names(""), [DS]);
        let f = SearchFilters {
            organization: Some("ghost".into()),
            keyword: None,
        };
        assert!(p.package_search("", &f).is_empty());
    }

    #[test]
    fn patch_keeps_issued() {
        let (p, clock) = seeded();
        let issued = p.package_show(DS).unwrap().metadata.issued;
        clock.advance(Duration::from_secs(1));
        let mut m = CatalogMetadata::minimal("Parking 1", clock.now());
        m.issued = clock.now();
        m.keywords = vec!["OffStreetParking".into()];
        let v = p.package_patch(DS, m).unwrap();
        assert_eq!(v.metadata.issued, issued);
        assert_eq!(v.metadata.keywords, ["OffStreetParking"]);
    }
}
