//! The record-level operations behind the processor kinds. Each is usable on
//! its own, outside a running graph.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::mapping::{attribute_for_distribution, DIGITAL_TWIN_KEYWORD};
use super::mapping::{dataset_title, distribution_title, organization_name, MappingRules, MetadataTracker};
use super::model::ModelRegistry;
use super::{meta, FlowError, FlowRecord, Payload, Provenance};
use crate::broker::{BrokerError, ContextBroker, Notification};
use crate::entity::{Attribute, Entity, EntityId, Patch, LOCATION};
use crate::geo::GeoPoint;
use crate::odp::{CatalogMetadata, NewDataset, NewResource, PortalApi, PortalError};
use crate::time::Timestamp;

/// Splits notifications into per-entity records, dropping replays.
#[derive(Debug, Default)]
pub struct NotificationIngress {
    seen: Mutex<HashSet<(String, Timestamp)>>,
    duplicates: Mutex<u64>,
}

impl NotificationIngress {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn duplicates(&self) -> u64 {
        *self.duplicates.lock()
    }

    pub fn ingest(&self, rec: FlowRecord) -> Result<Vec<FlowRecord>, FlowError> {
        let body = match rec.payload {
            Payload::Notification(v) => v,
            Payload::Row(r) => Value::Object(r),
            Payload::Entity(_) => return Err(FlowError::MalformedNotification("expected a notification body".into())),
        };
        let n = Notification::from_wire(&body).map_err(FlowError::MalformedNotification)?;
        if !self.seen.lock().insert((n.subscription_id.clone(), n.fired_at)) {
            *self.duplicates.lock() += 1;
            return Ok(Vec::new());
        }
        let touched = n.touched.iter().cloned().collect::<Vec<_>>().join(",");
        Ok(n.entities
            .into_iter()
            .map(|e| {
                let mut r = FlowRecord::entity(e, Provenance::BrokerNotification, rec.received_at)
                    .with_meta(meta::SUBSCRIPTION, n.subscription_id.clone())
                    .with_meta(meta::NOTIFIED_AT, n.fired_at.to_string());
                if !touched.is_empty() {
                    r = r.with_meta(meta::TOUCHED, touched.clone());
                }
                r
            })
            .collect())
    }
}

/// Names of the latitude and longitude fields of a row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatLng {
    pub lat: String,
    pub lng: String,
}

/// Field mapping from an arbitrary row (or entity) onto a target data model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmartModelRules {
    pub target_type: String,
    #[serde(default = "default_id_field")]
    pub id_field: String,
    /// Source field to model attribute. Fields already named like a model
    /// attribute map to themselves.
    #[serde(default)]
    pub rename: BTreeMap<String, String>,
    /// Multipliers applied to numeric source fields before typing.
    #[serde(default)]
    pub scale: BTreeMap<String, f64>,
    #[serde(default)]
    pub location: Option<LatLng>,
}

fn default_id_field() -> String {
    "id".into()
}

impl SmartModelRules {
    pub fn new(target_type: impl Into<String>) -> Self {
        SmartModelRules {
            target_type: target_type.into(),
            id_field: default_id_field(),
            rename: BTreeMap::new(),
            scale: BTreeMap::new(),
            location: None,
        }
    }

    pub fn rename(mut self, from: &str, to: &str) -> Self {
        self.rename.insert(from.into(), to.into());
        self
    }

    pub fn id_field(mut self, f: &str) -> Self {
        self.id_field = f.into();
        self
    }

    pub fn location(mut self, lat: &str, lng: &str) -> Self {
        self.location = Some(LatLng {
            lat: lat.into(),
            lng: lng.into(),
        });
        self
    }
}

fn number_of(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn target_id(raw: &Value, target_type: &str) -> Result<EntityId, FlowError> {
    let s = match raw {
        Value::String(s) if !s.trim().is_empty() => s.trim().to_string(),
        Value::Number(n) => n.to_string(),
        _ => return Err(FlowError::UnmappableRecord("record has no usable id".into())),
    };
    let suffix = match EntityId::parse(&s) {
        Ok(id) if id.type_segment() == target_type => return Ok(id),
        Ok(id) => id.suffix().to_string(),
        Err(_) => s,
    };
    EntityId::new(target_type, suffix).map_err(|e| FlowError::UnmappableRecord(e.to_string()))
}

/// Maps a row or entity onto `rules.target_type`. The output always passes
/// [`ModelRegistry::validate`]; fields outside the model are dropped and
/// their count recorded under [`meta::DROPPED_FIELDS`].
pub fn to_smart_model(
    rec: FlowRecord,
    rules: &SmartModelRules,
    models: &ModelRegistry,
) -> Result<FlowRecord, FlowError> {
    let model = models
        .get(&rules.target_type)
        .ok_or_else(|| FlowError::InvalidConfig(format!("no model for type {}", rules.target_type)))?;
    let observed: Option<Timestamp> = rec.meta(meta::OBSERVED_AT).and_then(|s| s.parse().ok());
    let mut attrs: Vec<(String, Attribute)> = Vec::new();
    let mut dropped = 0usize;
    let target = |field: &str| rules.rename.get(field).map(String::as_str).unwrap_or(field).to_string();

    let id = match &rec.payload {
        Payload::Entity(e) => {
            for (name, attr) in e.attributes() {
                let to = target(name);
                if !model.attributes.contains_key(&to) {
                    dropped += 1;
                    continue;
                }
                let attr = if rules.scale.contains_key(name) || attr.kind() == crate::entity::AttributeKind::Property {
                    let mut raw = attr.simple_value();
                    if let (Some(k), Some(x)) = (rules.scale.get(name), number_of(&raw)) {
                        raw = json!(x * k);
                    }
                    let mut a = models
                        .coerce(&rules.target_type, &to, &raw)
                        .map_err(FlowError::UnmappableRecord)?;
                    if let Some(t) = attr.observed_at() {
                        a = a.observed(t);
                    }
                    a
                } else {
                    attr.clone()
                };
                attrs.push((to, attr));
            }
            if e.entity_type() == rules.target_type {
                e.id().clone()
            } else {
                target_id(&Value::String(e.id().to_string()), &rules.target_type)?
            }
        }
        Payload::Row(row) => {
            let raw_id = row
                .get(&rules.id_field)
                .ok_or_else(|| FlowError::UnmappableRecord(format!("missing id field {}", rules.id_field)))?;
            let id = target_id(raw_id, &rules.target_type)?;
            let mut consumed: BTreeSet<&str> = [rules.id_field.as_str(), "type", "@context"].into();
            if let Some(ll) = &rules.location {
                if let (Some(lat), Some(lng)) = (
                    row.get(&ll.lat).and_then(number_of),
                    row.get(&ll.lng).and_then(number_of),
                ) {
                    let p = GeoPoint::new(lat, lng).map_err(|e| FlowError::UnmappableRecord(e.to_string()))?;
                    attrs.push((LOCATION.to_string(), Attribute::geo(p)));
                    consumed.insert(ll.lat.as_str());
                    consumed.insert(ll.lng.as_str());
                }
            }
            for (field, raw) in row {
                if consumed.contains(field.as_str()) || raw.is_null() {
                    continue;
                }
                let to = target(field);
                if !model.attributes.contains_key(&to) || attrs.iter().any(|(n, _)| *n == to) {
                    dropped += 1;
                    continue;
                }
                let mut raw = raw.clone();
                if let (Some(k), Some(x)) = (rules.scale.get(field), number_of(&raw)) {
                    raw = json!(x * k);
                }
                let a = models
                    .coerce(&rules.target_type, &to, &raw)
                    .map_err(FlowError::UnmappableRecord)?;
                attrs.push((to, a));
            }
            id
        }
        Payload::Notification(_) => return Err(FlowError::NotEntityShaped),
    };

    let mut e =
        Entity::new(id, rules.target_type.clone()).map_err(|err| FlowError::UnmappableRecord(err.to_string()))?;
    for (name, a) in attrs {
        let a = match observed {
            Some(t) => a.observed(t),
            None => a,
        };
        e.set(&name, a)
            .map_err(|err| FlowError::UnmappableRecord(err.to_string()))?;
    }
    if let Payload::Entity(src) = &rec.payload {
        for ctx in src.contexts() {
            e = e.with_context(ctx.clone());
        }
    }
    models
        .validate(&e)
        .map_err(|problems| FlowError::UnmappableRecord(problems.join("; ")))?;
    let mut out = FlowRecord::entity(e, rec.provenance, rec.received_at);
    out.attributes_meta = rec.attributes_meta;
    out.catalog = rec.catalog;
    Ok(out.with_meta(meta::DROPPED_FIELDS, dropped.to_string()))
}

/// Builds the catalog record for the entity carried by `rec`.
pub fn update_ckan_metadata(
    rec: &FlowRecord,
    rules: &MappingRules,
    tracker: &MetadataTracker,
    now: Timestamp,
) -> Result<CatalogMetadata, FlowError> {
    let e = rec.as_entity()?;
    let title = dataset_title(e.id());
    let issued = tracker.issued(e.id(), now);
    let access_url = if rules.metadata_only {
        rules.broker_entity_url(e.id())
    } else {
        rules
            .portal_base
            .as_ref()
            .map(|b| format!("{}/datasets/{}", b.trim_end_matches('/'), e.id()))
    };
    Ok(CatalogMetadata {
        description: format!("{} {} published by its digital twin", e.entity_type(), e.id()),
        issued,
        modified: now.max(issued),
        keywords: vec![e.entity_type().to_string(), DIGITAL_TWIN_KEYWORD.to_string()],
        distribution_titles: rules
            .resource_attribute_whitelist
            .iter()
            .filter(|a| e.attribute(a).is_some())
            .map(|a| distribution_title(a, &title))
            .collect(),
        dataset_title: title,
        access_url,
    })
}

/// What one `ngsi_to_ckan` call wrote.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PublishReport {
    pub dataset: String,
    pub organization: String,
    pub dataset_created: bool,
    pub resources_created: Vec<String>,
    pub rows_appended: usize,
}

#[derive(Debug, Default)]
struct KnownDataset {
    resources: HashMap<String, String>,
}

/// Portal objects already known to exist, so steady-state publication
/// costs one append per attribute plus one metadata patch.
#[derive(Debug, Default)]
pub struct PublishCache {
    organizations: Mutex<HashSet<String>>,
    datasets: Mutex<HashMap<String, KnownDataset>>,
}

impl PublishCache {
    pub fn new() -> Self {
        Self::default()
    }
}

async fn ensure_organization(
    portal: &dyn PortalApi,
    cache: &PublishCache,
    name: &str,
    title: &str,
) -> Result<(), FlowError> {
    if cache.organizations.lock().contains(name) {
        return Ok(());
    }
    match portal.organization_create(name, title).await {
        Ok(_) | Err(PortalError::Conflict(_)) => {}
        Err(e) => return Err(e.into()),
    }
    cache.organizations.lock().insert(name.to_string());
    Ok(())
}

/// Creates the organization, dataset and resources as needed, appends rows
/// for the touched whitelisted attributes, and stores the catalog record.
pub async fn ngsi_to_ckan(
    portal: &dyn PortalApi,
    rec: &FlowRecord,
    metadata: &CatalogMetadata,
    rules: &MappingRules,
    cache: &PublishCache,
) -> Result<PublishReport, FlowError> {
    let e = rec.as_entity()?;
    let org = organization_name(e.entity_type());
    let name = e.id().to_string();
    let title = dataset_title(e.id());
    let mut report = PublishReport {
        dataset: name.clone(),
        organization: org.clone(),
        ..Default::default()
    };
    ensure_organization(portal, cache, &org, e.entity_type()).await?;

    let known = cache.datasets.lock().contains_key(&name);
    if !known {
        let view = match portal.package_show(&name).await {
            Ok(v) => v,
            Err(PortalError::DatasetNotFound(_)) => {
                let d = NewDataset {
                    name: name.clone(),
                    title: title.clone(),
                    owner_org: org.clone(),
                    metadata: Some(metadata.clone()),
                };
                match portal.package_create(&d).await {
                    Ok(v) => {
                        report.dataset_created = true;
                        v
                    }
                    Err(PortalError::Conflict(_)) => portal.package_show(&name).await?,
                    Err(err) => return Err(err.into()),
                }
            }
            Err(err) => return Err(err.into()),
        };
        if view.owner_org != org {
            return Err(FlowError::NameConflict {
                dataset: name,
                owner: view.owner_org,
            });
        }
        let resources = view.resources.into_iter().map(|r| (r.name, r.id)).collect();
        cache.datasets.lock().insert(name.clone(), KnownDataset { resources });
    }

    let touched: Option<BTreeSet<&str>> = rec.meta(meta::TOUCHED).map(|t| t.split(',').collect());
    let recorded_at = rec.recorded_at();
    for attr in &rules.resource_attribute_whitelist {
        let Some(value) = e.attribute(attr) else { continue };
        let res_name = distribution_title(attr, &title);
        let existing = cache
            .datasets
            .lock()
            .get(&name)
            .and_then(|d| d.resources.get(&res_name).cloned());
        let res_id = match existing {
            Some(id) => id,
            None => {
                let r = if rules.metadata_only {
                    let url = rules.broker_entity_url(e.id()).unwrap_or_default();
                    NewResource::external(res_name.clone(), url)
                } else {
                    NewResource::rows(res_name.clone())
                };
                let view = portal.resource_create(&name, &r).await?;
                report.resources_created.push(res_name.clone());
                if let Some(d) = cache.datasets.lock().get_mut(&name) {
                    d.resources.insert(res_name.clone(), view.id.clone());
                }
                view.id
            }
        };
        if rules.metadata_only || touched.as_ref().is_some_and(|t| !t.contains(attr.as_str())) {
            continue;
        }
        let row = json!({ "recorded_at": recorded_at, "value": value.simple_value() });
        portal.resource_append(&name, &res_id, &row).await?;
        report.rows_appended += 1;
    }
    portal.package_patch(&name, metadata).await?;
    Ok(report)
}

/// Rows pulled from a dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fetched {
    pub records: Vec<FlowRecord>,
    /// Data locations of metadata-only resources.
    pub broker_redirects: Vec<String>,
}

/// One record per stored row across the dataset's resources, in resource
/// then append order. The last record is tagged [`meta::LAST_ROW`].
pub async fn dataset_fetch(portal: &dyn PortalApi, dataset: &str, now: Timestamp) -> Result<Fetched, FlowError> {
    let view = portal.package_show(dataset).await?;
    let mut out = Fetched::default();
    for r in &view.resources {
        if r.metadata_only {
            out.broker_redirects.push(r.url.clone());
            continue;
        }
        let attribute = attribute_for_distribution(&r.name, &view.title);
        for row in portal.resource_rows(dataset, &r.id).await? {
            let fields = match row {
                Value::Object(m) => m,
                other => Map::from_iter([("value".to_string(), other)]),
            };
            let mut rec = FlowRecord::row(fields, Provenance::OdpFetch, now)
                .with_meta(meta::DATASET, dataset)
                .with_meta(meta::RESOURCE_ID, r.id.clone())
                .with_meta(meta::RESOURCE_NAME, r.name.clone());
            if let Some(a) = &attribute {
                rec = rec.with_meta(meta::ATTRIBUTE, a.clone());
            }
            out.records.push(rec);
        }
    }
    if let Some(last) = out.records.last_mut() {
        last.attributes_meta.insert(meta::LAST_ROW.into(), "true".into());
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsertReport {
    pub created: Vec<EntityId>,
    pub patched: Vec<EntityId>,
}

impl UpsertReport {
    pub fn merge(&mut self, other: UpsertReport) {
        self.created.extend(other.created);
        self.patched.extend(other.patched);
    }
}

/// Returns `true` when the entity was created, `false` when patched.
pub async fn upsert(broker: &dyn ContextBroker, e: &Entity) -> Result<bool, FlowError> {
    for _ in 0..2 {
        match broker.create_entity(e).await {
            Ok(_) => return Ok(true),
            Err(BrokerError::AlreadyExists(_)) => {}
            Err(err) => return Err(err.into()),
        }
        let patch = e
            .attributes()
            .iter()
            .fold(Patch::new(), |p, (n, a)| p.with(n, a.clone()));
        match broker.update_attributes(e.id(), &patch).await {
            Ok(_) => return Ok(false),
            // Deleted between the two calls: try creating again.
            Err(BrokerError::NotFound(_)) => continue,
            Err(err) => return Err(err.into()),
        }
    }
    Err(FlowError::BrokerUnavailable(format!(
        "{} keeps changing under upsert",
        e.id()
    )))
}

/// Create-or-patch every entity record, in order.
pub async fn republish_to_broker(
    broker: &dyn ContextBroker,
    records: &[FlowRecord],
) -> Result<UpsertReport, FlowError> {
    let mut report = UpsertReport::default();
    for rec in records {
        let e = rec.as_entity()?;
        if upsert(broker, e).await? {
            report.created.push(e.id().clone());
        } else {
            report.patched.push(e.id().clone());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odp::Portal;
    use crate::time::{Clock, ManualClock};

    fn parking(avail: i64) -> Entity {
        Entity::new(
            EntityId::parse("urn:ngsi-ld:OffStreetParking:1").unwrap(),
            "OffStreetParking",
        )
        .unwrap()
        .with_attribute(
            "location",
            Attribute::geo(GeoPoint::new(40.3312618, -3.7574926).unwrap()),
        )
        .unwrap()
        .with_attribute("availableSpotNumber", Attribute::property(avail))
        .unwrap()
    }

    fn notification(sub: &str, at: i64, entities: Vec<Entity>) -> FlowRecord {
        let n = Notification {
            subscription_id: sub.into(),
            fired_at: Timestamp::from_millis(at),
            entities,
            touched: BTreeSet::new(),
        };
        FlowRecord::new(
            Payload::Notification(n.to_wire()),
            Provenance::BrokerNotification,
            Timestamp::from_millis(at),
        )
    }

    #[test]
    fn ingress_splits_and_dedupes() {
        let ing = NotificationIngress::new();
        assert_eq!(ing.ingest(notification("s", 1, vec![parking(1)])).unwrap().len(), 1);
        assert_eq!(ing.ingest(notification("s", 1, vec![parking(1)])).unwrap().len(), 0);
        assert_eq!(
            ing.ingest(notification("s", 2, vec![parking(1), parking(2), parking(3)]))
                .unwrap()
                .len(),
            3
        );
        assert_eq!(ing.duplicates(), 1);
        let bad = FlowRecord::new(
            Payload::Notification(json!({"data": []})),
            Provenance::BrokerNotification,
            Timestamp::EPOCH,
        );
        assert!(matches!(ing.ingest(bad), Err(FlowError::MalformedNotification(_))));
    }

    #[test]
    fn smart_model_from_row() {
        let m = ModelRegistry::builtin();
        let rules = SmartModelRules::new("OffStreetParking")
            .id_field("code")
            .rename("free_spots", "availableSpotNumber")
            .location("lat", "lng");
        let row = json!({"code": "p7", "lat": "40.4", "lng": "-3.7", "free_spots": "12", "color": "blue"});
        let out = to_smart_model(
            FlowRecord::row(row.as_object().unwrap().clone(), Provenance::File, Timestamp::EPOCH),
            &rules,
            &m,
        )
        .unwrap();
        let e = out.as_entity().unwrap();
        assert_eq!(e.id().as_str(), "urn:ngsi-ld:OffStreetParking:p7");
        assert_eq!(e.attribute("availableSpotNumber").unwrap().simple_value(), json!(12));
        assert_eq!(out.meta(meta::DROPPED_FIELDS), Some("1"));
        assert!(m.validate(e).is_ok());

        let empty = json!({"code": "p8", "color": "blue"});
        let err = to_smart_model(
            FlowRecord::row(empty.as_object().unwrap().clone(), Provenance::File, Timestamp::EPOCH),
            &rules,
            &m,
        );
        assert!(matches!(err, Err(FlowError::UnmappableRecord(_))));
    }

    #[test]
    fn smart_model_identity_on_conformant_entity() {
        let m = ModelRegistry::builtin();
        let rec = FlowRecord::entity(parking(5), Provenance::BrokerNotification, Timestamp::EPOCH);
        let out = to_smart_model(rec, &SmartModelRules::new("OffStreetParking"), &m).unwrap();
        assert_eq!(out.as_entity().unwrap(), &parking(5));
    }

    #[test]
    fn metadata_issued_sticks() {
        let tracker = MetadataTracker::new();
        let rules = MappingRules::new(["availableSpotNumber"]);
        let rec = FlowRecord::entity(parking(1), Provenance::BrokerNotification, Timestamp::EPOCH);
        let a = update_ckan_metadata(&rec, &rules, &tracker, Timestamp::from_millis(10)).unwrap();
        let b = update_ckan_metadata(&rec, &rules, &tracker, Timestamp::from_millis(20)).unwrap();
        assert_eq!(a.dataset_title, "Parking 1");
        assert_eq!(a.distribution_titles, vec!["Occupancy level of Parking 1"]);
        assert_eq!(b.issued, a.issued);
        assert!(b.modified > a.modified);
        assert!(a.keywords.contains(&"OffStreetParking".to_string()));
    }

    #[tokio::test]
    async fn publish_then_fetch() {
        let clock = ManualClock::new(Timestamp::from_millis(1_000));
        let portal = Portal::new(clock.clone());
        let rules = MappingRules::new(["availableSpotNumber"]);
        let tracker = MetadataTracker::new();
        let cache = PublishCache::new();
        for (i, v) in [132, 131].into_iter().enumerate() {
            clock.advance(std::time::Duration::from_millis(10));
            let rec = FlowRecord::entity(
                parking(v),
                Provenance::BrokerNotification,
                Timestamp::from_millis(i as i64),
            );
            let m = update_ckan_metadata(&rec, &rules, &tracker, clock.now()).unwrap();
            let rep = ngsi_to_ckan(&portal, &rec, &m, &rules, &cache).await.unwrap();
            assert_eq!(rep.dataset_created, i == 0);
            assert_eq!(rep.rows_appended, 1);
        }
        let fetched = dataset_fetch(&portal, "urn:ngsi-ld:OffStreetParking:1", clock.now())
            .await
            .unwrap();
        let values: Vec<_> = fetched
            .records
            .iter()
            .map(|r| match &r.payload {
                Payload::Row(m) => m["value"].clone(),
                _ => Value::Null,
            })
            .collect();
        assert_eq!(values, vec![json!(132), json!(131)]);
        assert_eq!(fetched.records[1].meta(meta::LAST_ROW), Some("true"));
        assert_eq!(fetched.records[0].meta(meta::ATTRIBUTE), Some("availableSpotNumber"));
        assert!(matches!(
            dataset_fetch(&portal, "nope", clock.now()).await,
            Err(FlowError::DatasetNotFound(_))
        ));
    }

    #[tokio::test]
    async fn name_owned_elsewhere_conflicts() {
        let portal = Portal::default();
        portal.organization_create("other", "Other").unwrap();
        portal
            .package_create(NewDataset {
                name: "urn:ngsi-ld:OffStreetParking:1".into(),
                title: "Taken".into(),
                owner_org: "other".into(),
                metadata: None,
            })
            .unwrap();
        let rules = MappingRules::new(["availableSpotNumber"]);
        let rec = FlowRecord::entity(parking(1), Provenance::BrokerNotification, Timestamp::EPOCH);
        let m = update_ckan_metadata(&rec, &rules, &MetadataTracker::new(), Timestamp::EPOCH).unwrap();
        let err = ngsi_to_ckan(&portal, &rec, &m, &rules, &PublishCache::new())
            .await
            .unwrap_err();
        assert!(matches!(err, FlowError::NameConflict { owner, .. } if owner == "other"));
    }
}
