//! NGSI-LD entities: identifiers, attributes, and the two JSON renderings.
//!
//! The *simplified* rendering (NGSI-LD `keyValues`) flattens every attribute
//! to `name: value` and is the compact form clients exchange. The *normalized*
//! rendering wraps each attribute as `{"type": <kind>, "value"|"object": ..}`
//! and is lossless.
//!
//! Geo coordinates are read and written as `[lat, lon]`, the order the
//! parking data sets in this domain use.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::geo::{GeoError, GeoPoint};
use crate::time::Timestamp;

pub const URN_PREFIX: &str = "urn:ngsi-ld:";
pub const LOCATION: &str = "location";
pub const CORE_CONTEXT: &str = "https://uri.etsi.org/ngsi-ld/v1/ngsi-ld-core-context.jsonld";

const RESERVED: [&str; 3] = ["id", "type", "@context"];
const FORBIDDEN_NAME_CHARS: &[char] = &['<', '>', '"', '\'', '=', ';', '(', ')', '&', '?', '/', '#'];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EntityError {
    #[error("invalid entity id {0:?}: expected urn:ngsi-ld:<Type>:<suffix>")]
    InvalidId(String),
    #[error("invalid entity type {0:?}")]
    InvalidType(String),
    #[error("entity type {entity_type:?} does not match id {id}")]
    TypeMismatch { id: String, entity_type: String },
    #[error("invalid attribute {name:?}: {reason}")]
    InvalidAttribute { name: String, reason: String },
    #[error("invalid location: {0}")]
    InvalidGeo(#[from] GeoError),
    #[error("entity body must be a JSON object")]
    NotAnObject,
    #[error("entity type is immutable ({existing} -> {requested})")]
    TypeChange { existing: String, requested: String },
}

fn bad_attr(name: &str, reason: impl Into<String>) -> EntityError {
    EntityError::InvalidAttribute {
        name: name.to_string(),
        reason: reason.into(),
    }
}

/// `urn:ngsi-ld:<Type>:<suffix>`
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(String);

impl EntityId {
    pub fn parse(s: &str) -> Result<Self, EntityError> {
        let rest = s
            .strip_prefix(URN_PREFIX)
            .ok_or_else(|| EntityError::InvalidId(s.to_string()))?;
        let (ty, suffix) = rest
            .split_once(':')
            .ok_or_else(|| EntityError::InvalidId(s.to_string()))?;
        if ty.is_empty() || suffix.is_empty() || s.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(EntityError::InvalidId(s.to_string()));
        }
        Ok(EntityId(s.to_string()))
    }

    pub fn new(entity_type: &str, suffix: impl fmt::Display) -> Result<Self, EntityError> {
        Self::parse(&format!("{URN_PREFIX}{entity_type}:{suffix}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn type_segment(&self) -> &str {
        let rest = &self.0[URN_PREFIX.len()..];
        rest.split_once(':').map(|(t, _)| t).unwrap_or_default()
    }

    pub fn suffix(&self) -> &str {
        let rest = &self.0[URN_PREFIX.len()..];
        rest.split_once(':').map(|(_, s)| s).unwrap_or_default()
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for EntityId {
    type Err = EntityError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityId::parse(s)
    }
}

impl Serialize for EntityId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for EntityId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        EntityId::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttributeKind {
    Property,
    GeoProperty,
    Relationship,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Attribute {
    Property {
        value: Value,
        observed_at: Option<Timestamp>,
    },
    GeoProperty {
        value: GeoPoint,
        observed_at: Option<Timestamp>,
    },
    Relationship {
        object: EntityId,
        observed_at: Option<Timestamp>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    Normalized,
    Simplified,
}

impl FromStr for Representation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keyValues" | "simplified" | "concise" => Ok(Representation::Simplified),
            "normalized" => Ok(Representation::Normalized),
            other => Err(format!("unknown representation {other:?}")),
        }
    }
}

impl Attribute {
    pub fn property(value: impl Into<Value>) -> Self {
        Attribute::Property {
            value: value.into(),
            observed_at: None,
        }
    }

    pub fn geo(p: GeoPoint) -> Self {
        Attribute::GeoProperty {
            value: p,
            observed_at: None,
        }
    }

    pub fn relationship(object: EntityId) -> Self {
        Attribute::Relationship {
            object,
            observed_at: None,
        }
    }

    pub fn kind(&self) -> AttributeKind {
        match self {
            Attribute::Property { .. } => AttributeKind::Property,
            Attribute::GeoProperty { .. } => AttributeKind::GeoProperty,
            Attribute::Relationship { .. } => AttributeKind::Relationship,
        }
    }

    pub fn observed_at(&self) -> Option<Timestamp> {
        match self {
            Attribute::Property { observed_at, .. }
            | Attribute::GeoProperty { observed_at, .. }
            | Attribute::Relationship { observed_at, .. } => *observed_at,
        }
    }

    pub fn observed(mut self, at: Timestamp) -> Self {
        match &mut self {
            Attribute::Property { observed_at, .. }
            | Attribute::GeoProperty { observed_at, .. }
            | Attribute::Relationship { observed_at, .. } => *observed_at = Some(at),
        }
        self
    }

    /// The flattened value as it appears in the simplified rendering.
    pub fn simple_value(&self) -> Value {
        match self {
            Attribute::Property { value, .. } => value.clone(),
            Attribute::GeoProperty { value, .. } => value.to_geojson(),
            Attribute::Relationship { object, .. } => Value::String(object.to_string()),
        }
    }

    pub fn as_geo(&self) -> Option<GeoPoint> {
        match self {
            Attribute::GeoProperty { value, .. } => Some(*value),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Attribute::Property { value, .. } => value.as_f64(),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Attribute::Property { value, .. } => value.as_str(),
            _ => None,
        }
    }

    pub fn render(&self, rep: Representation) -> Value {
        match rep {
            Representation::Simplified => self.simple_value(),
            Representation::Normalized => {
                let mut m = Map::new();
                match self {
                    Attribute::Property { value, .. } => {
                        m.insert("type".into(), "Property".into());
                        m.insert("value".into(), value.clone());
                    }
                    Attribute::GeoProperty { value, .. } => {
                        m.insert("type".into(), "GeoProperty".into());
                        m.insert("value".into(), value.to_geojson());
                    }
                    Attribute::Relationship { object, .. } => {
                        m.insert("type".into(), "Relationship".into());
                        m.insert("object".into(), object.to_string().into());
                    }
                }
                if let Some(t) = self.observed_at() {
                    m.insert("observedAt".into(), t.to_string().into());
                }
                Value::Object(m)
            }
        }
    }

    /// Parses an attribute from either rendering.
    ///
    /// Objects tagged `Property`/`GeoProperty`/`Relationship` are read as
    /// normalized. Otherwise a GeoJSON point becomes a GeoProperty, a string
    /// that parses as an entity URN becomes a Relationship, and anything else
    /// becomes a Property.
    pub fn from_json(name: &str, v: &Value) -> Result<Self, EntityError> {
        validate_attribute_name(name)?;
        let attr = match v {
            Value::Null => return Err(bad_attr(name, "null value")),
            Value::Object(obj) => match obj.get("type").and_then(Value::as_str) {
                Some("Property") => {
                    let value = obj.get("value").cloned().unwrap_or(Value::Null);
                    if value.is_null() {
                        return Err(bad_attr(name, "Property without value"));
                    }
                    Attribute::Property {
                        value,
                        observed_at: parse_observed_at(name, obj)?,
                    }
                }
                Some("GeoProperty") => {
                    let raw = obj
                        .get("value")
                        .ok_or_else(|| bad_attr(name, "GeoProperty without value"))?;
                    let p = GeoPoint::from_geojson(raw)
                        .ok_or_else(|| bad_attr(name, "GeoProperty value must be a Point"))??;
                    Attribute::GeoProperty {
                        value: p,
                        observed_at: parse_observed_at(name, obj)?,
                    }
                }
                Some("Relationship") => {
                    let object = obj
                        .get("object")
                        .and_then(Value::as_str)
                        .ok_or_else(|| bad_attr(name, "Relationship without object"))?;
                    Attribute::Relationship {
                        object: EntityId::parse(object)
                            .map_err(|_| bad_attr(name, "Relationship object must be a URN"))?,
                        observed_at: parse_observed_at(name, obj)?,
                    }
                }
                Some("Point") => match GeoPoint::from_geojson(v) {
                    Some(p) => Attribute::geo(p?),
                    None => return Err(bad_attr(name, "malformed Point")),
                },
                _ => Attribute::property(v.clone()),
            },
            Value::String(s) if s.starts_with(URN_PREFIX) => match EntityId::parse(s) {
                Ok(id) => Attribute::relationship(id),
                Err(_) => Attribute::property(v.clone()),
            },
            other => Attribute::property(other.clone()),
        };
        if attr.kind() == AttributeKind::GeoProperty && name != LOCATION {
            return Err(bad_attr(name, "only `location` may hold a geo point"));
        }
        if name == LOCATION && attr.kind() != AttributeKind::GeoProperty {
            return Err(bad_attr(name, "location must be a Point"));
        }
        Ok(attr)
    }
}

fn parse_observed_at(name: &str, obj: &Map<String, Value>) -> Result<Option<Timestamp>, EntityError> {
    match obj.get("observedAt") {
        None => Ok(None),
        Some(Value::String(s)) => s
            .parse()
            .map(Some)
            .map_err(|_| bad_attr(name, "observedAt is not a timestamp")),
        Some(_) => Err(bad_attr(name, "observedAt is not a timestamp")),
    }
}

pub fn validate_attribute_name(name: &str) -> Result<(), EntityError> {
    if name.is_empty()
        || RESERVED.contains(&name)
        || name
            .chars()
            .any(|c| c.is_whitespace() || c.is_control() || FORBIDDEN_NAME_CHARS.contains(&c))
    {
        return Err(bad_attr(name, "not a valid attribute name"));
    }
    Ok(())
}

fn validate_type(t: &str) -> Result<(), EntityError> {
    if t.is_empty() || t.contains(':') || t.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(EntityError::InvalidType(t.to_string()));
    }
    Ok(())
}

/// An NGSI-LD context entity.
#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    id: EntityId,
    entity_type: String,
    attributes: IndexMap<String, Attribute>,
    contexts: Vec<String>,
}

impl Entity {
    pub fn new(id: EntityId, entity_type: impl Into<String>) -> Result<Self, EntityError> {
        let entity_type = entity_type.into();
        validate_type(&entity_type)?;
        if id.type_segment() != entity_type {
            return Err(EntityError::TypeMismatch {
                id: id.to_string(),
                entity_type,
            });
        }
        Ok(Entity {
            id,
            entity_type,
            attributes: IndexMap::new(),
            contexts: Vec::new(),
        })
    }

    pub fn with_attribute(mut self, name: &str, attr: Attribute) -> Result<Self, EntityError> {
        self.set(name, attr)?;
        Ok(self)
    }

    pub fn with_context(mut self, ctx: impl Into<String>) -> Self {
        self.contexts.push(ctx.into());
        self
    }

    pub fn id(&self) -> &EntityId {
        &self.id
    }

    pub fn entity_type(&self) -> &str {
        &self.entity_type
    }

    pub fn attributes(&self) -> &IndexMap<String, Attribute> {
        &self.attributes
    }

    pub fn attribute(&self, name: &str) -> Option<&Attribute> {
        self.attributes.get(name)
    }

    pub fn contexts(&self) -> &[String] {
        &self.contexts
    }

    pub fn location(&self) -> Option<GeoPoint> {
        self.attributes.get(LOCATION).and_then(Attribute::as_geo)
    }

    pub fn set(&mut self, name: &str, attr: Attribute) -> Result<(), EntityError> {
        validate_attribute_name(name)?;
        match (name == LOCATION, attr.kind() == AttributeKind::GeoProperty) {
            (true, false) => return Err(bad_attr(name, "location must be a Point")),
            (false, true) => return Err(bad_attr(name, "only `location` may hold a geo point")),
            _ => {}
        }
        self.attributes.insert(name.to_string(), attr);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Attribute> {
        self.attributes.shift_remove(name)
    }

    pub fn render(&self, rep: Representation) -> Value {
        let mut m = Map::new();
        m.insert("id".into(), self.id.to_string().into());
        m.insert("type".into(), self.entity_type.clone().into());
        for (name, attr) in &self.attributes {
            m.insert(name.clone(), attr.render(rep));
        }
        if !self.contexts.is_empty() {
            m.insert(
                "@context".into(),
                Value::Array(self.contexts.iter().cloned().map(Value::String).collect()),
            );
        }
        Value::Object(m)
    }

    pub fn simplified(&self) -> Value {
        self.render(Representation::Simplified)
    }

    pub fn normalized(&self) -> Value {
        self.render(Representation::Normalized)
    }

    /// Parses an entity body in either rendering.
    pub fn from_json(v: &Value) -> Result<Self, EntityError> {
        let obj = v.as_object().ok_or(EntityError::NotAnObject)?;
        let id_raw = obj
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| EntityError::InvalidId(String::new()))?;
        let id = EntityId::parse(id_raw)?;
        let ty = obj
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| EntityError::InvalidType(String::new()))?;
        let mut e = Entity::new(id, ty)?;
        for (k, val) in obj {
            match k.as_str() {
                "id" | "type" => {}
                "@context" => e.contexts = parse_contexts(val)?,
                name => {
                    let attr = Attribute::from_json(name, val)?;
                    e.attributes.insert(name.to_string(), attr);
                }
            }
        }
        Ok(e)
    }
}

fn parse_contexts(v: &Value) -> Result<Vec<String>, EntityError> {
    let bad = || bad_attr("@context", "must be a URI string or an array of URI strings");
    match v {
        Value::String(s) => Ok(vec![s.clone()]),
        Value::Array(items) => items
            .iter()
            .map(|i| i.as_str().map(str::to_string).ok_or_else(bad))
            .collect(),
        _ => Err(bad()),
    }
}

impl Serialize for Entity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.normalized().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Entity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        Entity::from_json(&v).map_err(serde::de::Error::custom)
    }
}

/// An attribute patch as accepted by `PATCH .../attrs`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Patch {
    pub attributes: IndexMap<String, Attribute>,
    /// A `type` key present in the body; the broker rejects it if it differs.
    pub entity_type: Option<String>,
}

impl Patch {
    pub fn new() -> Self {
        Patch::default()
    }

    pub fn with(mut self, name: &str, attr: Attribute) -> Self {
        self.attributes.insert(name.to_string(), attr);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn from_json(v: &Value) -> Result<Self, EntityError> {
        let obj = v.as_object().ok_or(EntityError::NotAnObject)?;
        let mut patch = Patch::default();
        for (k, val) in obj {
            match k.as_str() {
                "id" | "@context" => {}
                "type" => {
                    patch.entity_type = Some(
                        val.as_str()
                            .ok_or_else(|| EntityError::InvalidType(val.to_string()))?
                            .to_string(),
                    )
                }
                name => {
                    patch
                        .attributes
                        .insert(name.to_string(), Attribute::from_json(name, val)?);
                }
            }
        }
        Ok(patch)
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        if let Some(t) = &self.entity_type {
            m.insert("type".into(), t.clone().into());
        }
        for (k, a) in &self.attributes {
            m.insert(k.clone(), a.render(Representation::Normalized));
        }
        Value::Object(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample_offstreet() -> Value {
        json!({
            "id": "urn:ngsi-ld:OffStreetParking:1",
            "type": "OffStreetParking",
            "location": { "coordinates": [40.3312618, -3.7574926], "type": "Point" },
            "availableSpotNumber": 132,
            "@context": ["https://raw.githubusercontent.com/smart-data-models/dataModel.Parking/master/context.jsonld"]
        })
    }

    #[test]
    fn urn_segments() {
        let id = EntityId::parse("urn:ngsi-ld:ParkingSpot:123").unwrap();
        assert_eq!(id.type_segment(), "ParkingSpot");
        assert_eq!(id.suffix(), "123");
        let nested = EntityId::parse("urn:ngsi-ld:Thing:a:b").unwrap();
        assert_eq!(nested.suffix(), "a:b");
        for bad in [
            "urn:ngsi-ld:",
            "urn:ngsi-ld:Type",
            "urn:ngsi-ld::1",
            "urn:ngsi-ld:T:",
            "urn:x:T:1",
            "not a urn",
        ] {
            assert!(EntityId::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn sample_round_trips_simplified() {
        let e = Entity::from_json(&sample_offstreet()).unwrap();
        assert_eq!(
            e.attribute("availableSpotNumber").unwrap().kind(),
            AttributeKind::Property
        );
        assert_eq!(e.attribute(LOCATION).unwrap().kind(), AttributeKind::GeoProperty);
        assert_eq!(e.simplified(), sample_offstreet());
    }

    #[test]
    fn normalized_shape() {
        let e = Entity::from_json(&sample_offstreet()).unwrap();
        let n = e.normalized();
        assert_eq!(n["availableSpotNumber"], json!({"type": "Property", "value": 132}));
        assert_eq!(n["location"]["type"], "GeoProperty");
        assert_eq!(Entity::from_json(&n).unwrap(), e);
    }

    #[test]
    fn rejects_bad_latitude() {
        let mut v = sample_offstreet();
        v["location"]["coordinates"] = json!([91.0, 0.0]);
        assert!(matches!(Entity::from_json(&v), Err(EntityError::InvalidGeo(_))));
    }

    #[test]
    fn rejects_type_mismatch_and_empty_type() {
        let mut v = sample_offstreet();
        v["type"] = json!("ParkingSpot");
        assert!(matches!(Entity::from_json(&v), Err(EntityError::TypeMismatch { .. })));
        v["type"] = json!("");
        assert!(matches!(Entity::from_json(&v), Err(EntityError::InvalidType(_))));
    }

    #[test]
    fn geo_only_on_location() {
        let v = json!({"id": "urn:ngsi-ld:T:1", "type": "T", "where": {"type": "Point", "coordinates": [1.0, 2.0]}});
        assert!(matches!(
            Entity::from_json(&v),
            Err(EntityError::InvalidAttribute { .. })
        ));
        let v = json!({"id": "urn:ngsi-ld:T:1", "type": "T", "location": 5});
        assert!(Entity::from_json(&v).is_err());
    }

    #[test]
    fn relationship_simplifies_to_urn() {
        let e = Entity::new(EntityId::parse("urn:ngsi-ld:Vehicle:1").unwrap(), "Vehicle")
            .unwrap()
            .with_attribute(
                "refParkingSpot",
                Attribute::relationship(EntityId::parse("urn:ngsi-ld:ParkingSpot:123").unwrap()),
            )
            .unwrap();
        assert_eq!(e.simplified()["refParkingSpot"], "urn:ngsi-ld:ParkingSpot:123");
        let back = Entity::from_json(&e.simplified()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn patch_carries_type() {
        let p = Patch::from_json(&json!({"type": "X", "availableSpotNumber": 3})).unwrap();
        assert_eq!(p.entity_type.as_deref(), Some("X"));
        assert_eq!(p.attributes.len(), 1);
    }

    #[test]
    fn null_values_rejected() {
        assert!(Attribute::from_json("a", &Value::Null).is_err());
        assert!(Attribute::from_json("a", &json!({"type": "Property"})).is_err());
    }
}
