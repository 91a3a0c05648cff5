//! Local registry of target data models and the validator built on it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::FlowError;
use crate::entity::{Attribute, Entity};
use crate::iot_agent::type_value;

const BUILTIN: &str = include_str!("models.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrType {
    Integer,
    Number,
    String,
    Boolean,
    Geo,
    Relationship,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    #[serde(rename = "type")]
    pub ty: AttrType,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimum: Option<f64>,
    #[serde(default, rename = "enum", skip_serializing_if = "Option::is_none")]
    pub allowed: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub attributes: BTreeMap<String, AttributeSpec>,
}

impl ModelSpec {
    pub fn required(&self) -> impl Iterator<Item = &str> {
        self.attributes
            .iter()
            .filter(|(_, s)| s.required)
            .map(|(n, _)| n.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelRegistry {
    models: BTreeMap<String, ModelSpec>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl ModelRegistry {
    /// OffStreetParking, ParkingSpot and Vehicle.
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN).expect("bundled model registry is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, FlowError> {
        serde_json::from_str(text).map_err(|e| FlowError::InvalidConfig(format!("model registry: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, FlowError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| FlowError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn get(&self, entity_type: &str) -> Option<&ModelSpec> {
        self.models.get(entity_type)
    }

    pub fn types(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    /// Converts a raw field value into an attribute of the declared type.
    /// Strings holding numbers or booleans are parsed.
    pub fn coerce(&self, entity_type: &str, attribute: &str, raw: &Value) -> Result<Attribute, String> {
        let spec = self
            .get(entity_type)
            .and_then(|m| m.attributes.get(attribute))
            .ok_or_else(|| format!("{attribute} is not part of {entity_type}"))?;
        let typed = match raw {
            Value::String(s) if !matches!(spec.ty, AttrType::String | AttrType::Relationship | AttrType::Geo) => {
                type_value(s.trim())
            }
            other => other.clone(),
        };
        let typed = match (spec.ty, &typed) {
            // Whole-valued decimals are accepted where integers are declared.
            (AttrType::Integer, Value::Number(n)) if n.as_i64().is_none() => match n.as_f64() {
                Some(f) if f.fract() == 0.0 && f.abs() < 9.0e15 => Value::from(f as i64),
                _ => typed,
            },
            _ => typed,
        };
        let attr = Attribute::from_json(attribute, &typed).map_err(|e| e.to_string())?;
        check(spec, attribute, &attr)?;
        Ok(attr)
    }

    /// Checks that every attribute is declared by the model, has the declared
    /// type and bounds, and that all required attributes are present.
    pub fn validate(&self, e: &Entity) -> Result<(), Vec<String>> {
        let Some(model) = self.get(e.entity_type()) else {
            return Err(vec![format!("no model for type {}", e.entity_type())]);
        };
        let mut problems = Vec::new();
        for (name, attr) in e.attributes() {
            match model.attributes.get(name) {
                None => problems.push(format!("{name} is not declared by {}", e.entity_type())),
                Some(spec) => {
                    if let Err(p) = check(spec, name, attr) {
                        problems.push(p);
                    }
                }
            }
        }
        for req in model.required() {
            if e.attribute(req).is_none() {
                problems.push(format!("required attribute {req} is missing"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

fn check(spec: &AttributeSpec, name: &str, attr: &Attribute) -> Result<(), String> {
    let ok = match (spec.ty, attr) {
        (AttrType::Geo, Attribute::GeoProperty { .. }) => true,
        (AttrType::Relationship, Attribute::Relationship { .. }) => true,
        (AttrType::Integer, Attribute::Property { value, .. }) => value.is_i64() || value.is_u64(),
        (AttrType::Number, Attribute::Property { value, .. }) => value.is_number(),
        (AttrType::String, Attribute::Property { value, .. }) => value.is_string(),
        (AttrType::Boolean, Attribute::Property { value, .. }) => value.is_boolean(),
        _ => false,
    };
    if !ok {
        return Err(format!("{name} should be {:?}", spec.ty));
    }
    if let (Some(min), Some(v)) = (spec.minimum, attr.as_f64()) {
        if v < min {
            return Err(format!("{name} = {v} is below {min}"));
        }
    }
    if let (Some(allowed), Some(s)) = (&spec.allowed, attr.as_str()) {
        if !allowed.iter().any(|a| a == s) {
            return Err(format!("{name} = {s:?} is outside {allowed:?}"));
        }
    }
    Ok(())
}
