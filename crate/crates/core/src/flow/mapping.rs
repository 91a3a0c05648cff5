//! Entity-to-catalog naming rules.

use std::collections::HashMap;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::FlowError;
use crate::entity::EntityId;
use crate::time::Timestamp;

pub const DIGITAL_TWIN_KEYWORD: &str = "digital-twin";

const OCCUPANCY_ATTRIBUTE: &str = "availableSpotNumber";
const OCCUPANCY_PREFIX: &str = "Occupancy level";

/// How entities become portal organizations, datasets and resources.
///
/// The dataset name is always the entity id and the organization is the
/// lower-cased entity type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingRules {
    /// Attributes that get a portal resource, in resource-creation order.
    #[serde(default)]
    pub resource_attribute_whitelist: Vec<String>,
    /// Register only the catalog record; the data stays in the broker.
    #[serde(default)]
    pub metadata_only: bool,
    /// Base URL under which entities are reachable (`{base}/ngsi-ld/v1/entities/{id}`).
    #[serde(default)]
    pub broker_base: Option<String>,
    /// Base URL of the portal, for dataset access URLs.
    #[serde(default)]
    pub portal_base: Option<String>,
}

impl MappingRules {
    pub fn new(whitelist: impl IntoIterator<Item = impl Into<String>>) -> Self {
        MappingRules {
            resource_attribute_whitelist: whitelist.into_iter().map(Into::into).collect(),
            metadata_only: false,
            broker_base: None,
            portal_base: None,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if !self.metadata_only && self.resource_attribute_whitelist.is_empty() {
            return Err(FlowError::InvalidConfig(
                "resource_attribute_whitelist must not be empty unless metadata_only".into(),
            ));
        }
        if self.metadata_only && self.broker_base.is_none() {
            return Err(FlowError::InvalidConfig("metadata_only requires broker_base".into()));
        }
        Ok(())
    }

    pub fn broker_entity_url(&self, id: &EntityId) -> Option<String> {
        self.broker_base
            .as_ref()
            .map(|b| format!("{}/ngsi-ld/v1/entities/{}", b.trim_end_matches('/'), id))
    }
}

fn camel_words(s: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = s.char_indices().collect();
    let mut words = Vec::new();
    let mut start = 0;
    for i in 1..chars.len() {
        let (idx, c) = chars[i];
        let prev = chars[i - 1].1;
        let next_lower = chars.get(i + 1).is_some_and(|(_, n)| n.is_lowercase());
        let boundary =
            c.is_uppercase() && (prev.is_lowercase() || prev.is_ascii_digit() || (prev.is_uppercase() && next_lower));
        if boundary {
            words.push(&s[start..idx]);
            start = idx;
        }
    }
    if start < s.len() {
        words.push(&s[start..]);
    }
    words
}

/// Last camel-case word of the type followed by the id suffix:
/// `urn:ngsi-ld:OffStreetParking:1` becomes `Parking 1`.
pub fn dataset_title(id: &EntityId) -> String {
    let ty = id.type_segment();
    let word = camel_words(ty).last().copied().unwrap_or(ty);
    format!("{} {}", word, id.suffix())
}

pub fn distribution_title(attribute: &str, dataset_title: &str) -> String {
    if attribute == OCCUPANCY_ATTRIBUTE {
        format!("{OCCUPANCY_PREFIX} of {dataset_title}")
    } else {
        format!("{attribute} of {dataset_title}")
    }
}

/// Inverse of [`distribution_title`].
pub fn attribute_for_distribution(resource_name: &str, dataset_title: &str) -> Option<String> {
    let head = resource_name.strip_suffix(dataset_title)?.strip_suffix(" of ")?;
    if head == OCCUPANCY_PREFIX {
        Some(OCCUPANCY_ATTRIBUTE.to_string())
    } else if head.is_empty() {
        None
    } else {
        Some(head.to_string())
    }
}

/// Lower-cased entity type, with characters outside `[a-z0-9_-]` replaced by `-`.
pub fn organization_name(entity_type: &str) -> String {
    entity_type
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// First-sighting times per entity id, so `issued` never moves.
#[derive(Debug, Default)]
pub struct MetadataTracker {
    issued: Mutex<HashMap<EntityId, Timestamp>>,
}

impl MetadataTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn issued(&self, id: &EntityId, now: Timestamp) -> Timestamp {
        *self.issued.lock().entry(id.clone()).or_insert(now)
    }
}
