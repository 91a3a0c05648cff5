use serde::{Deserialize, Serialize};

use super::{TwinError, SPOT_TYPE};
use crate::entity::{Entity, EntityId};
use crate::iot_agent::CommandSink;

pub const OPEN_COMMAND: &str = "open";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuationOutcome {
    pub fraction_before: f64,
    /// Fraction expected once every issued command has taken effect.
    pub fraction_after: f64,
    pub opened: Vec<EntityId>,
    pub payloads: Vec<String>,
}

/// Free spots over all spots; `None` for an empty district.
pub fn availability(spots: &[Entity]) -> Option<f64> {
    let spots: Vec<_> = spots.iter().filter(|e| e.entity_type() == SPOT_TYPE).collect();
    if spots.is_empty() {
        return None;
    }
    let free = spots
        .iter()
        .filter(|e| e.attribute("status").and_then(|a| a.as_str()) == Some("free"))
        .count();
    Some(free as f64 / spots.len() as f64)
}

/// Opens closed spots in ascending id order while the free fraction is
/// below `threshold`.
pub async fn actuate_if_needed(
    spots: &[Entity],
    threshold: f64,
    sink: &dyn CommandSink,
) -> Result<ActuationOutcome, TwinError> {
    let Some(before) = availability(spots) else {
        return Ok(ActuationOutcome {
            fraction_before: 0.0,
            fraction_after: 0.0,
            opened: Vec::new(),
            payloads: Vec::new(),
        });
    };
    let total = spots.iter().filter(|e| e.entity_type() == SPOT_TYPE).count() as f64;
    let mut free = (before * total).round();
    let mut closed: Vec<&EntityId> = spots
        .iter()
        .filter(|e| e.entity_type() == SPOT_TYPE && e.attribute("status").and_then(|a| a.as_str()) == Some("closed"))
        .map(Entity::id)
        .collect();
    closed.sort();
    let mut out = ActuationOutcome {
        fraction_before: before,
        fraction_after: before,
        opened: Vec::new(),
        payloads: Vec::new(),
    };
    for id in closed {
        if free / total >= threshold {
            break;
        }
        out.payloads.push(sink.send_command(id, OPEN_COMMAND).await?);
        out.opened.push(id.clone());
        free += 1.0;
        out.fraction_after = free / total;
    }
    Ok(out)
}
