use serde::{Deserialize, Serialize};

use super::{TwinError, OFFSTREET_TYPE, SPOT_TYPE};
use crate::entity::{Entity, EntityId};
use crate::geo::GeoPoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub id: EntityId,
    pub position: GeoPoint,
    pub distance_m: f64,
}

/// Off-street parkings are available with at least one free spot; street
/// spots only when `free`.
pub fn is_available(e: &Entity) -> Result<bool, TwinError> {
    match e.entity_type() {
        OFFSTREET_TYPE => Ok(e
            .attribute("availableSpotNumber")
            .and_then(|a| a.as_f64())
            .is_some_and(|n| n > 0.0)),
        SPOT_TYPE => Ok(e.attribute("status").and_then(|a| a.as_str()) == Some("free")),
        other => Err(TwinError::InvalidCandidate(format!(
            "{}: unsupported type {other}",
            e.id()
        ))),
    }
}

/// The closest available candidate; equal distances go to the lower id.
pub fn nearest_available(position: GeoPoint, candidates: &[Entity]) -> Result<Target, TwinError> {
    let mut best: Option<Target> = None;
    for e in candidates {
        let loc = e
            .location()
            .ok_or_else(|| TwinError::InvalidCandidate(format!("{} has no location", e.id())))?;
        if !is_available(e)? {
            continue;
        }
        let d = position.distance_m(&loc);
        let better = match &best {
            None => true,
            Some(b) => d < b.distance_m || (d == b.distance_m && e.id() < &b.id),
        };
        if better {
            best = Some(Target {
                id: e.id().clone(),
                position: loc,
                distance_m: d,
            });
        }
    }
    best.ok_or(TwinError::NoneAvailable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entity::Attribute;

    fn spot(n: u32, lat: f64, lon: f64, status: &str) -> Entity {
        Entity::new(EntityId::new(SPOT_TYPE, n).unwrap(), SPOT_TYPE)
            .unwrap()
            .with_attribute("location", Attribute::geo(GeoPoint::new(lat, lon).unwrap()))
            .unwrap()
            .with_attribute("status", Attribute::property(status))
            .unwrap()
    }

    #[test]
    fn tie_goes_to_lower_id() {
        let p = GeoPoint::new(40.0, -3.0).unwrap();
        let c = vec![spot(9, 40.001, -3.0, "free"), spot(10, 39.999, -3.0, "free")];
        // Both are 0.001 degrees of latitude away; distances may differ in
        // the last ulp, so only assert when they are exactly equal.
        let t = nearest_available(p, &c).unwrap();
        let d9 = p.distance_m(&c[0].location().unwrap());
        let d10 = p.distance_m(&c[1].location().unwrap());
        if d9 == d10 {
            assert_eq!(t.id.as_str(), "urn:ngsi-ld:ParkingSpot:10");
        }
        let same = vec![spot(9, 40.001, -3.0, "free"), spot(10, 40.001, -3.0, "free")];
        assert_eq!(
            nearest_available(p, &same).unwrap().id.as_str(),
            "urn:ngsi-ld:ParkingSpot:10"
        );
    }

    #[test]
    fn none_and_invalid() {
        let p = GeoPoint::new(40.0, -3.0).unwrap();
        assert_eq!(
            nearest_available(p, &[spot(1, 40.0, -3.0, "closed")]),
            Err(TwinError::NoneAvailable)
        );
        assert_eq!(nearest_available(p, &[]), Err(TwinError::NoneAvailable));
        let mut bad = spot(2, 40.0, -3.0, "free");
        bad.remove("location");
        assert!(matches!(
            nearest_available(p, &[bad]),
            Err(TwinError::InvalidCandidate(_))
        ));
    }
}
