//! Scenario configuration, seeded world generation and the occupancy
//! simulator. Everything here is pure: same config, same output.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{TwinError, OFFSTREET_TYPE, SPOT_TYPE};
use crate::entity::{Attribute, Entity, EntityId, CORE_CONTEXT};
use crate::geo::{BoundingBox, GeoPoint};
use crate::iot_agent::DeviceRegistration;

pub const SPOT_ID_BASE: u64 = 123;
pub const REQUEST_ID_BASE: u64 = 12345;
pub const PARKING_CONTEXT: &str =
    "https://raw.githubusercontent.com/smart-data-models/dataModel.Parking/master/context.jsonld";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyRates {
    pub arrival_per_min: f64,
    pub departure_per_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub rng_seed: u64,
    #[serde(default)]
    pub n_offstreet: usize,
    #[serde(default)]
    pub n_spots: usize,
    #[serde(default)]
    pub n_requests: usize,
    #[serde(default)]
    pub steps: usize,
    pub occupancy_rates: OccupancyRates,
    pub bounding_box: BoundingBox,
    #[serde(default = "default_threshold")]
    pub actuation_threshold: f64,
    #[serde(default = "default_max_age")]
    pub max_age_s: u64,
    /// Entities loaded verbatim before the generated ones.
    #[serde(default)]
    pub parkings: Vec<Value>,
    #[serde(default)]
    pub spots: Vec<Value>,
    #[serde(default)]
    pub requests: Vec<Value>,
}

fn default_threshold() -> f64 {
    0.2
}

fn default_max_age() -> u64 {
    3600
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, TwinError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TwinError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let cfg: ScenarioConfig =
            serde_json::from_str(&text).map_err(|e| TwinError::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TwinError> {
        let bad = |m: &str| Err(TwinError::InvalidConfig(m.to_string()));
        if !self.bounding_box.is_valid() {
            return bad("bounding_box corners are swapped");
        }
        if !(0.0..=1.0).contains(&self.actuation_threshold) {
            return bad("actuation_threshold must be in [0, 1]");
        }
        let r = self.occupancy_rates;
        if !(r.arrival_per_min >= 0.0
            && r.departure_per_min >= 0.0
            && r.arrival_per_min.is_finite()
            && r.departure_per_min.is_finite())
        {
            return bad("occupancy rates must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParkingSeed {
    pub entity: Entity,
    pub capacity: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpotSeed {
    pub entity: Entity,
    pub device: DeviceRegistration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestSeed {
    pub entity: Entity,
    pub position: GeoPoint,
}

/// Initial state of both twins plus the requests to issue.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct World {
    pub parkings: Vec<ParkingSeed>,
    pub spots: Vec<SpotSeed>,
    pub requests: Vec<RequestSeed>,
}

pub fn device_for(spot: &EntityId) -> String {
    format!("spot-{}", spot.suffix())
}

fn spot_device(e: &Entity) -> DeviceRegistration {
    let mut d = DeviceRegistration::new(device_for(e.id()), e.id().clone())
        .map("s", "status")
        .command("open", "open");
    if let Some(p) = e.location() {
        d = d.at(p);
    }
    d
}

fn random_point(rng: &mut ChaCha8Rng, bb: &BoundingBox) -> GeoPoint {
    let lat = rng.random_range(bb.south_west.lat()..=bb.north_east.lat());
    let lon = rng.random_range(bb.south_west.lon()..=bb.north_east.lon());
    GeoPoint::new(lat, lon).expect("inside a valid bounding box")
}

fn load_explicit(values: &[Value], ty: &str) -> Result<Vec<Entity>, TwinError> {
    values
        .iter()
        .map(|v| {
            let e = Entity::from_json(v).map_err(|e| TwinError::InvalidConfig(e.to_string()))?;
            if e.entity_type() != ty {
                return Err(TwinError::InvalidConfig(format!("{} should be of type {ty}", e.id())));
            }
            Ok(e)
        })
        .collect()
}

/// Builds the initial world: explicit entities first, then generated ones
/// numbered after them.
pub fn generate(cfg: &ScenarioConfig) -> Result<World, TwinError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let bb = &cfg.bounding_box;
    let mut world = World::default();
    let mut ids = BTreeSet::new();

    for e in load_explicit(&cfg.parkings, OFFSTREET_TYPE)? {
        let cap = ["totalSpotNumber", "availableSpotNumber"]
            .iter()
            .find_map(|a| e.attribute(a).and_then(|a| a.as_f64()))
            .unwrap_or(0.0) as i64;
        world.parkings.push(ParkingSeed {
            entity: e,
            capacity: cap,
        });
    }
    let first = world.parkings.len() as u64 + 1;
    for i in 0..cfg.n_offstreet as u64 {
        let total: i64 = rng.random_range(50..=300);
        let free: i64 = rng.random_range(0..=total);
        let n = first + i;
        let e = Entity::new(EntityId::new(OFFSTREET_TYPE, n).expect("valid id"), OFFSTREET_TYPE)
            .and_then(|e| e.with_attribute("location", Attribute::geo(random_point(&mut rng, bb))))
            .and_then(|e| e.with_attribute("availableSpotNumber", Attribute::property(free)))
            .and_then(|e| e.with_attribute("totalSpotNumber", Attribute::property(total)))
            .map(|e| e.with_context(PARKING_CONTEXT))
            .expect("generated parking is valid");
        world.parkings.push(ParkingSeed {
            entity: e,
            capacity: total,
        });
    }

    for e in load_explicit(&cfg.spots, SPOT_TYPE)? {
        world.spots.push(SpotSeed {
            device: spot_device(&e),
            entity: e,
        });
    }
    let first = SPOT_ID_BASE + world.spots.len() as u64;
    for i in 0..cfg.n_spots as u64 {
        let roll: f64 = rng.random();
        let status = if roll < 0.45 {
            "free"
        } else if roll < 0.9 {
            "occupied"
        } else {
            "closed"
        };
        let e = Entity::new(EntityId::new(SPOT_TYPE, first + i).expect("valid id"), SPOT_TYPE)
            .and_then(|e| e.with_attribute("location", Attribute::geo(random_point(&mut rng, bb))))
            .and_then(|e| e.with_attribute("status", Attribute::property(status)))
            .map(|e| e.with_context(PARKING_CONTEXT))
            .expect("generated spot is valid");
        world.spots.push(SpotSeed {
            device: spot_device(&e),
            entity: e,
        });
    }

    for e in load_explicit(&cfg.requests, super::REQUEST_TYPE)? {
        let position = e
            .location()
            .ok_or_else(|| TwinError::InvalidConfig(format!("{} has no location", e.id())))?;
        world.requests.push(RequestSeed { entity: e, position });
    }
    let first = REQUEST_ID_BASE + world.requests.len() as u64;
    for i in 0..cfg.n_requests as u64 {
        let position = random_point(&mut rng, bb);
        let e = Entity::new(
            EntityId::new(super::REQUEST_TYPE, first + i).expect("valid id"),
            super::REQUEST_TYPE,
        )
        .and_then(|e| e.with_attribute("location", Attribute::geo(position)))
        .map(|e| e.with_context(CORE_CONTEXT))
        .expect("generated request is valid");
        world.requests.push(RequestSeed { entity: e, position });
    }

    for id in world
        .parkings
        .iter()
        .map(|p| &p.entity)
        .chain(world.spots.iter().map(|s| &s.entity))
        .chain(world.requests.iter().map(|r| &r.entity))
        .map(Entity::id)
    {
        if !ids.insert(id.clone()) {
            return Err(TwinError::InvalidConfig(format!("duplicate entity {id}")));
        }
    }
    for r in &world.requests {
        if !bb.contains(&r.position) {
            return Err(TwinError::InvalidConfig(format!(
                "{} lies outside the bounding box",
                r.entity.id()
            )));
        }
    }
    Ok(world)
}

/// One simulated write. Spot writes go through the device gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub step: usize,
    pub entity: EntityId,
    pub attribute: String,
    pub value: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
}

impl SimEvent {
    /// The measurement line a sensor would send for this event.
    pub fn device_line(&self) -> Option<String> {
        let d = self.device.as_ref()?;
        Some(format!("{d}|s|{}", self.value.as_str()?))
    }
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> i64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map(|p| p.sample(rng) as i64).unwrap_or(0)
}

/// Each step picks one parking or spot uniformly and writes it: parkings
/// move by departures minus arrivals within `[0, capacity]`, spots flip
/// between free and occupied, closed spots stay closed. Every step writes,
/// even when the value does not change.
pub fn simulate_occupancy(cfg: &ScenarioConfig, world: &World, steps: usize) -> Vec<SimEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(1);
    let mut free: Vec<i64> = world
        .parkings
        .iter()
        .map(|p| {
            p.entity
                .attribute("availableSpotNumber")
                .and_then(|a| a.as_f64())
                .unwrap_or(0.0) as i64
        })
        .collect();
    let mut status: Vec<String> = world
        .spots
        .iter()
        .map(|s| {
            s.entity
                .attribute("status")
                .and_then(|a| a.as_str())
                .unwrap_or("free")
                .to_string()
        })
        .collect();
    let n = free.len() + status.len();
    let mut trace = Vec::with_capacity(steps);
    if n == 0 {
        return trace;
    }
    for step in 0..steps {
        let k = rng.random_range(0..n);
        if k < free.len() {
            let p = &world.parkings[k];
            let arrivals = poisson(&mut rng, cfg.occupancy_rates.arrival_per_min);
            let departures = poisson(&mut rng, cfg.occupancy_rates.departure_per_min);
            free[k] = (free[k] - arrivals + departures).clamp(0, p.capacity.max(0));
            trace.push(SimEvent {
                step,
                entity: p.entity.id().clone(),
                attribute: "availableSpotNumber".into(),
                value: Value::from(free[k]),
                device: None,
            });
        } else {
            let j = k - free.len();
            let s = &world.spots[j];
            status[j] = match status[j].as_str() {
                "free" => "occupied".into(),
                "occupied" => "free".into(),
                other => other.to_string(),
            };
            trace.push(SimEvent {
                step,
                entity: s.entity.id().clone(),
                attribute: "status".into(),
                value: Value::from(status[j].clone()),
                device: Some(s.device.device_id.clone()),
            });
        }
    }
    trace
}
