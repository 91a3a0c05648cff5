//! The two collaborating twins: the parking twin that publishes off-street
//! occupancy and the urban twin that consumes it, answers parking requests
//! and actuates spots.

mod actuation;
mod cosmos;
mod nearest;
pub mod relay;
mod scenario;
mod sim;

pub use actuation::{actuate_if_needed, availability, ActuationOutcome};
pub use cosmos::{Decision, OpLogEntry, RequestProcessor, RequestService, REQUEST_TYPE, RESPONSE_TYPE};
pub use nearest::{is_available, nearest_available, Target};
pub use relay::Relay;
pub use scenario::{report_without_timing, run_scenario, ScenarioReport};
pub use sim::{
    generate, simulate_occupancy, OccupancyRates, ParkingSeed, RequestSeed, ScenarioConfig, SimEvent, SpotSeed, World,
    SPOT_ID_BASE,
};

use crate::broker::BrokerError;
use crate::flow::FlowError;
use crate::iot_agent::IotError;
use crate::odp::PortalError;

pub const OFFSTREET_TYPE: &str = "OffStreetParking";
pub const SPOT_TYPE: &str = "ParkingSpot";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TwinError {
    #[error("no available parking")]
    NoneAvailable,
    #[error("invalid candidate {0}")]
    InvalidCandidate(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Iot(#[from] IotError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Portal(#[from] PortalError),
    #[error("i/o: {0}")]
    Io(String),
}
