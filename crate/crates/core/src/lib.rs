//! Digital-twin federation stack built around Linked Open Data.
//!
//! Components:
//! - [`broker`]: NGSI-LD context broker with publish-subscribe notifications.
//! - [`access`]: client-credentials token service and PEP proxy.
//! - [`odp`]: open-data portal with a CKAN-style action API and DCAT export.
//! - [`iot_agent`]: device gateway for line-oriented measurements and commands.
//! - [`flow`]: processor graph that publishes twin state as open data and pulls it back.
//! - [`twin`]: occupancy simulation, nearest-parking requests, actuation and the event relay.
//! - [`stack`]: runs all services in one process.

pub mod access;
pub mod broker;
pub mod entity;
pub mod flow;
pub mod geo;
pub mod idle;
pub mod iot_agent;
pub mod odp;
pub mod stack;
pub mod time;
pub mod twin;
