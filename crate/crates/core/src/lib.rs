//! Deterministic discrete-event simulation of federated cloud providers.
//!
//! The crate models providers as datacenters of hosts running time-shared VMs,
//! per-provider coordinators that migrate excess VM requests across the
//! federation, an exchange that matches requests to provider offers, and a
//! cloud-burst provisioner that leases hourly-billed public VMs.

pub mod burst;
pub mod currency;
pub mod federation;
pub mod kernel;
pub mod market;
pub mod report;
pub mod resource;
pub mod scenario;

pub use currency::Cents;
pub use kernel::{Engine, EntityId, EntityKind, SimTime};
