//! Persistence, HTTP API and command line for crowdflow runs.
//!
//! A [`Service`] owns a data directory holding workflow documents, run
//! records and one hash-chained event log per run. Opening it recovers every
//! run: a torn trailing line is cut off, the chain is verified, and the
//! valid prefix is replayed. A run whose log fails verification is marked
//! corrupt; it refuses actions but still reports over its valid prefix.
//! Simulated runs are brought back to life by re-executing the seeded
//! simulator up to the end of the recovered log.

pub mod api;
pub mod cli;
mod error;
mod runs;
mod service;
pub mod store;

pub use error::ServiceError;
pub use runs::{fingerprint_hash, Adapters, EventPage, NodeProgress, QuotaGauge, Recovery, RunStatus};
pub use service::{
    parse_policy, parse_quota, sim_epoch, DeployRequest, PolicyArg, RunSummary, Service, SimWindow,
    SimulateRequest, ValidationResult, DEFAULT_HORIZON_HOURS,
};
