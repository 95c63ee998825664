//! Experiment orchestration for crowdsourcing task-design evaluation.
//!
//! A run executes a [`workflow::Workflow`] over a crowd platform
//! [`adapters::Adapter`] while the admission pipeline enforces time windows
//! ([`scheduler`]), population filters and eligibility policies
//! ([`eligibility`]) and demographic quotas ([`population`]). Every decision
//! is appended to a hash-chained event log ([`orchestrator`]) from which the
//! run state can be replayed and bias metrics computed ([`analytics`]).

pub mod adapters;
pub mod analytics;
pub mod canonical;
pub mod fixtures;
pub mod geo;
pub mod orchestrator;
pub mod workflow;
pub mod eligibility;
pub mod population;
pub mod scenarios;
pub mod scheduler;

use chrono::{DateTime, SecondsFormat, Utc};

/// All instants are UTC.
pub type Timestamp = DateTime<Utc>;

/// Parses an RFC 3339 timestamp and normalizes it to UTC.
pub fn parse_time(s: &str) -> Result<Timestamp, chrono::ParseError> {
    DateTime::parse_from_rfc3339(s).map(|t| t.with_timezone(&Utc))
}

/// RFC 3339 with millisecond precision and a `Z` suffix.
pub fn format_time(t: &Timestamp) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}
