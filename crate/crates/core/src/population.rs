//! Demographic quotas: hard caps on the share of a run's judgments that any
//! one attribute value (country) may contribute.
//!
//! Slots are reserved at admission and committed when the judgment arrives.
//! The cap for every value is `floor(cap_fraction * target_total)`, where
//! `target_total` is fixed when the run is deployed.

use std::collections::BTreeMap;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::Timestamp;

pub const DEFAULT_TTL_MINUTES: u32 = 30;

fn default_ttl() -> u32 {
    DEFAULT_TTL_MINUTES
}

fn default_attribute() -> String {
    "country".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaSpec {
    #[serde(default = "default_attribute")]
    pub attribute: String,
    pub cap_fraction: f64,
    #[serde(default = "default_ttl")]
    pub ttl_minutes: u32,
}

impl QuotaSpec {
    pub fn country(cap_fraction: f64) -> Self {
        Self {
            attribute: default_attribute(),
            cap_fraction,
            ttl_minutes: DEFAULT_TTL_MINUTES,
        }
    }

    /// Per-value slot count for a given run target.
    pub fn cap_for(&self, target_total: u64) -> u64 {
        // tolerate representation error in products like 0.2 * 100
        (self.cap_fraction * target_total as f64 + 1e-9).floor().max(0.0) as u64
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuotaError {
    #[error("cap_fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("quota infeasible: floor({cap_fraction} x {target_total}) = 0 slots per value")]
    Infeasible { cap_fraction: f64, target_total: u64 },
    #[error("unknown reservation `{0}`")]
    UnknownReservation(String),
    #[error("reservation `{0}` expired")]
    Expired(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotaCounts {
    pub committed: u64,
    pub reserved: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub value: String,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    Allow(String),
    DenyQuota,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaLedger {
    spec: QuotaSpec,
    target_total: u64,
    cap: u64,
    counts: BTreeMap<String, QuotaCounts>,
    reservations: BTreeMap<String, Reservation>,
    next_id: u64,
}

impl QuotaLedger {
    pub fn new(spec: QuotaSpec, target_total: u64) -> Result<Self, QuotaError> {
        if !(spec.cap_fraction > 0.0 && spec.cap_fraction <= 1.0) {
            return Err(QuotaError::InvalidFraction(spec.cap_fraction));
        }
        let cap = spec.cap_for(target_total);
        if cap == 0 {
            return Err(QuotaError::Infeasible {
                cap_fraction: spec.cap_fraction,
                target_total,
            });
        }
        Ok(Self {
            spec,
            target_total,
            cap,
            counts: BTreeMap::new(),
            reservations: BTreeMap::new(),
            next_id: 0,
        })
    }

    pub fn spec(&self) -> &QuotaSpec {
        &self.spec
    }

    pub fn target_total(&self) -> u64 {
        self.target_total
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }

    pub fn counts(&self, value: &str) -> QuotaCounts {
        self.counts.get(value).copied().unwrap_or_default()
    }

    pub fn all_counts(&self) -> &BTreeMap<String, QuotaCounts> {
        &self.counts
    }

    pub fn reservation(&self, id: &str) -> Option<&Reservation> {
        self.reservations.get(id)
    }

    fn ttl(&self) -> Duration {
        Duration::minutes(i64::from(self.spec.ttl_minutes))
    }

    /// Earliest instant at which some live reservation expires.
    pub fn next_expiry(&self) -> Option<Timestamp> {
        let ttl = self.ttl();
        self.reservations.values().map(|r| r.created_at + ttl).min()
    }

    /// Id the next successful [`admit`](Self::admit) will return.
    pub fn next_reservation_id(&self) -> String {
        format!("q{:06}", self.next_id + 1)
    }

    pub fn has_room(&self, value: &str) -> bool {
        let c = self.counts(value);
        c.committed + c.reserved < self.cap
    }

    /// Reserves a slot for `value` if the cap allows one more.
    pub fn admit(&mut self, value: &str, now: Timestamp) -> Admission {
        if !self.has_room(value) {
            return Admission::DenyQuota;
        }
        let id = self.next_reservation_id();
        self.next_id += 1;
        self.counts.entry(value.to_string()).or_default().reserved += 1;
        self.reservations.insert(
            id.clone(),
            Reservation {
                value: value.to_string(),
                created_at: now,
            },
        );
        Admission::Allow(id)
    }

    /// Converts a live reservation into a committed judgment.
    pub fn commit(&mut self, id: &str, now: Timestamp) -> Result<(), QuotaError> {
        let res = self
            .reservations
            .get(id)
            .ok_or_else(|| QuotaError::UnknownReservation(id.to_string()))?;
        if now - res.created_at >= self.ttl() {
            self.release(id)?;
            return Err(QuotaError::Expired(id.to_string()));
        }
        let res = self.reservations.remove(id).expect("checked above");
        let c = self.counts.get_mut(&res.value).expect("reserved value has counts");
        c.reserved -= 1;
        c.committed += 1;
        Ok(())
    }

    /// Returns an unused reservation's slot.
    pub fn release(&mut self, id: &str) -> Result<(), QuotaError> {
        let res = self
            .reservations
            .remove(id)
            .ok_or_else(|| QuotaError::UnknownReservation(id.to_string()))?;
        self.counts
            .get_mut(&res.value)
            .expect("reserved value has counts")
            .reserved -= 1;
        Ok(())
    }

    /// Releases every reservation whose age has reached the TTL.
    pub fn release_expired(&mut self, now: Timestamp) -> Vec<String> {
        let ttl = self.ttl();
        let expired: Vec<String> = self
            .reservations
            .iter()
            .filter(|(_, r)| now - r.created_at >= ttl)
            .map(|(id, _)| id.clone())
            .collect();
        for id in &expired {
            self.release(id).expect("listed reservation exists");
        }
        expired
    }
}

/// Quota gate for a run that may have no quota configured.
pub fn admit(ledger: Option<&mut QuotaLedger>, value: &str, now: Timestamp) -> Admission {
    match ledger {
        Some(l) => l.admit(value, now),
        None => Admission::Allow(String::new()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(min: i64) -> Timestamp {
        crate::parse_time("2019-05-01T00:00:00Z").unwrap() + Duration::minutes(min)
    }

    fn ledger(cap: f64, target: u64) -> QuotaLedger {
        QuotaLedger::new(QuotaSpec::country(cap), target).unwrap()
    }

    fn fill(l: &mut QuotaLedger, value: &str, n: u64) {
        for _ in 0..n {
            let Admission::Allow(id) = l.admit(value, t(0)) else {
                panic!("expected a slot")
            };
            l.commit(&id, t(0)).unwrap();
        }
    }

    #[test]
    fn cap_arithmetic() {
        let mut l = ledger(0.2, 100);
        fill(&mut l, "VE", 19);
        assert!(matches!(l.admit("VE", t(0)), Admission::Allow(_)));
        let mut l = ledger(0.2, 100);
        fill(&mut l, "VE", 20);
        assert_eq!(l.admit("VE", t(0)), Admission::DenyQuota);
        assert!(matches!(l.admit("EG", t(0)), Admission::Allow(_)));
    }

    #[test]
    fn caps_at_reference_scale() {
        assert_eq!(QuotaSpec::country(0.285).cap_for(6993), 1993);
        assert_eq!(QuotaSpec::country(0.15).cap_for(6993), 1048);
    }

    #[test]
    fn infeasible_cap() {
        assert!(matches!(
            QuotaLedger::new(QuotaSpec::country(0.01), 50),
            Err(QuotaError::Infeasible { .. })
        ));
        assert!(QuotaLedger::new(QuotaSpec::country(0.0), 50).is_err());
        assert!(QuotaLedger::new(QuotaSpec::country(1.5), 50).is_err());
    }

    #[test]
    fn commit_moves_reserved_to_committed() {
        let mut l = ledger(0.5, 10);
        let Admission::Allow(id) = l.admit("VE", t(0)) else { panic!() };
        assert_eq!(l.counts("VE"), QuotaCounts { committed: 0, reserved: 1 });
        l.commit(&id, t(1)).unwrap();
        assert_eq!(l.counts("VE"), QuotaCounts { committed: 1, reserved: 0 });
        assert_eq!(l.commit(&id, t(1)), Err(QuotaError::UnknownReservation(id)));
    }

    #[test]
    fn commit_after_expiry_fails_and_frees_slot() {
        let mut l = ledger(0.5, 10);
        let Admission::Allow(id) = l.admit("VE", t(0)) else { panic!() };
        assert_eq!(l.commit(&id, t(30)), Err(QuotaError::Expired(id)));
        assert_eq!(l.counts("VE"), QuotaCounts::default());
    }

    #[test]
    fn release_expired_cases() {
        let mut l = ledger(0.5, 10);
        assert!(l.release_expired(t(100)).is_empty());
        let Admission::Allow(old) = l.admit("VE", t(0)) else { panic!() };
        let Admission::Allow(_young) = l.admit("VE", t(20)) else { panic!() };
        assert_eq!(l.next_expiry(), Some(t(30)));
        assert_eq!(l.release_expired(t(29)), Vec::<String>::new());
        assert_eq!(l.release_expired(t(30)), vec![old]);
        assert_eq!(l.counts("VE").reserved, 1);
    }

    #[test]
    fn expiry_reopens_a_full_value() {
        // brute-force counter replay alongside the ledger
        let mut l = ledger(0.2, 10); // 2 slots
        let mut oracle_used = 0u64;
        let Admission::Allow(_a) = l.admit("VE", t(0)) else { panic!() };
        oracle_used += 1;
        let Admission::Allow(b) = l.admit("VE", t(5)) else { panic!() };
        oracle_used += 1;
        l.commit(&b, t(6)).unwrap();
        assert_eq!(oracle_used, 2);
        assert_eq!(l.admit("VE", t(10)), Admission::DenyQuota);
        let released = l.release_expired(t(31));
        assert_eq!(released.len(), 1);
        oracle_used -= 1;
        assert!(oracle_used < l.cap());
        assert!(matches!(l.admit("VE", t(31)), Admission::Allow(_)));
    }

    #[test]
    fn disabled_quota_always_allows() {
        for v in ["VE", "EG", ""] {
            assert!(matches!(admit(None, v, t(0)), Admission::Allow(_)));
        }
    }
}
