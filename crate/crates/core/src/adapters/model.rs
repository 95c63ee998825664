//! The behavioral parameters of the simulated crowd.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::Timestamp;

/// Lognormal decision time: `median * exp(dispersion * Z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionTimeParams {
    pub median_seconds: f64,
    pub dispersion: f64,
}

/// Smooth multiplicative drift of decision-time medians across days:
/// `exp(log_amplitude * sin(2 pi (day + phase_days) / period_days))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub log_amplitude: f64,
    pub period_days: f64,
    #[serde(default)]
    pub phase_days: f64,
}

impl Drift {
    pub fn none() -> Self {
        Self {
            log_amplitude: 0.0,
            period_days: 1.0,
            phase_days: 0.0,
        }
    }

    pub fn factor(&self, t: &Timestamp) -> f64 {
        let days = t.timestamp_millis() as f64 / 86_400_000.0;
        (self.log_amplitude * (2.0 * PI * (days + self.phase_days) / self.period_days).sin()).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdModel {
    pub population_size: u32,
    pub country_mix: BTreeMap<String, f64>,
    /// Per-country 24 weights indexed by local hour. Countries without an
    /// entry use `default_activity_curve`.
    #[serde(default)]
    pub activity_curve: BTreeMap<String, Vec<f64>>,
    pub default_activity_curve: Vec<f64>,
    /// Expected arrivals per hour when every country is at its curve peak.
    pub base_arrival_rate: f64,
    pub p_return: f64,
    pub p_cross_seek: f64,
    /// Keyed by group id.
    #[serde(default)]
    pub decision_time: BTreeMap<String, DecisionTimeParams>,
    pub default_decision_time: DecisionTimeParams,
    pub returning_time_multiplier: f64,
    /// Keyed by group id.
    #[serde(default)]
    pub accuracy: BTreeMap<String, f64>,
    pub default_accuracy: f64,
    pub drift: Drift,
    /// Probability that a worker asks for another unit after a judgment.
    pub p_continue: f64,
    /// Pause between a judgment and the next request, in seconds.
    pub think_time_seconds: f64,
    /// Probability that an assigned unit is silently dropped.
    pub p_silent_abandon: f64,
    /// Probability that a returning person shows up under a new platform id.
    pub p_fresh_platform_id: f64,
    pub trust_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("`{field}` must be a probability, got {value}")]
    Probability { field: String, value: f64 },
    #[error("country_mix sums to {0}, expected 1")]
    MixSum(f64),
    #[error("activity curve `{0}` must hold 24 non-negative weights with a positive peak")]
    Curve(String),
    #[error("`{0}` must be positive")]
    NonPositive(String),
    #[error("population_size must cover at least one person per country")]
    Population,
}

/// Cosine bump over the day: 1.0 at `peak_hour`, `floor` twelve hours away.
pub fn evening_curve(peak_hour: f64, floor: f64) -> Vec<f64> {
    (0..24)
        .map(|h| {
            let bump = (1.0 + (2.0 * PI * (f64::from(h) - peak_hour) / 24.0).cos()) / 2.0;
            floor + (1.0 - floor) * bump
        })
        .collect()
}

fn prob(field: &str, value: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ModelError::Probability {
            field: field.to_string(),
            value,
        })
    }
}

fn positive(field: &str, value: f64) -> Result<(), ModelError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonPositive(field.to_string()))
    }
}

fn curve(name: &str, c: &[f64]) -> Result<(), ModelError> {
    let peak = c.iter().cloned().fold(0.0, f64::max);
    if c.len() != 24 || c.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || peak <= 0.0 {
        return Err(ModelError::Curve(name.to_string()));
    }
    Ok(())
}

impl CrowdModel {
    /// The frozen calibrated model used by the bias-reproduction scenarios.
    pub fn calibrated() -> Self {
        let mix = [
            ("VE", 0.285),
            ("EG", 0.118),
            ("UA", 0.078),
            ("IN", 0.052),
            ("RU", 0.048),
            ("BR", 0.045),
            ("US", 0.042),
            ("RS", 0.04),
            ("TR", 0.038),
            ("PH", 0.036),
            ("ID", 0.034),
            ("BD", 0.032),
            ("MX", 0.03),
            ("RO", 0.028),
            ("CO", 0.026),
            ("PK", 0.024),
            ("VN", 0.022),
            ("KE", 0.021),
            ("NG", 0.021),
        ];
        let total: f64 = mix.iter().map(|(_, p)| p).sum();
        Self {
            population_size: 5000,
            country_mix: mix.iter().map(|(c, p)| (c.to_string(), p / total)).collect(),
            activity_curve: BTreeMap::new(),
            default_activity_curve: evening_curve(20.0, 0.3),
            base_arrival_rate: 40.0,
            p_return: 0.5,
            p_cross_seek: 0.65,
            decision_time: BTreeMap::new(),
            default_decision_time: DecisionTimeParams {
                median_seconds: 20.0,
                dispersion: 0.5,
            },
            returning_time_multiplier: 0.7,
            accuracy: BTreeMap::new(),
            default_accuracy: 0.8,
            // exp(2 * 0.265) ~ 1.7 between trough and crest
            drift: Drift {
                log_amplitude: 0.265,
                period_days: 3.0,
                phase_days: 0.0,
            },
            p_continue: 0.85,
            think_time_seconds: 5.0,
            p_silent_abandon: 0.01,
            p_fresh_platform_id: 0.02,
            trust_range: (0.6, 1.0),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (c, p) in &self.country_mix {
            prob(&format!("country_mix.{c}"), *p)?;
        }
        let sum: f64 = self.country_mix.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::MixSum(sum));
        }
        if (self.population_size as usize) < self.country_mix.len() {
            return Err(ModelError::Population);
        }
        curve("default", &self.default_activity_curve)?;
        for (c, w) in &self.activity_curve {
            curve(c, w)?;
        }
        positive("base_arrival_rate", self.base_arrival_rate)?;
        prob("p_return", self.p_return)?;
        prob("p_cross_seek", self.p_cross_seek)?;
        prob("default_accuracy", self.default_accuracy)?;
        for (g, a) in &self.accuracy {
            prob(&format!("accuracy.{g}"), *a)?;
        }
        positive("default_decision_time.median_seconds", self.default_decision_time.median_seconds)?;
        for (g, d) in &self.decision_time {
            positive(&format!("decision_time.{g}.median_seconds"), d.median_seconds)?;
        }
        positive("returning_time_multiplier", self.returning_time_multiplier)?;
        positive("drift.period_days", self.drift.period_days)?;
        prob("p_continue", self.p_continue)?;
        prob("p_silent_abandon", self.p_silent_abandon)?;
        prob("p_fresh_platform_id", self.p_fresh_platform_id)?;
        positive("think_time_seconds", self.think_time_seconds)?;
        let (lo, hi) = self.trust_range;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(ModelError::Probability {
                field: "trust_range".into(),
                value: hi,
            });
        }
        Ok(())
    }

    pub fn curve_for(&self, country: &str) -> &[f64] {
        self.activity_curve
            .get(country)
            .unwrap_or(&self.default_activity_curve)
    }

    pub fn decision_time_for(&self, group: &str) -> DecisionTimeParams {
        self.decision_time
            .get(group)
            .copied()
            .unwrap_or(self.default_decision_time)
    }

    pub fn accuracy_for(&self, group: &str) -> f64 {
        self.accuracy.get(group).copied().unwrap_or(self.default_accuracy)
    }

    /// Largest value any country's curve can take, normalized so the
    /// arrival intensity never exceeds `base_arrival_rate`.
    pub(crate) fn curve_peak(&self, country: &str) -> f64 {
        self.curve_for(country).iter().cloned().fold(0.0, f64::max)
    }
}
