//! Time sampling and run lifecycle.
//!
//! A [`Schedule`] is a set of half-open UTC windows, either listed explicitly
//! or expanded from a weekly template. The scheduler has no clock of its own:
//! the orchestrator asks [`Schedule::is_open`] and
//! [`Schedule::next_transition`] at the instants it processes.

use std::fmt;

use chrono::{Datelike, Duration, NaiveDate, NaiveTime, Weekday};
use serde::{Deserialize, Serialize};

use crate::Timestamp;

/// In-flight grace after a window closes, in minutes.
pub const DEFAULT_GRACE_MINUTES: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Window {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl Window {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recurring {
    pub days: Vec<Weekday>,
    pub start_hour: u32,
    pub end_hour: u32,
    pub from_date: NaiveDate,
    pub to_date: NaiveDate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Always,
    Windows(Vec<Window>),
    Recurring(Recurring),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("window starting {0} does not end after it starts")]
    EmptyWindow(Timestamp),
    #[error("windows starting {0} and {1} overlap")]
    Overlap(Timestamp, Timestamp),
    #[error("recurring template needs 0 <= start_hour < end_hour <= 24")]
    BadHours,
    #[error("recurring template needs from_date <= to_date and at least one day")]
    BadSpan,
}

impl Schedule {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        match self {
            Schedule::Always => Ok(()),
            Schedule::Windows(ws) => {
                let mut sorted = ws.clone();
                sorted.sort();
                for w in &sorted {
                    if w.start >= w.end {
                        return Err(ScheduleError::EmptyWindow(w.start));
                    }
                }
                for pair in sorted.windows(2) {
                    if pair[1].start < pair[0].end {
                        return Err(ScheduleError::Overlap(pair[0].start, pair[1].start));
                    }
                }
                Ok(())
            }
            Schedule::Recurring(r) => {
                if r.start_hour >= r.end_hour || r.end_hour > 24 {
                    return Err(ScheduleError::BadHours);
                }
                if r.from_date > r.to_date || r.days.is_empty() {
                    return Err(ScheduleError::BadSpan);
                }
                Ok(())
            }
        }
    }

    /// Sorted windows with touching neighbours merged, or `None` for an
    /// always-open schedule.
    pub fn expand(&self) -> Option<Vec<Window>> {
        let mut windows = match self {
            Schedule::Always => return None,
            Schedule::Windows(ws) => ws.clone(),
            Schedule::Recurring(r) => r
                .from_date
                .iter_days()
                .take_while(|d| *d <= r.to_date)
                .filter(|d| r.days.contains(&d.weekday()))
                .map(|d| {
                    let midnight = d.and_time(NaiveTime::MIN).and_utc();
                    Window {
                        start: midnight + Duration::hours(i64::from(r.start_hour)),
                        end: midnight + Duration::hours(i64::from(r.end_hour)),
                    }
                })
                .collect(),
        };
        windows.sort();
        let mut merged: Vec<Window> = Vec::with_capacity(windows.len());
        for w in windows {
            match merged.last_mut() {
                Some(last) if w.start <= last.end => last.end = last.end.max(w.end),
                _ => merged.push(w),
            }
        }
        Some(merged)
    }

    /// Start inclusive, end exclusive. An always-open schedule is open at every instant.
    pub fn is_open(&self, t: Timestamp) -> bool {
        match self.expand() {
            None => true,
            Some(ws) => {
                let idx = ws.partition_point(|w| w.end <= t);
                ws.get(idx).is_some_and(|w| w.contains(t))
            }
        }
    }

    /// The earliest instant strictly after `t` at which `is_open` flips.
    pub fn next_transition(&self, t: Timestamp) -> Option<Timestamp> {
        let ws = self.expand()?;
        let idx = ws.partition_point(|w| w.end <= t);
        let w = ws.get(idx)?;
        Some(if t < w.start { w.start } else { w.end })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunState {
    Draft,
    Deployed,
    Running,
    Paused,
    Completed,
    Aborted,
}

impl RunState {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Completed | RunState::Aborted)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunState::Draft => "DRAFT",
            RunState::Deployed => "DEPLOYED",
            RunState::Running => "RUNNING",
            RunState::Paused => "PAUSED",
            RunState::Completed => "COMPLETED",
            RunState::Aborted => "ABORTED",
        }
    }
}

impl fmt::Display for RunState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Deploy,
    Launch,
    Pause,
    Resume,
    Abort,
    DataComplete,
}

impl Action {
    fn target(self) -> RunState {
        match self {
            Action::Deploy => RunState::Deployed,
            Action::Launch | Action::Resume => RunState::Running,
            Action::Pause => RunState::Paused,
            Action::Abort => RunState::Aborted,
            Action::DataComplete => RunState::Completed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Cause {
    Manual,
    Schedule,
    DataComplete,
    /// The engine aborted the run after an unrecoverable routing error.
    Fault,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleEntry {
    pub state: RunState,
    pub at: Timestamp,
    pub cause: Cause,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransitionError {
    #[error("illegal transition {from} -> {to} ({action:?})")]
    Illegal {
        from: RunState,
        to: RunState,
        action: Action,
    },
    #[error("transition at {at} precedes the previous one")]
    Backwards { at: Timestamp },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLifecycle {
    pub state: RunState,
    pub history: Vec<LifecycleEntry>,
}

impl Default for RunLifecycle {
    fn default() -> Self {
        Self::new()
    }
}

impl RunLifecycle {
    pub fn new() -> Self {
        Self {
            state: RunState::Draft,
            history: Vec::new(),
        }
    }

    pub fn is_legal(from: RunState, action: Action) -> bool {
        use Action::*;
        use RunState::*;
        matches!(
            (from, action),
            (Draft, Deploy)
                | (Deployed, Launch)
                | (Running, Pause)
                | (Paused, Resume)
                | (Running, DataComplete)
                | (Deployed | Running | Paused, Abort)
        )
    }

    /// Cause of the most recent transition.
    pub fn last_cause(&self) -> Option<Cause> {
        self.history.last().map(|e| e.cause)
    }

    pub fn transition(&self, action: Action, cause: Cause, at: Timestamp) -> Result<Self, TransitionError> {
        if !Self::is_legal(self.state, action) {
            return Err(TransitionError::Illegal {
                from: self.state,
                to: action.target(),
                action,
            });
        }
        if self.history.last().is_some_and(|e| at < e.at) {
            return Err(TransitionError::Backwards { at });
        }
        let mut next = self.clone();
        next.state = action.target();
        next.history.push(LifecycleEntry {
            state: next.state,
            at,
            cause,
        });
        Ok(next)
    }
}
