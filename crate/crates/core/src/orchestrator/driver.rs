//! Couples a run to an adapter and a log, and advances both in time order.

use super::engine::{deploy, Step};
use super::events::{EventLog, RunConfig};
use super::state::Run;
use super::OrchestratorError;
use crate::adapters::{Adapter, AdapterError, AdapterEvent};
use crate::scheduler::{Action, Cause, RunState};
use crate::Timestamp;

pub struct Driver<A: Adapter> {
    pub run: Run,
    pub log: EventLog,
    pub adapter: A,
    pub now: Timestamp,
}

impl<A: Adapter> Driver<A> {
    /// Deploys the run, creates the stage-0 tasks and records their refs.
    pub fn deploy(config: RunConfig, adapter: A, at: Timestamp) -> Result<Self, OrchestratorError> {
        let (run, step) = deploy(config, at)?;
        let mut d = Self {
            run,
            log: EventLog::new(),
            adapter,
            now: at,
        };
        d.commit(step)?;
        while let Some(ev) = d.adapter.next_event(at)? {
            d.feed(&ev)?;
        }
        Ok(d)
    }

    /// Resumes driving a run rebuilt from its log.
    pub fn resume(run: Run, log: EventLog, adapter: A) -> Self {
        let now = run.last_time;
        Self { run, log, adapter, now }
    }

    pub fn act(&mut self, action: Action) -> Result<Step, OrchestratorError> {
        let step = self.run.act(action, self.now)?;
        self.commit(step.clone())?;
        Ok(step)
    }

    /// Aborts the run with a warning carrying `message`.
    pub fn fail(&mut self, message: &str) -> Result<Step, OrchestratorError> {
        let step = self.run.fail(self.now, message)?;
        self.commit(step.clone())?;
        Ok(step)
    }

    /// Feeds one adapter event into the run.
    pub fn feed(&mut self, event: &AdapterEvent) -> Result<Step, OrchestratorError> {
        self.now = self.now.max(event.time);
        let step = self.run.handle(event)?;
        self.commit(step.clone())?;
        Ok(step)
    }

    /// Logs the events of a step and executes its commands. A command the
    /// adapter cannot serve is logged as a warning; an authentication failure
    /// aborts the run.
    fn commit(&mut self, step: Step) -> Result<(), OrchestratorError> {
        for ev in &step.events {
            self.log.append(ev);
        }
        for cmd in &step.commands {
            if let Err(e) = self.adapter.execute(self.now, cmd) {
                let message = format!("{} failed: {e}", cmd.kind());
                let follow = match e {
                    AdapterError::Auth(_) => self.run.fail(self.now, &message)?,
                    _ => self.run.warn(self.now, &message)?,
                };
                for ev in &follow.events {
                    self.log.append(ev);
                }
                for cmd in &follow.commands {
                    let _ = self.adapter.execute(self.now, cmd);
                }
            }
        }
        Ok(())
    }

    /// Earliest instant at which a clock tick changes something: a
    /// reservation expiry or a schedule boundary the run still has to act on.
    pub fn next_tick(&self) -> Option<Timestamp> {
        let schedule = &self.run.config.schedule;
        let open = schedule.is_open(self.now);
        let boundary = match self.run.state() {
            RunState::Running if !open => Some(self.now),
            RunState::Paused if self.run.lifecycle.last_cause() == Some(Cause::Schedule) && open => Some(self.now),
            RunState::Running | RunState::Paused => schedule.next_transition(self.now),
            _ => None,
        };
        match (self.run.next_expiry(), boundary) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Processes the next input before `until`. Returns false once nothing is
    /// left to do in that span, with the clock moved to `until`.
    pub fn step(&mut self, until: Timestamp) -> Result<bool, OrchestratorError> {
        if self.run.state().is_terminal() {
            return Ok(false);
        }
        let tick = self.next_tick().filter(|t| *t <= until);
        let horizon = tick.unwrap_or(until).max(self.now);
        if let Some(ev) = self.adapter.next_event(horizon)? {
            self.feed(&ev)?;
            return Ok(true);
        }
        if let Some(t) = tick {
            self.feed(&AdapterEvent::tick(t.max(self.now)))?;
            return Ok(true);
        }
        self.now = self.now.max(until);
        Ok(false)
    }

    /// Drives the run until `until` or until it ends.
    pub fn run_until(&mut self, until: Timestamp) -> Result<RunState, OrchestratorError> {
        while self.step(until)? {}
        Ok(self.run.state())
    }
}
