//! Agent-level admission control.
//!
//! [`ControllerState`] is a passive state machine: the caller feeds it
//! cache signals at every control tick and asks for an admission pass at
//! step boundaries. All mutation must be externally serialized.
//!
//! The cache-aware policy moves a real-valued window `W` with an
//! additive-increase / multiplicative-decrease rule:
//!
//! ```text
//! W' = W + alpha    if U < u_low
//! W' = W * beta     if U > u_high and H < h_thresh
//! W' = W            otherwise
//! ```
//!
//! clamped to `[w_min, w_max]`. Only `floor(W)` agents may be active.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type AgentId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("invalid controller config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Agents added per tick while under-utilized.
    pub alpha: f64,
    /// Multiplicative cut applied on congestion, in (0, 1).
    pub beta: f64,
    pub u_low: f64,
    pub u_high: f64,
    pub h_thresh: f64,
    pub w_min: f64,
    /// Defaults to the population size when unset.
    pub w_max: Option<f64>,
    /// Starting window; defaults to `w_min`.
    pub initial_window: Option<f64>,
    /// Simulated seconds between control ticks.
    pub control_interval: f64,
    /// Exponential smoothing weight on past signals; 0 uses raw samples.
    pub signal_smoothing: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 0.5,
            u_low: 0.2,
            u_high: 0.5,
            h_thresh: 0.2,
            w_min: 1.0,
            w_max: None,
            initial_window: None,
            control_interval: 1.0,
            signal_smoothing: 0.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let err = |m: String| Err(ControllerError::Config(m));
        // u_low == u_high is allowed: the threshold sweep probes (0.5, 0.5).
        if !(0.0 <= self.u_low && self.u_low <= self.u_high && self.u_high <= 1.0) {
            return err(format!(
                "need 0 <= u_low <= u_high <= 1, got u_low={} u_high={}",
                self.u_low, self.u_high
            ));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return err(format!("beta must be in (0, 1), got {}", self.beta));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return err(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.h_thresh) {
            return err(format!("h_thresh must be in [0, 1], got {}", self.h_thresh));
        }
        if self.w_min < 1.0 {
            return err(format!("w_min must be >= 1, got {}", self.w_min));
        }
        if let Some(w_max) = self.w_max {
            if w_max < self.w_min {
                return err(format!("w_max {w_max} below w_min {}", self.w_min));
            }
        }
        if !(self.control_interval > 0.0 && self.control_interval.is_finite()) {
            return err(format!(
                "control_interval must be > 0, got {}",
                self.control_interval
            ));
        }
        if !(0.0..1.0).contains(&self.signal_smoothing) {
            return err(format!(
                "signal_smoothing must be in [0, 1), got {}",
                self.signal_smoothing
            ));
        }
        Ok(())
    }

    pub fn window_bounds(&self, total_agents: usize) -> (f64, f64) {
        let w_max = self.w_max.unwrap_or(total_agents as f64).max(self.w_min);
        (self.w_min, w_max)
    }
}

/// Cache feedback sampled at a control tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Signals {
    pub usage: f64,
    pub hit_rate: f64,
}

/// Unclamped transition. Both inequalities are strict.
pub fn aimd_transition(window: f64, cfg: &ControllerConfig, s: Signals) -> f64 {
    if s.usage < cfg.u_low {
        window + cfg.alpha
    } else if s.usage > cfg.u_high && s.hit_rate < cfg.h_thresh {
        window * cfg.beta
    } else {
        window
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    /// Every request is admitted immediately.
    Uncontrolled,
    /// At most `n` generation requests in flight; an agent coming back from
    /// a tool call queues behind everyone else.
    FixedRequestCap(usize),
    /// At most `n` agents admitted; admission persists across tool calls.
    FixedAgentCap(usize),
    CacheAwareAimd(ControllerConfig),
}

impl Policy {
    /// Whether admission is held for an agent's whole lifetime rather than
    /// per request.
    pub fn is_agent_level(&self) -> bool {
        matches!(self, Policy::FixedAgentCap(_) | Policy::CacheAwareAimd(_))
    }

    pub fn name(&self) -> String {
        match self {
            Policy::Uncontrolled => "uncontrolled".into(),
            Policy::FixedRequestCap(n) => format!("request_cap({n})"),
            Policy::FixedAgentCap(n) => format!("agent_cap({n})"),
            Policy::CacheAwareAimd(_) => "aimd".into(),
        }
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        match *self {
            Policy::FixedRequestCap(0) | Policy::FixedAgentCap(0) => Err(ControllerError::Config(
                "fixed caps must be at least 1".into(),
            )),
            Policy::CacheAwareAimd(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Admit(AgentId),
    Pause(AgentId),
    Resume(AgentId),
}

#[derive(Debug, Clone)]
pub struct ControllerState {
    policy: Policy,
    window: f64,
    w_min: f64,
    w_max: f64,
    /// Admitted agents in admission order.
    active: Vec<AgentId>,
    pending: VecDeque<AgentId>,
    paused: VecDeque<AgentId>,
    tick_count: u64,
    smoothed: Option<Signals>,
}

impl ControllerState {
    pub fn new(policy: Policy, total_agents: usize) -> Self {
        let (w_min, w_max, window) = match policy {
            Policy::CacheAwareAimd(cfg) => {
                let (lo, hi) = cfg.window_bounds(total_agents);
                (lo, hi, cfg.initial_window.unwrap_or(lo).clamp(lo, hi))
            }
            Policy::FixedAgentCap(n) | Policy::FixedRequestCap(n) => (n as f64, n as f64, n as f64),
            Policy::Uncontrolled => {
                let n = total_agents.max(1) as f64;
                (n, n, n)
            }
        };
        Self {
            policy,
            window,
            w_min,
            w_max,
            active: Vec::new(),
            pending: VecDeque::new(),
            paused: VecDeque::new(),
            tick_count: 0,
            smoothed: None,
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    pub fn active(&self) -> &[AgentId] {
        &self.active
    }

    pub fn pending(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.pending.iter().copied()
    }

    pub fn paused(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.paused.iter().copied()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn paused_len(&self) -> usize {
        self.paused.len()
    }

    pub fn tick_count(&self) -> u64 {
        self.tick_count
    }

    pub fn is_active(&self, id: AgentId) -> bool {
        self.active.contains(&id)
    }

    pub fn is_paused(&self, id: AgentId) -> bool {
        self.paused.contains(&id)
    }

    /// Concurrency limit in force, `None` when unbounded.
    pub fn limit(&self) -> Option<usize> {
        match self.policy {
            Policy::Uncontrolled => None,
            Policy::FixedRequestCap(n) | Policy::FixedAgentCap(n) => Some(n),
            Policy::CacheAwareAimd(_) => Some(self.window.floor() as usize),
        }
    }

    /// Queues an agent that wants to issue a generation request.
    pub fn enqueue(&mut self, id: AgentId) {
        debug_assert!(!self.pending.contains(&id) && !self.is_active(id));
        self.pending.push_back(id);
    }

    /// Applies one control-law step for the cache-aware policy and returns
    /// the new window. Other policies keep their window fixed.
    pub fn update_window(&mut self, signals: Signals) -> f64 {
        self.tick_count += 1;
        let Policy::CacheAwareAimd(cfg) = self.policy else {
            return self.window;
        };
        let s = match self.smoothed {
            Some(prev) if cfg.signal_smoothing > 0.0 => {
                let k = cfg.signal_smoothing;
                Signals {
                    usage: k * prev.usage + (1.0 - k) * signals.usage,
                    hit_rate: k * prev.hit_rate + (1.0 - k) * signals.hit_rate,
                }
            }
            _ => signals,
        };
        self.smoothed = Some(s);
        self.window = aimd_transition(self.window, &cfg, s).clamp(self.w_min, self.w_max);
        self.window
    }

    /// Brings the active set in line with the limit. Over the limit, the
    /// most recently admitted agents that sit at a step boundary are paused;
    /// under it, paused agents resume first, then pending agents are admitted
    /// in arrival order.
    pub fn admission_pass(&mut self, at_boundary: impl Fn(AgentId) -> bool) -> Vec<Command> {
        let mut cmds = Vec::new();
        let limit = self.limit().unwrap_or(usize::MAX);

        if self.policy.is_agent_level() {
            let mut i = self.active.len();
            while self.active.len() > limit && i > 0 {
                i -= 1;
                let id = self.active[i];
                if at_boundary(id) {
                    self.active.remove(i);
                    self.paused.push_back(id);
                    cmds.push(Command::Pause(id));
                }
            }
        }

        while self.active.len() < limit {
            if let Some(id) = self.paused.pop_front() {
                self.active.push(id);
                cmds.push(Command::Resume(id));
            } else if let Some(id) = self.pending.pop_front() {
                self.active.push(id);
                cmds.push(Command::Admit(id));
            } else {
                break;
            }
        }
        cmds
    }

    /// Request-level bookkeeping: the agent's in-flight request is done, so
    /// it gives up its admission until it queues again.
    pub fn on_request_complete(&mut self, id: AgentId) -> Result<(), ControllerError> {
        if self.policy.is_agent_level() {
            return Ok(());
        }
        self.remove_active(id)
    }

    pub fn on_agent_finished(&mut self, id: AgentId) -> Result<(), ControllerError> {
        if self.policy.is_agent_level() {
            self.remove_active(id)
        } else {
            // A request-level agent already left the active set when its last
            // request completed.
            match self.remove_active(id) {
                Ok(()) | Err(ControllerError::UnknownAgent(_)) => Ok(()),
                Err(e) => Err(e),
            }
        }
    }

    fn remove_active(&mut self, id: AgentId) -> Result<(), ControllerError> {
        let pos = self
            .active
            .iter()
            .position(|&a| a == id)
            .ok_or(ControllerError::UnknownAgent(id))?;
        self.active.remove(pos);
        Ok(())
    }

    /// Disjointness of active, pending and paused, window bounds, and the
    /// admission cap (modulo agents that could not yet be paused).
    pub fn check_invariants(&self, at_boundary: impl Fn(AgentId) -> bool) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for id in self
            .active
            .iter()
            .chain(self.pending.iter())
            .chain(self.paused.iter())
        {
            if !seen.insert(*id) {
                return Err(format!("agent {id} appears in more than one set"));
            }
        }
        if !(self.w_min <= self.window && self.window <= self.w_max) {
            return Err(format!(
                "window {} outside [{}, {}]",
                self.window, self.w_min, self.w_max
            ));
        }
        if let Some(limit) = self.limit() {
            if self.active.len() > limit
                && self.policy.is_agent_level()
                && self.active.iter().any(|&a| at_boundary(a))
            {
                return Err(format!(
                    "{} agents active over limit {limit} with pausable agents left",
                    self.active.len()
                ));
            }
        }
        Ok(())
    }
}
