//! Discrete-event simulation of an agentic batch on one serving engine.
//!
//! The loop has four stages. Agents ask the controller for admission;
//! admitted agents are packed into a batch and run one generation step;
//! agents then leave for a tool call with their cache unpinned; and at every
//! control tick the controller reads cache usage and hit rate, moves its
//! window, and admits or pauses agents.
//!
//! The device approximates continuous batching. Whenever its prefill stage
//! is free, it takes every admitted, ready request as one prefill group: the
//! group first waits out the transfer time of any host reloads and offloads,
//! then prefills its members back to back in arrival order (prefill is
//! compute-bound). Each member starts decoding as soon as its own prefill is
//! done and decodes in parallel with everything else in flight (decode is
//! memory-bound). A request holds its cache path pinned from the start of
//! its prefill group until its decode finishes. Dispatch happens at every
//! admission check, prefill-group end and completion.

mod phases;
mod queue;

use thiserror::Error;

pub use phases::{classify_phases, Phase, PhaseConfig, PhaseLabel};
pub use queue::{Event, EventKind, EventQueue};

use crate::cache::{CacheConfig, CacheError, CacheTree, PathHandle, Token};
use crate::controller::{AgentId, Command, ControllerState, Policy, Signals};
use crate::cost::CostParams;
use crate::metrics::{quantize, TraceRecord};
use crate::workload::{Action, AgentRecord, AgentState, AgentStats, Population, WorkloadError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(
        "simulated clock passed the horizon of {horizon} s with {unfinished} agents unfinished"
    )]
    Horizon {
        horizon: f64,
        unfinished: usize,
        partial: Box<SimulationResult>,
    },
    #[error("agent {agent} needs {needed} slots but the cache holds only {capacity}")]
    AgentTooLarge {
        agent: AgentId,
        needed: usize,
        capacity: usize,
    },
    #[error("invariant violated at t={time}: {what}")]
    Invariant { time: f64, what: String },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

/// What the controller reads as cache usage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageSignal {
    /// Slots held by requests currently being served; idle cached prefixes
    /// count as free because they can be evicted on demand.
    InFlight,
    /// Every occupied device slot, including idle cached prefixes.
    Resident,
    /// In-flight slots plus the full context of every admitted request
    /// still waiting for prefill, capped at 1.
    #[default]
    Demand,
}

/// A fully resolved simulation input.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub population: Population,
    pub cache: CacheConfig,
    pub cost: CostParams,
    pub policy: Policy,
    /// Simulated seconds between control ticks.
    pub control_interval: f64,
    /// Fraction of the hit-rate window carried across a tick (0 resets it).
    pub hit_window_decay: f64,
    pub usage_signal: UsageSignal,
    /// A tick that saw no requests repeats the previous hit rate instead of
    /// reading 1.0.
    pub hold_hit_rate: bool,
    /// Tokens one prefill group may compute; 0 leaves groups unbounded. The
    /// first request of a group is always taken whatever its size.
    pub max_prefill_tokens: usize,
    /// Abort once the clock passes this many simulated seconds.
    pub horizon: f64,
    /// Check every module invariant after each event.
    pub check_invariants: bool,
}

/// Device time attributed by activity. Every instant of the run lands in
/// exactly one bucket, so the buckets sum to the makespan.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Ledger {
    pub prefill_fresh: f64,
    pub prefill_recompute: f64,
    pub decode: f64,
    pub transfer: f64,
    /// Device idle while at least one agent waits on a tool.
    pub tool_wait: f64,
    /// Device idle with no tool outstanding (admission or stall gaps).
    pub idle: f64,
}

impl Ledger {
    pub fn total(&self) -> f64 {
        self.prefill_fresh
            + self.prefill_recompute
            + self.decode
            + self.transfer
            + self.tool_wait
            + self.idle
    }

    /// Everything except pure idle time.
    pub fn busy(&self) -> f64 {
        self.total() - self.idle
    }

    /// Share of busy time spent re-prefilling previously cached tokens.
    pub fn recompute_fraction(&self) -> f64 {
        let busy = self.busy();
        if busy <= 0.0 {
            0.0
        } else {
            (self.prefill_recompute / busy).clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSummary {
    pub agent_id: AgentId,
    pub steps: usize,
    pub final_context: usize,
    pub stats: AgentStats,
    pub recompute_events: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunCounters {
    pub batches: u64,
    pub stalls: u64,
    pub decoded_tokens: u64,
    pub recompute_tokens: u64,
    pub fresh_tokens: u64,
    pub reloaded_tokens: u64,
    pub matched_tokens: u64,
    pub requested_tokens: u64,
    pub evicted_tokens: u64,
    pub offloaded_tokens: u64,
    pub transfers: u64,
    pub pauses: u64,
    pub resumes: u64,
}

impl RunCounters {
    /// Token-weighted hit rate over every generation request of the run.
    pub fn hit_rate(&self) -> f64 {
        if self.requested_tokens == 0 {
            1.0
        } else {
            self.matched_tokens as f64 / self.requested_tokens as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub policy: String,
    pub stream_hash: String,
    pub makespan: f64,
    pub trace: Vec<TraceRecord>,
    pub ledger: Ledger,
    pub counters: RunCounters,
    pub agents: Vec<AgentSummary>,
}

/// A request between the start of its prefill group and the end of its
/// decode.
#[derive(Debug, Clone)]
struct InFlight {
    agent: AgentId,
    handle: PathHandle,
    recompute_tokens: usize,
}

pub struct Engine {
    scenario: Scenario,
    clock: f64,
    queue: EventQueue,
    cache: CacheTree,
    agents: Vec<AgentRecord>,
    handles: Vec<Option<PathHandle>>,
    ready_since: Vec<f64>,
    recompute_events: Vec<u64>,
    controller: ControllerState,
    in_flight: Vec<InFlight>,
    /// Set while a prefill group occupies the device.
    prefill_busy: bool,
    /// Transfers of the most recent prefill group.
    group_transfers: usize,
    check_scheduled: bool,
    ledger: Ledger,
    counters: RunCounters,
    trace: Vec<TraceRecord>,
    unfinished: usize,
    makespan: f64,
    context_lens: Vec<usize>,
    /// Hit rate reported at the last tick that saw any request.
    last_hit_rate: f64,
}

impl Engine {
    pub fn new(scenario: Scenario) -> Result<Self, EngineError> {
        let capacity = scenario.cache.capacity;
        for spec in &scenario.population.agents {
            let needed = spec.final_context_len();
            if needed > capacity {
                return Err(EngineError::AgentTooLarge {
                    agent: spec.agent_id,
                    needed,
                    capacity,
                });
            }
        }
        let agents = scenario.population.records();
        let n = agents.len();
        let controller = ControllerState::new(scenario.policy, n);
        let context_lens = agents.iter().map(|a| a.context().len()).collect();
        Ok(Self {
            cache: CacheTree::new(scenario.cache),
            clock: 0.0,
            queue: EventQueue::default(),
            handles: vec![None; n],
            ready_since: vec![0.0; n],
            recompute_events: vec![0; n],
            controller,
            in_flight: Vec::new(),
            prefill_busy: false,
            group_transfers: 0,
            check_scheduled: false,
            ledger: Ledger::default(),
            counters: RunCounters::default(),
            trace: Vec::new(),
            unfinished: n,
            makespan: 0.0,
            context_lens,
            last_hit_rate: 1.0,
            agents,
            scenario,
        })
    }

    pub fn cache(&self) -> &CacheTree {
        &self.cache
    }

    pub fn controller(&self) -> &ControllerState {
        &self.controller
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// Runs until every agent has finished.
    pub fn run(mut self) -> Result<SimulationResult, EngineError> {
        if self.agents.is_empty() {
            return Ok(self.into_result());
        }
        for id in 0..self.agents.len() {
            self.agents[id].transition(AgentState::AwaitingAdmission)?;
            self.controller.enqueue(id);
        }
        self.queue
            .push(self.scenario.control_interval, EventKind::ControlTick);
        self.schedule_check();

        while self.unfinished > 0 {
            let Some(ev) = self.queue.pop() else {
                return Err(EngineError::Invariant {
                    time: self.clock,
                    what: "event queue drained with agents unfinished".into(),
                });
            };
            if ev.time > self.scenario.horizon {
                let unfinished = self.unfinished;
                let horizon = self.scenario.horizon;
                self.makespan = self.clock;
                return Err(EngineError::Horizon {
                    horizon,
                    unfinished,
                    partial: Box::new(self.into_result()),
                });
            }
            self.advance_to(ev.time);
            match ev.kind {
                EventKind::GenerationComplete(agent) => self.on_generation_complete(agent)?,
                EventKind::PrefillDone => {
                    self.prefill_busy = false;
                    self.schedule_check();
                }
                EventKind::ToolComplete(agent) => self.on_tool_complete(agent)?,
                EventKind::ControlTick => self.on_control_tick()?,
                EventKind::AdmissionCheck => {
                    self.check_scheduled = false;
                    self.admission_and_dispatch()?;
                }
            }
            if self.scenario.check_invariants {
                self.check_invariants()?;
            }
        }
        self.makespan = self.clock;
        if self.scenario.check_invariants {
            let total = self.ledger.total();
            if (total - self.makespan).abs() > 1e-6 * self.makespan.max(1.0) {
                return Err(EngineError::Invariant {
                    time: self.clock,
                    what: format!("ledger total {total} != makespan {}", self.makespan),
                });
            }
        }
        Ok(self.into_result())
    }

    /// Moves the clock forward and books the elapsed time. Prefill groups
    /// book their transfer and prefill time when dispatched; the rest goes
    /// to decode while any request is in flight, else to tool wait or idle.
    fn advance_to(&mut self, t: f64) {
        debug_assert!(t >= self.clock);
        let dt = t - self.clock;
        if dt > 0.0 && !self.prefill_busy {
            if !self.in_flight.is_empty() {
                self.ledger.decode += dt;
            } else if self
                .agents
                .iter()
                .any(|a| a.state() == AgentState::ToolExecuting)
            {
                self.ledger.tool_wait += dt;
            } else {
                self.ledger.idle += dt;
            }
        }
        self.clock = t;
    }

    fn schedule_check(&mut self) {
        if !self.check_scheduled {
            self.check_scheduled = true;
            self.queue.push(self.clock, EventKind::AdmissionCheck);
        }
    }

    /// Whether an agent sits between steps and may be paused.
    fn at_boundary(agents: &[AgentRecord], id: AgentId) -> bool {
        agents[id].state() == AgentState::AwaitingAdmission
    }

    fn admission_pass(&mut self) -> Result<(), EngineError> {
        let agents = &self.agents;
        let cmds = self
            .controller
            .admission_pass(|id| Self::at_boundary(agents, id));
        for cmd in cmds {
            match cmd {
                Command::Admit(_) => {}
                Command::Pause(id) => {
                    self.agents[id].transition(AgentState::Paused)?;
                    self.counters.pauses += 1;
                }
                Command::Resume(id) => {
                    self.agents[id].transition(AgentState::AwaitingAdmission)?;
                    self.ready_since[id] = self.clock;
                    self.counters.resumes += 1;
                }
            }
        }
        Ok(())
    }

    fn admission_and_dispatch(&mut self) -> Result<(), EngineError> {
        self.admission_pass()?;
        if !self.prefill_busy {
            self.dispatch()?;
        }
        Ok(())
    }

    /// Packs every admitted, ready agent that fits into one batch.
    fn dispatch(&mut self) -> Result<(), EngineError> {
        let mut candidates: Vec<AgentId> = self
            .controller
            .active()
            .iter()
            .copied()
            .filter(|&id| self.agents[id].state() == AgentState::AwaitingAdmission)
            .collect();
        // First come, first served.
        candidates.sort_by(|&a, &b| {
            self.ready_since[a]
                .total_cmp(&self.ready_since[b])
                .then(a.cmp(&b))
        });
        if candidates.is_empty() {
            return Ok(());
        }

        let cost = self.scenario.cost;
        let mut members = Vec::new();
        let mut transfer_sizes: Vec<f64> = Vec::new();
        let (mut fresh_t, mut recompute_t) = (0.0, 0.0);
        let budget = match self.scenario.max_prefill_tokens {
            0 => usize::MAX,
            b => b,
        };
        let mut group_tokens = 0usize;

        for id in candidates {
            let context: Vec<Token> = self.agents[id].context().to_vec();
            let len = context.len();
            let m = self.cache.match_prefix(&context);
            // FCFS: a request over budget ends the group rather than being
            // skipped.
            if !members.is_empty() && group_tokens + (len - m.matched_len) > budget {
                break;
            }

            // Decode tokens are reserved up front so the whole step fits.
            let decode_tokens = self.agents[id].upcoming_decode();
            let gen = decode_tokens.len();
            let mut full = context;
            full.extend(decode_tokens);
            let (ins, evicted) = match self.cache.insert(&full) {
                Ok(r) => r,
                Err(CacheError::InsufficientSlots { .. }) => {
                    self.agents[id].stats.stalls += 1;
                    self.counters.stalls += 1;
                    continue;
                }
                Err(e) => {
                    return Err(EngineError::Invariant {
                        time: self.clock,
                        what: e.to_string(),
                    })
                }
            };
            self.cache.pin_path(ins.handle);
            if evicted.transfers > 0 {
                let per = cost.bytes_for(evicted.offloaded) / evicted.transfers as f64;
                transfer_sizes.extend(std::iter::repeat_n(per, evicted.transfers));
            }

            let reloaded = ins.reloaded_len.min(len - m.matched_len);
            if reloaded > 0 {
                self.cache.record_host_hits(reloaded);
                transfer_sizes.push(cost.bytes_for(reloaded));
            }
            let resident = m.matched_len + reloaded;
            let missing = len - resident;
            group_tokens += missing;
            let agent = &mut self.agents[id];
            let recompute = agent.high_water.min(len).saturating_sub(resident);
            let fresh = missing - recompute;

            let per_token = if missing > 0 {
                cost.prefill_time(missing, len) / missing as f64
            } else {
                0.0
            };
            fresh_t += per_token * fresh as f64;
            recompute_t += per_token * recompute as f64;

            agent.stats.fresh_prefill_tokens += fresh as u64;
            agent.stats.recomputed_tokens += recompute as u64;
            agent.stats.reloaded_tokens += reloaded as u64;
            agent.stats.matched_tokens += resident as u64;
            agent.stats.requested_tokens += len as u64;
            agent.stats.wait_time += self.clock - self.ready_since[id];
            agent.high_water = agent.high_water.max(len + gen);
            if recompute > 0 {
                self.recompute_events[id] += 1;
            }
            self.counters.fresh_tokens += fresh as u64;
            self.counters.reloaded_tokens += reloaded as u64;
            self.counters.matched_tokens += resident as u64;
            self.counters.requested_tokens += len as u64;

            let req = agent.begin_generation()?;
            debug_assert_eq!(req.prompt_len, len);
            self.handles[id] = Some(ins.handle);
            members.push((
                InFlight {
                    agent: id,
                    handle: ins.handle,
                    recompute_tokens: recompute,
                },
                per_token * missing as f64,
                cost.decode_time(gen, len),
            ));
        }
        if members.is_empty() {
            return Ok(());
        }

        let concurrent = transfer_sizes.len();
        let transfer_phase = transfer_sizes
            .iter()
            .map(|&b| cost.transfer_time(b, concurrent))
            .fold(0.0, f64::max);
        let start = self.clock + transfer_phase;
        let mut prefilled = 0.0;
        for (req, prefill, decode) in members {
            prefilled += prefill;
            self.queue.push(
                start + prefilled + decode,
                EventKind::GenerationComplete(req.agent),
            );
            self.in_flight.push(req);
        }
        self.queue.push(start + prefilled, EventKind::PrefillDone);
        self.prefill_busy = true;
        self.ledger.prefill_fresh += fresh_t;
        self.ledger.prefill_recompute += recompute_t;
        self.ledger.transfer += transfer_phase;
        self.group_transfers = concurrent;
        self.counters.transfers += concurrent as u64;
        self.counters.batches += 1;
        Ok(())
    }

    fn on_generation_complete(&mut self, agent: AgentId) -> Result<(), EngineError> {
        let pos = self
            .in_flight
            .iter()
            .position(|m| m.agent == agent)
            .expect("completed request is in flight");
        let m = self.in_flight.remove(pos);
        {
            self.cache
                .unpin_path(m.handle)
                .map_err(|e| EngineError::Invariant {
                    time: self.clock,
                    what: e.to_string(),
                })?;
            let gen = self.agents[m.agent].spec.steps[self.agents[m.agent].step_index()].gen_tokens;
            self.counters.decoded_tokens += gen as u64;
            self.counters.recompute_tokens += m.recompute_tokens as u64;
            match self.agents[m.agent].finish_generation()? {
                Action::Complete => {
                    self.controller.on_agent_finished(m.agent).map_err(|e| {
                        EngineError::Invariant {
                            time: self.clock,
                            what: e.to_string(),
                        }
                    })?;
                    self.cache.release_path(m.handle);
                    self.handles[m.agent] = None;
                    self.agents[m.agent].stats.finished_at = Some(self.clock);
                    self.unfinished -= 1;
                }
                Action::EmitToolCall { latency } => {
                    self.controller.on_request_complete(m.agent).map_err(|e| {
                        EngineError::Invariant {
                            time: self.clock,
                            what: e.to_string(),
                        }
                    })?;
                    self.queue
                        .push(self.clock + latency, EventKind::ToolComplete(m.agent));
                }
                Action::EmitGeneration(_) => unreachable!("generation never follows generation"),
            }
        }
        self.schedule_check();
        Ok(())
    }

    fn on_tool_complete(&mut self, id: AgentId) -> Result<(), EngineError> {
        self.agents[id].finish_tool()?;
        self.ready_since[id] = self.clock;
        if !self.scenario.policy.is_agent_level() {
            self.controller.enqueue(id);
        }
        // An over-limit agent is paused as soon as it reaches the boundary.
        self.admission_pass()?;
        self.schedule_check();
        Ok(())
    }

    fn on_control_tick(&mut self) -> Result<(), EngineError> {
        if self.cache.hit_window().1 > 0.0 || !self.scenario.hold_hit_rate {
            self.last_hit_rate = self.cache.hit_rate();
        }
        let signals = Signals {
            usage: match self.scenario.usage_signal {
                UsageSignal::InFlight => {
                    self.cache.pinned_slots() as f64 / self.cache.pool().capacity() as f64
                }
                UsageSignal::Resident => self.cache.usage(),
                UsageSignal::Demand => {
                    let queued: usize = self
                        .controller
                        .active()
                        .iter()
                        .filter(|&&id| self.agents[id].state() == AgentState::AwaitingAdmission)
                        .map(|&id| self.agents[id].context().len())
                        .sum();
                    let cap = self.cache.pool().capacity() as f64;
                    ((self.cache.pinned_slots() + queued) as f64 / cap).min(1.0)
                }
            },
            hit_rate: self.last_hit_rate,
        };
        // The trace always records resident usage; only the controller
        // input follows `usage_signal`.
        let resident = self.cache.usage();
        let window = self.controller.update_window(signals);
        self.admission_and_dispatch()?;
        self.cache.reset_hit_window(self.scenario.hit_window_decay);
        let rec = TraceRecord {
            time: quantize(self.clock),
            usage: quantize(resident),
            hit_rate: quantize(signals.hit_rate),
            window: quantize(window),
            active: self.controller.active().len() as u64,
            pending: (self.controller.pending_len() + self.controller.paused_len()) as u64,
            decoded_cum: self.counters.decoded_tokens,
            recompute_cum: self.counters.recompute_tokens,
            transfers: if self.prefill_busy {
                self.group_transfers as u64
            } else {
                0
            },
        };
        self.trace.push(rec);
        if self.unfinished > 0 {
            self.queue.push(
                self.clock + self.scenario.control_interval,
                EventKind::ControlTick,
            );
        }
        Ok(())
    }

    fn check_invariants(&mut self) -> Result<(), EngineError> {
        let fail = |what: String, time: f64| EngineError::Invariant { time, what };
        self.cache
            .check_invariants()
            .map_err(|w| fail(format!("cache: {w}"), self.clock))?;
        let agents = &self.agents;
        self.controller
            .check_invariants(|id| Self::at_boundary(agents, id))
            .map_err(|w| fail(format!("controller: {w}"), self.clock))?;
        let agent_level = self.scenario.policy.is_agent_level();
        for (id, a) in self.agents.iter().enumerate() {
            let len = a.context().len();
            if len < self.context_lens[id] {
                return Err(fail(format!("agent {id} context shrank"), self.clock));
            }
            self.context_lens[id] = len;
            let in_sets = self.controller.is_active(id) as u8
                + self.controller.is_paused(id) as u8
                + self.controller.pending().any(|p| p == id) as u8;
            let expected = match a.state() {
                AgentState::Finished => 0,
                AgentState::Paused => 1,
                AgentState::ToolExecuting if !agent_level => 0,
                _ => 1,
            };
            if in_sets != expected {
                return Err(fail(
                    format!(
                        "agent {id} in state {:?} belongs to {in_sets} controller sets",
                        a.state()
                    ),
                    self.clock,
                ));
            }
        }
        Ok(())
    }

    fn into_result(self) -> SimulationResult {
        let agents = self
            .agents
            .iter()
            .map(|a| AgentSummary {
                agent_id: a.id(),
                steps: a.step_index(),
                final_context: a.context().len(),
                stats: a.stats.clone(),
                recompute_events: self.recompute_events[a.id()],
            })
            .collect();
        let cache_counters = self.cache.counters();
        let mut counters = self.counters;
        counters.evicted_tokens = cache_counters.evicted_tokens;
        counters.offloaded_tokens = cache_counters.offloaded_tokens;
        SimulationResult {
            policy: self.scenario.policy.name(),
            stream_hash: self.scenario.population.stream_hash(),
            makespan: self.makespan,
            trace: self.trace,
            ledger: self.ledger,
            counters,
            agents,
        }
    }
}

pub fn run(scenario: Scenario) -> Result<SimulationResult, EngineError> {
    Engine::new(scenario)?.run()
}
