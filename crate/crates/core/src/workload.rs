//! ReAct-style agent populations.
//!
//! Each agent owns a pre-sampled script: for every step, how many tokens it
//! generates and which tool call (latency and observation size) follows.
//! Scripts are drawn once from a seeded generator, so the same population
//! can be replayed bit-for-bit under different admission policies.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cache::Token;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("invalid workload config: {0}")]
    Config(String),
    #[error("agent {agent}: cannot {action} while {state:?}")]
    InvalidState {
        agent: usize,
        action: &'static str,
        state: AgentState,
    },
    #[error("agent {agent}: illegal transition {from:?} -> {to:?}")]
    IllegalTransition {
        agent: usize,
        from: AgentState,
        to: AgentState,
    },
}

/// Non-negative sampling distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    Constant {
        value: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    /// Parameterized by the mean and standard deviation of the samples
    /// themselves, not of the underlying normal.
    LogNormal {
        mean: f64,
        std: f64,
    },
}

impl Distribution {
    pub fn constant(value: f64) -> Self {
        Distribution::Constant { value }
    }

    pub fn validate(&self, what: &str) -> Result<(), WorkloadError> {
        let ok = match *self {
            Distribution::Constant { value } => value.is_finite() && value >= 0.0,
            Distribution::Uniform { low, high } => {
                low.is_finite() && high.is_finite() && low >= 0.0 && low <= high
            }
            Distribution::LogNormal { mean, std } => {
                mean.is_finite() && std.is_finite() && mean > 0.0 && std >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(WorkloadError::Config(format!(
                "{what}: bad distribution {self:?}"
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Distribution::Constant { value } => value,
            Distribution::Uniform { low, high } => 0.5 * (low + high),
            Distribution::LogNormal { mean, .. } => mean,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x = match *self {
            Distribution::Constant { value } => value,
            Distribution::Uniform { low, high } => {
                if high > low {
                    rng.random_range(low..=high)
                } else {
                    low
                }
            }
            Distribution::LogNormal { mean, std } => {
                if std == 0.0 {
                    mean
                } else {
                    let sigma2 = (1.0 + (std * std) / (mean * mean)).ln();
                    let mu = mean.ln() - 0.5 * sigma2;
                    LogNormal::new(mu, sigma2.sqrt())
                        .expect("validated parameters")
                        .sample(rng)
                }
            }
        };
        x.max(0.0)
    }

    pub fn sample_count<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sample(rng).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub agents: usize,
    /// Length of the system prompt shared verbatim by every agent.
    #[serde(default)]
    pub shared_prompt_tokens: usize,
    /// Per-agent task prompt that follows the shared prompt.
    pub task_prompt_tokens: Distribution,
    pub steps: Distribution,
    pub gen_tokens: Distribution,
    pub obs_tokens: Distribution,
    /// Simulated seconds.
    pub tool_latency: Distribution,
    #[serde(default = "one")]
    pub tool_probability: f64,
}

fn one() -> f64 {
    1.0
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        self.task_prompt_tokens.validate("task_prompt_tokens")?;
        self.steps.validate("steps")?;
        self.gen_tokens.validate("gen_tokens")?;
        self.obs_tokens.validate("obs_tokens")?;
        self.tool_latency.validate("tool_latency")?;
        if !(0.0..=1.0).contains(&self.tool_probability) {
            return Err(WorkloadError::Config(format!(
                "tool_probability {} outside [0, 1]",
                self.tool_probability
            )));
        }
        if self.steps.mean() < 1.0 {
            return Err(WorkloadError::Config(
                "steps must average at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Expected aggregate context if every agent reached its final step at
    /// once. The shared prompt counts a single time.
    pub fn expected_peak_working_set(&self) -> f64 {
        let steps = self.steps.mean().round().max(1.0);
        let per_agent = self.task_prompt_tokens.mean()
            + steps * self.gen_tokens.mean()
            + (steps - 1.0) * self.tool_probability * self.obs_tokens.mean();
        self.shared_prompt_tokens as f64 + self.agents as f64 * per_agent
    }
}

/// One step of an agent's script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub gen_tokens: usize,
    /// Tool call issued after this step's generation. `None` on the last step.
    pub tool: Option<ToolCall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub latency: f64,
    pub obs_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: usize,
    pub shared_prompt_tokens: usize,
    pub task_prompt_tokens: usize,
    pub steps: Vec<StepPlan>,
    pub rng_seed: u64,
}

impl AgentSpec {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn final_context_len(&self) -> usize {
        self.shared_prompt_tokens
            + self.task_prompt_tokens
            + self
                .steps
                .iter()
                .map(|s| s.gen_tokens + s.tool.as_ref().map_or(0, |t| t.obs_tokens))
                .sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentState {
    Pending,
    AwaitingAdmission,
    Generating,
    ToolExecuting,
    Paused,
    Finished,
}

impl AgentState {
    pub fn can_transition_to(self, to: AgentState) -> bool {
        use AgentState::*;
        matches!(
            (self, to),
            (Pending, AwaitingAdmission)
                | (AwaitingAdmission, Generating)
                | (Generating, ToolExecuting)
                | (Generating, Finished)
                | (ToolExecuting, AwaitingAdmission)
                | (AwaitingAdmission, Paused)
                | (Paused, AwaitingAdmission)
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentStats {
    pub tokens_generated: u64,
    pub recomputed_tokens: u64,
    pub fresh_prefill_tokens: u64,
    pub reloaded_tokens: u64,
    pub matched_tokens: u64,
    pub requested_tokens: u64,
    /// Simulated seconds spent ready but not running.
    pub wait_time: f64,
    pub stalls: u64,
    pub finished_at: Option<f64>,
}

/// A generation request: the full current context plus the tokens this step
/// will emit.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt_len: usize,
    pub decode_tokens: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    EmitGeneration(GenerationRequest),
    EmitToolCall { latency: f64 },
    Complete,
}

#[derive(Debug, Clone)]
pub struct AgentRecord {
    pub spec: Arc<AgentSpec>,
    state: AgentState,
    context: Vec<Token>,
    step_index: usize,
    next_token: u64,
    pending_decode: Vec<Token>,
    /// Longest context length ever cached for this agent.
    pub high_water: usize,
    pub stats: AgentStats,
}

/// First token id of each agent's private range; shared prompt tokens live
/// below it.
fn private_base(agent_id: usize) -> u64 {
    (agent_id as u64 + 1) << 32
}

impl AgentRecord {
    pub fn new(spec: Arc<AgentSpec>) -> Self {
        let mut next_token = private_base(spec.agent_id);
        let mut context: Vec<Token> = (0..spec.shared_prompt_tokens as u64).map(Token).collect();
        for _ in 0..spec.task_prompt_tokens {
            context.push(Token(next_token));
            next_token += 1;
        }
        Self {
            spec,
            state: AgentState::Pending,
            context,
            step_index: 0,
            next_token,
            pending_decode: Vec::new(),
            high_water: 0,
            stats: AgentStats::default(),
        }
    }

    pub fn id(&self) -> usize {
        self.spec.agent_id
    }

    pub fn state(&self) -> AgentState {
        self.state
    }

    pub fn context(&self) -> &[Token] {
        &self.context
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn is_finished(&self) -> bool {
        self.state == AgentState::Finished
    }

    pub fn transition(&mut self, to: AgentState) -> Result<(), WorkloadError> {
        if !self.state.can_transition_to(to) {
            return Err(WorkloadError::IllegalTransition {
                agent: self.id(),
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }

    /// Tokens the next `begin_generation` will decode, without consuming them.
    pub fn upcoming_decode(&self) -> Vec<Token> {
        let n = self
            .spec
            .steps
            .get(self.step_index)
            .map_or(0, |s| s.gen_tokens);
        (0..n as u64).map(|k| Token(self.next_token + k)).collect()
    }

    fn fresh_tokens(&mut self, n: usize) -> Vec<Token> {
        let out = (0..n as u64).map(|k| Token(self.next_token + k)).collect();
        self.next_token += n as u64;
        out
    }

    /// Starts the next generation step. The agent must be waiting for
    /// admission (or not yet released).
    pub fn begin_generation(&mut self) -> Result<GenerationRequest, WorkloadError> {
        if self.state == AgentState::Pending {
            self.transition(AgentState::AwaitingAdmission)?;
        }
        if self.state != AgentState::AwaitingAdmission {
            return Err(self.invalid("begin generation"));
        }
        self.transition(AgentState::Generating)?;
        let n = self.spec.steps[self.step_index].gen_tokens;
        self.pending_decode = self.fresh_tokens(n);
        Ok(GenerationRequest {
            prompt_len: self.context.len(),
            decode_tokens: self.pending_decode.clone(),
        })
    }

    /// Appends the generated tokens and reports what follows: a tool call or
    /// completion.
    pub fn finish_generation(&mut self) -> Result<Action, WorkloadError> {
        if self.state != AgentState::Generating {
            return Err(self.invalid("finish generation"));
        }
        let decoded = std::mem::take(&mut self.pending_decode);
        self.stats.tokens_generated += decoded.len() as u64;
        self.context.extend(decoded);
        let plan = &self.spec.steps[self.step_index];
        let latency = plan.tool.as_ref().map_or(0.0, |t| t.latency);
        self.step_index += 1;
        if self.step_index == self.spec.num_steps() {
            self.transition(AgentState::Finished)?;
            Ok(Action::Complete)
        } else {
            self.transition(AgentState::ToolExecuting)?;
            Ok(Action::EmitToolCall { latency })
        }
    }

    /// Appends the observation returned by the tool the agent was waiting on.
    pub fn finish_tool(&mut self) -> Result<(), WorkloadError> {
        if self.state != AgentState::ToolExecuting {
            return Err(self.invalid("finish tool"));
        }
        let obs = self.spec.steps[self.step_index - 1]
            .tool
            .as_ref()
            .map_or(0, |t| t.obs_tokens);
        let tokens = self.fresh_tokens(obs);
        self.context.extend(tokens);
        self.transition(AgentState::AwaitingAdmission)
    }

    /// Drives the agent one phase forward: a ready agent emits its next
    /// generation, a generating agent reports its tool call or completion,
    /// and an agent returning from a tool absorbs the observation and emits
    /// its next generation.
    pub fn next_phase(&mut self) -> Result<Action, WorkloadError> {
        match self.state {
            AgentState::Pending | AgentState::AwaitingAdmission => {
                Ok(Action::EmitGeneration(self.begin_generation()?))
            }
            AgentState::Generating => self.finish_generation(),
            AgentState::ToolExecuting => {
                self.finish_tool()?;
                Ok(Action::EmitGeneration(self.begin_generation()?))
            }
            AgentState::Paused | AgentState::Finished => Err(self.invalid("advance")),
        }
    }

    fn invalid(&self, action: &'static str) -> WorkloadError {
        WorkloadError::InvalidState {
            agent: self.id(),
            action,
            state: self.state,
        }
    }
}

/// The full set of agent scripts for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub agents: Vec<AgentSpec>,
}

impl Population {
    pub fn records(&self) -> Vec<AgentRecord> {
        self.agents
            .iter()
            .map(|s| AgentRecord::new(Arc::new(s.clone())))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    /// Hex SHA-256 over the serialized action stream.
    pub fn stream_hash(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.agents {
            h.update((a.agent_id as u64).to_le_bytes());
            h.update((a.shared_prompt_tokens as u64).to_le_bytes());
            h.update((a.task_prompt_tokens as u64).to_le_bytes());
            for s in &a.steps {
                h.update((s.gen_tokens as u64).to_le_bytes());
                match &s.tool {
                    Some(t) => {
                        h.update([1]);
                        h.update(t.latency.to_bits().to_le_bytes());
                        h.update((t.obs_tokens as u64).to_le_bytes());
                    }
                    None => h.update([0]),
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Largest aggregate context reached if all agents were at their final
    /// step simultaneously.
    pub fn peak_working_set(&self) -> usize {
        let shared = self.agents.first().map_or(0, |a| a.shared_prompt_tokens);
        shared
            + self
                .agents
                .iter()
                .map(|a| a.final_context_len() - a.shared_prompt_tokens)
                .sum::<usize>()
    }
}

/// Samples a reproducible population. Each agent draws from its own stream
/// keyed by `(seed, agent_id)`, so adding agents never perturbs the scripts of
/// existing ones.
pub fn build_population(cfg: &PopulationConfig, seed: u64) -> Result<Population, WorkloadError> {
    cfg.validate()?;
    let agents = (0..cfg.agents)
        .map(|agent_id| {
            let rng_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(agent_id as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let task_prompt_tokens = cfg.task_prompt_tokens.sample_count(&mut rng);
            let num_steps = cfg.steps.sample_count(&mut rng).max(1);
            let steps = (0..num_steps)
                .map(|k| {
                    let gen_tokens = cfg.gen_tokens.sample_count(&mut rng);
                    let tool = if k + 1 == num_steps {
                        None
                    } else if rng.random_bool(cfg.tool_probability) {
                        Some(ToolCall {
                            latency: cfg.tool_latency.sample(&mut rng),
                            obs_tokens: cfg.obs_tokens.sample_count(&mut rng),
                        })
                    } else {
                        Some(ToolCall {
                            latency: 0.0,
                            obs_tokens: 0,
                        })
                    };
                    StepPlan { gen_tokens, tool }
                })
                .collect();
            AgentSpec {
                agent_id,
                shared_prompt_tokens: cfg.shared_prompt_tokens,
                task_prompt_tokens,
                steps,
                rng_seed,
            }
        })
        .collect();
    Ok(Population { agents })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_cfg(agents: usize) -> PopulationConfig {
        PopulationConfig {
            agents,
            shared_prompt_tokens: 128,
            task_prompt_tokens: Distribution::constant(16.0),
            steps: Distribution::constant(4.0),
            gen_tokens: Distribution::constant(10.0),
            obs_tokens: Distribution::constant(5.0),
            tool_latency: Distribution::constant(1.0),
            tool_probability: 1.0,
        }
    }

    #[test]
    fn shared_prompt_is_common_prefix() {
        let mut cfg = constant_cfg(256);
        cfg.task_prompt_tokens = Distribution::Uniform {
            low: 0.0,
            high: 50.0,
        };
        let pop = build_population(&cfg, 3).unwrap();
        let records = pop.records();
        let head = &records[0].context()[..128];
        for r in &records {
            assert_eq!(&r.context()[..128], head);
        }
        // private ranges are disjoint past the shared prompt
        let a = &records[0].context()[128..];
        let b = &records[1].context()[128..];
        assert!(a.iter().all(|t| !b.contains(t)));
    }

    #[test]
    fn same_seed_same_population() {
        let mut cfg = constant_cfg(32);
        cfg.gen_tokens = Distribution::LogNormal {
            mean: 100.0,
            std: 50.0,
        };
        let a = build_population(&cfg, 11).unwrap();
        let b = build_population(&cfg, 11).unwrap();
        let c = build_population(&cfg, 12).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.stream_hash(), b.stream_hash());
        assert_ne!(a.stream_hash(), c.stream_hash());
    }

    #[test]
    fn context_grows_fifteen_per_full_step() {
        let pop = build_population(&constant_cfg(1), 0).unwrap();
        let mut agent = pop.records().remove(0);
        let prompt = agent.context().len();
        for k in 1..=3 {
            agent.begin_generation().unwrap();
            assert!(matches!(
                agent.finish_generation().unwrap(),
                Action::EmitToolCall { .. }
            ));
            agent.finish_tool().unwrap();
            assert_eq!(agent.context().len(), prompt + 15 * k);
        }
        agent.begin_generation().unwrap();
        assert_eq!(agent.finish_generation().unwrap(), Action::Complete);
        assert_eq!(agent.step_index(), agent.spec.num_steps());
        assert!(agent.is_finished());
    }

    #[test]
    fn next_phase_walks_the_loop() {
        let pop = build_population(&constant_cfg(1), 0).unwrap();
        let mut agent = pop.records().remove(0);
        let mut gens = 0;
        loop {
            match agent.next_phase().unwrap() {
                Action::EmitGeneration(req) => {
                    assert_eq!(req.decode_tokens.len(), 10);
                    gens += 1;
                }
                Action::EmitToolCall { latency } => assert_eq!(latency, 1.0),
                Action::Complete => break,
            }
        }
        assert_eq!(gens, 4);
        assert!(matches!(
            agent.next_phase(),
            Err(WorkloadError::InvalidState { .. })
        ));
    }

    #[test]
    fn paused_agent_cannot_advance() {
        let pop = build_population(&constant_cfg(1), 0).unwrap();
        let mut agent = pop.records().remove(0);
        agent.transition(AgentState::AwaitingAdmission).unwrap();
        agent.transition(AgentState::Paused).unwrap();
        assert!(agent.next_phase().is_err());
        assert!(agent.transition(AgentState::Generating).is_err());
    }

    #[test]
    fn lognormal_mean_within_ten_percent() {
        let d = Distribution::LogNormal {
            mean: 4.0,
            std: 3.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1000;
        let mean = (0..n).map(|_| d.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 4.0).abs() / 4.0 < 0.10, "mean {mean}");
    }

    #[test]
    fn rejects_bad_distributions() {
        let mut cfg = constant_cfg(2);
        cfg.gen_tokens = Distribution::Uniform {
            low: 5.0,
            high: 1.0,
        };
        assert!(matches!(
            build_population(&cfg, 0),
            Err(WorkloadError::Config(_))
        ));
        cfg.gen_tokens = Distribution::constant(-1.0);
        assert!(build_population(&cfg, 0).is_err());
    }

    #[test]
    fn analytic_peak_matches_constant_population() {
        let cfg = constant_cfg(8);
        let pop = build_population(&cfg, 0).unwrap();
        assert_eq!(
            pop.peak_working_set() as f64,
            cfg.expected_peak_working_set()
        );
    }
}
