//! Scenario files.
//!
//! A scenario is one TOML document. Unknown keys are rejected everywhere.
//! `--set a.b=value` overrides are applied to the parsed document before it
//! is checked, with `value` read as a TOML literal and falling back to a
//! bare string. `policy=<kind>` is shorthand for `policy.kind=<kind>`.
//! Shipped scenarios are addressed as `preset:<name>`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheConfig, EvictionMode};
use crate::controller::{ControllerConfig, Policy};
use crate::cost::CostParams;
use crate::engine::{PhaseConfig, Scenario, UsageSignal};
use crate::workload::{build_population, Population, PopulationConfig};

pub const PRESETS: &[(&str, &str)] = &[
    ("smoke", include_str!("../presets/smoke.toml")),
    ("thrash", include_str!("../presets/thrash.toml")),
    ("ample", include_str!("../presets/ample.toml")),
    (
        "sweep-sensitivity",
        include_str!("../presets/sweep-sensitivity.toml"),
    ),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("malformed override `{0}`, expected key=value")]
    Override(String),
    #[error("{0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Uncontrolled,
    RequestCap,
    AgentCap,
    Aimd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKind,
    /// Required for the two fixed-cap kinds.
    #[serde(default)]
    pub cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSection {
    pub capacity: usize,
    #[serde(default = "default_eviction")]
    pub eviction: EvictionMode,
    #[serde(default = "default_page")]
    pub page_size: usize,
    /// Share of the hit-rate window kept across a control tick.
    #[serde(default)]
    pub hit_window_decay: f64,
    #[serde(default)]
    pub usage_signal: UsageSignal,
    /// Repeat the last hit rate on ticks with no requests (otherwise 1.0).
    #[serde(default)]
    pub hold_hit_rate: bool,
}

fn default_eviction() -> EvictionMode {
    EvictionMode::Discard
}

fn default_page() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRun {
    pub name: String,
    pub policy: PolicySection,
    #[serde(default)]
    pub eviction: Option<EvictionMode>,
    #[serde(default)]
    pub baseline: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default)]
    pub runs: Vec<CompareRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub fixed_cap: Vec<usize>,
    pub u_low: Vec<f64>,
    pub u_high: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            fixed_cap: vec![4, 8, 16, 32, 64, 128],
            u_low: vec![0.1, 0.2, 0.3, 0.5],
            u_high: vec![0.4, 0.5, 0.6, 0.8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: u64,
    /// Simulated seconds after which a run is abandoned.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Check every module invariant after each event (slow).
    #[serde(default)]
    pub check_invariants: bool,
    /// Tokens one prefill group may compute (0: unbounded).
    #[serde(default = "default_prefill_budget")]
    pub max_prefill_tokens: usize,
    pub population: PopulationConfig,
    pub cache: CacheSection,
    #[serde(default)]
    pub cost: CostParams,
    pub policy: PolicySection,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub phases: PhaseConfig,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_horizon() -> f64 {
    1e6
}

fn default_prefill_budget() -> usize {
    8192
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl PolicySection {
    pub fn resolve(&self, controller: ControllerConfig) -> Result<Policy, ConfigError> {
        let cap = || {
            self.cap.ok_or_else(|| {
                ConfigError::Invalid(format!("policy kind {:?} needs `cap`", self.kind))
            })
        };
        let p = match self.kind {
            PolicyKind::Uncontrolled => Policy::Uncontrolled,
            PolicyKind::RequestCap => Policy::FixedRequestCap(cap()?),
            PolicyKind::AgentCap => Policy::FixedAgentCap(cap()?),
            PolicyKind::Aimd => Policy::CacheAwareAimd(controller),
        };
        p.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(p)
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::with_overrides(text, &[])
    }

    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file path or a `preset:<name>` reference.
    pub fn load(source: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = read_source(source)?;
        Self::with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.population
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.cache.capacity == 0 {
            return invalid("cache.capacity must be positive".into());
        }
        if self.cache.page_size == 0 {
            return invalid("cache.page_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cache.hit_window_decay) {
            return invalid("cache.hit_window_decay must lie in [0, 1]".into());
        }
        if self.horizon.is_nan() || self.horizon <= 0.0 {
            return invalid("horizon must be positive".into());
        }
        self.cost.validate().map_err(ConfigError::Invalid)?;
        self.controller
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.policy.resolve(self.controller)?;
        let p = &self.phases;
        if !(0.0..=1.0).contains(&p.sat_threshold) || !(0.0..=1.0).contains(&p.hit_threshold) {
            return invalid("phase thresholds must lie in [0, 1]".into());
        }
        if p.hysteresis == 0 {
            return invalid("phases.hysteresis must be at least 1".into());
        }
        for r in &self.compare.runs {
            r.policy.resolve(self.controller)?;
        }
        if !self.compare.runs.is_empty() {
            let baselines = self.compare.runs.iter().filter(|r| r.baseline).count();
            if baselines != 1 {
                return invalid(format!(
                    "compare needs exactly one baseline run, found {baselines}"
                ));
            }
            let mut names: Vec<_> = self.compare.runs.iter().map(|r| &r.name).collect();
            names.sort();
            names.dedup();
            if names.len() != self.compare.runs.len() {
                return invalid("compare run names must be unique".into());
            }
        }
        if self.sweep.fixed_cap.contains(&0) {
            return invalid("sweep.fixed_cap values must be positive".into());
        }
        Ok(())
    }

    pub fn population(&self) -> Result<Population, ConfigError> {
        build_population(&self.population, self.seed)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn cache_config(&self) -> CacheConfig {
        CacheConfig {
            capacity: self.cache.capacity,
            eviction: self.cache.eviction,
            page_size: self.cache.page_size,
        }
    }

    /// Scenario for `policy` over an already-sampled population.
    pub fn scenario(&self, population: Population, policy: Policy) -> Scenario {
        Scenario {
            population,
            cache: self.cache_config(),
            cost: self.cost,
            policy,
            control_interval: self.controller.control_interval,
            hit_window_decay: self.cache.hit_window_decay,
            usage_signal: self.cache.usage_signal,
            hold_hit_rate: self.cache.hold_hit_rate,
            max_prefill_tokens: self.max_prefill_tokens,
            horizon: self.horizon,
            check_invariants: self.check_invariants,
        }
    }

    /// Scenario for the configured policy.
    pub fn build(&self) -> Result<Scenario, ConfigError> {
        let policy = self.policy.resolve(self.controller)?;
        Ok(self.scenario(self.population()?, policy))
    }
}

pub fn read_source(source: &str) -> Result<String, ConfigError> {
    if let Some(name) = source.strip_prefix("preset:") {
        return PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.to_string())
            .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()));
    }
    let path = Path::new(source);
    std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn apply_override(doc: &mut toml::Table, o: &str) -> Result<(), ConfigError> {
    let (key, raw) = o
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(o.to_string()))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(o.to_string()));
    }
    let key = if key == "policy" { "policy.kind" } else { key };
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut table = doc;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for (name, _) in PRESETS {
            ScenarioConfig::load(&format!("preset:{name}"), &[]).unwrap();
        }
    }

    #[test]
    fn overrides_apply() {
        let cfg = ScenarioConfig::load(
            "preset:smoke",
            &[
                "policy=uncontrolled".into(),
                "controller.u_high=0.6".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.policy.kind, PolicyKind::Uncontrolled);
        assert_eq!(cfg.controller.u_high, 0.6);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ScenarioConfig::load("preset:smoke", &["cache.capcity=3".into()]);
        assert!(matches!(err, Err(ConfigError::Parse(_))));
        let err = ScenarioConfig::load("preset:smoke", &["bogus=1".into()]);
        assert!(matches!(err, Err(ConfigError::Parse(_))));
    }

    #[test]
    fn fixed_cap_requires_cap() {
        let err = ScenarioConfig::load("preset:smoke", &["policy=agent_cap".into()]);
        assert!(matches!(err, Err(ConfigError::Invalid(_))));
        ScenarioConfig::load(
            "preset:smoke",
            &["policy=agent_cap".into(), "policy.cap=2".into()],
        )
        .unwrap();
    }

    #[test]
    fn missing_file_and_preset() {
        assert!(matches!(
            ScenarioConfig::load("/nonexistent/x.toml", &[]),
            Err(ConfigError::Read { .. })
        ));
        assert!(matches!(
            ScenarioConfig::load("preset:nope", &[]),
            Err(ConfigError::UnknownPreset(_))
        ));
    }
}
