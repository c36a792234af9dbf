//! Multi-run drivers: policy comparisons and parameter sweeps over one
//! sampled population, plus the on-disk layout of run artifacts.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::cache::EvictionMode;
use crate::config::{ConfigError, PolicyKind, PolicySection, ScenarioConfig};
use crate::controller::Policy;
use crate::engine::{classify_phases, run, EngineError, SimulationResult};
use crate::metrics::{
    export_series, export_summary, export_trace, render_phases, MetricsError, Summary,
};
use crate::workload::Population;

/// One named run of a multi-run experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub policy: Policy,
    pub eviction: Option<EvictionMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    FixedCap,
    ULow,
    UHigh,
}

impl FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed_cap" => Ok(SweepAxis::FixedCap),
            "u_low" => Ok(SweepAxis::ULow),
            "u_high" => Ok(SweepAxis::UHigh),
            _ => Err(format!(
                "unknown sweep axis `{s}` (expected fixed_cap, u_low or u_high)"
            )),
        }
    }
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::FixedCap => "fixed_cap",
            SweepAxis::ULow => "u_low",
            SweepAxis::UHigh => "u_high",
        }
    }
}

/// Name of the adaptive reference run every sweep includes.
pub const REFERENCE_RUN: &str = "aimd";

pub fn compare_specs(cfg: &ScenarioConfig) -> Result<(Vec<RunSpec>, String), ConfigError> {
    if cfg.compare.runs.len() < 2 {
        return Err(ConfigError::Invalid(
            "compare needs at least two [[compare.runs]] entries".into(),
        ));
    }
    let specs = cfg
        .compare
        .runs
        .iter()
        .map(|r| {
            Ok(RunSpec {
                name: r.name.clone(),
                policy: r.policy.resolve(cfg.controller)?,
                eviction: r.eviction,
            })
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;
    let baseline = cfg
        .compare
        .runs
        .iter()
        .find(|r| r.baseline)
        .map(|r| r.name.clone())
        .expect("validated");
    Ok((specs, baseline))
}

/// Grid runs for `axis` followed by the adaptive reference run.
pub fn sweep_specs(cfg: &ScenarioConfig, axis: SweepAxis) -> Result<Vec<RunSpec>, ConfigError> {
    let mut specs: Vec<RunSpec> = match axis {
        SweepAxis::FixedCap => cfg
            .sweep
            .fixed_cap
            .iter()
            .map(|&n| RunSpec {
                name: format!("fixed_cap={n}"),
                policy: Policy::FixedAgentCap(n),
                eviction: None,
            })
            .collect(),
        SweepAxis::ULow | SweepAxis::UHigh => {
            let grid = if axis == SweepAxis::ULow {
                &cfg.sweep.u_low
            } else {
                &cfg.sweep.u_high
            };
            grid.iter()
                .map(|&v| {
                    let mut c = cfg.controller;
                    if axis == SweepAxis::ULow {
                        c.u_low = v;
                    } else {
                        c.u_high = v;
                    }
                    let policy = PolicySection {
                        kind: PolicyKind::Aimd,
                        cap: None,
                    }
                    .resolve(c)?;
                    Ok(RunSpec {
                        name: format!("{}={v}", axis.as_str()),
                        policy,
                        eviction: None,
                    })
                })
                .collect::<Result<_, ConfigError>>()?
        }
    };
    if specs.is_empty() {
        return Err(ConfigError::Invalid(format!(
            "sweep.{} grid is empty",
            axis.as_str()
        )));
    }
    specs.push(RunSpec {
        name: REFERENCE_RUN.into(),
        policy: Policy::CacheAwareAimd(cfg.controller),
        eviction: None,
    });
    Ok(specs)
}

/// Runs every spec on the same population, at most `jobs` at a time.
/// Results come back in spec order.
pub fn run_all(
    cfg: &ScenarioConfig,
    population: &Population,
    specs: &[RunSpec],
    jobs: usize,
) -> Vec<Result<SimulationResult, EngineError>> {
    let one = |spec: &RunSpec| {
        let mut scenario = cfg.scenario(population.clone(), spec.policy);
        if let Some(e) = spec.eviction {
            scenario.cache.eviction = e;
        }
        run(scenario)
    };
    if jobs <= 1 {
        return specs.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    pool.install(|| specs.par_iter().map(one).collect())
}

/// Writes `trace.csv`, `summary.txt`, `phases.txt` and `series/` into `dir`.
pub fn write_artifacts(
    dir: &Path,
    summary: &Summary,
    result: &SimulationResult,
    cfg: &ScenarioConfig,
) -> Result<(), MetricsError> {
    fs::create_dir_all(dir).map_err(|source| MetricsError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    export_trace(&result.trace, &dir.join("trace.csv"))?;
    export_summary(summary, &dir.join("summary.txt"))?;
    let phases = classify_phases(&result.trace, result.makespan, &cfg.phases);
    let path = dir.join("phases.txt");
    fs::write(&path, render_phases(&phases)).map_err(|source| MetricsError::Io { path, source })?;
    export_series(&result.trace, &dir.join("series"))
}

/// Summary of a finished or horizon-aborted run.
pub fn summarize(
    name: &str,
    cfg: &ScenarioConfig,
    outcome: &Result<SimulationResult, EngineError>,
) -> Option<(Summary, SimulationResult)> {
    let result = match outcome {
        Ok(r) => r.clone(),
        Err(EngineError::Horizon { partial, .. }) => (**partial).clone(),
        Err(_) => return None,
    };
    Some((
        Summary::from_result(name, cfg.seed, &result, &cfg.phases),
        result,
    ))
}
