use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agentkv::config::{ConfigError, ScenarioConfig};
use agentkv::engine::{run, EngineError};
use agentkv::experiment::{
    compare_specs, run_all, summarize, sweep_specs, write_artifacts, RunSpec, SweepAxis,
    REFERENCE_RUN,
};
use agentkv::metrics::{compare, import_summary, Summary};

const EXIT_CONFIG: u8 = 2;
const EXIT_HORIZON: u8 = 3;

#[derive(Parser)]
#[command(
    name = "agentkv",
    version,
    about = "Agentic batch inference KV cache simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file, or `preset:<name>` (smoke, thrash, ample, sweep-sensitivity).
    #[arg(long)]
    config: String,
    /// Override a config key, e.g. `--set policy=aimd --set cache.capacity=4096`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults to the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Runs to execute in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario.
    Run(Common),
    /// Run every policy listed under [[compare.runs]] on one workload.
    Compare(Common),
    /// Sweep fixed caps or controller thresholds on one workload.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// fixed_cap, u_low or u_high
        #[arg(long)]
        axis: String,
    },
    /// Re-render a comparison table from existing run directories.
    Report {
        /// Directory holding one subdirectory per run.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        baseline: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(c) => cmd_run(&c),
        Command::Compare(c) => cmd_multi(&c, None),
        Command::Sweep { common, axis } => match axis.parse::<SweepAxis>() {
            Ok(a) => cmd_multi(&common, Some(a)),
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Report { out, baseline } => cmd_report(&out, &baseline),
    }
}

fn load(c: &Common) -> Result<(ScenarioConfig, PathBuf), ConfigError> {
    let mut overrides = c.overrides.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = ScenarioConfig::load(&c.config, &overrides)?;
    let out = c.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

fn fail(msg: impl std::fmt::Display, code: u8) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn cmd_run(c: &Common) -> ExitCode {
    let (cfg, out) = match load(c) {
        Ok(v) => v,
        Err(e) => return fail(e, EXIT_CONFIG),
    };
    let scenario = match cfg.build() {
        Ok(s) => s,
        Err(e) => return fail(e, EXIT_CONFIG),
    };
    let name = scenario.policy.name();
    eprintln!("workload stream {}", scenario.population.stream_hash());
    let started = std::time::Instant::now();
    let outcome = run(scenario);
    eprintln!("simulated in {:.2?} wall clock", started.elapsed());
    if let Err(EngineError::AgentTooLarge { .. }) = &outcome {
        return fail(outcome.unwrap_err(), EXIT_CONFIG);
    }
    let Some((summary, result)) = summarize(&name, &cfg, &outcome) else {
        return fail(outcome.unwrap_err(), 1);
    };
    if let Err(e) = write_artifacts(&out, &summary, &result, &cfg) {
        return fail(e, 1);
    }
    print!("{}", summary.render());
    match outcome {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => fail(
            format!("{e}; partial results in {}", out.display()),
            EXIT_HORIZON,
        ),
    }
}

fn cmd_multi(c: &Common, axis: Option<SweepAxis>) -> ExitCode {
    let (cfg, out) = match load(c) {
        Ok(v) => v,
        Err(e) => return fail(e, EXIT_CONFIG),
    };
    let planned: Result<(Vec<RunSpec>, String), ConfigError> = match axis {
        None => compare_specs(&cfg),
        Some(a) => sweep_specs(&cfg, a).map(|s| (s, REFERENCE_RUN.to_string())),
    };
    let (specs, baseline) = match planned {
        Ok(v) => v,
        Err(e) => return fail(e, EXIT_CONFIG),
    };
    let population = match cfg.population() {
        Ok(p) => p,
        Err(e) => return fail(e, EXIT_CONFIG),
    };
    let outcomes = run_all(&cfg, &population, &specs, c.jobs.max(1));

    let mut summaries = Vec::new();
    let mut aborted = false;
    for (spec, outcome) in specs.iter().zip(&outcomes) {
        let Some((summary, result)) = summarize(&spec.name, &cfg, outcome) else {
            return fail(outcome.as_ref().unwrap_err(), EXIT_CONFIG);
        };
        eprintln!("{}: workload stream {}", spec.name, result.stream_hash);
        if let Err(e) = outcome {
            eprintln!("{}: {e}", spec.name);
            aborted = true;
        }
        if let Err(e) = write_artifacts(&out.join(&spec.name), &summary, &result, &cfg) {
            return fail(e, 1);
        }
        summaries.push(summary);
    }
    let table = match compare(&summaries, &baseline) {
        Ok(t) => t.render(),
        Err(e) => return fail(e, EXIT_CONFIG),
    };
    let file = match axis {
        None => "compare.txt".to_string(),
        Some(a) => format!("sweep_{}.txt", a.as_str()),
    };
    if let Err(e) = fs::write(out.join(&file), &table) {
        return fail(format!("{}: {e}", out.join(file).display()), 1);
    }
    print!("{table}");
    if aborted {
        ExitCode::from(EXIT_HORIZON)
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_report(out: &Path, baseline: &str) -> ExitCode {
    let mut dirs: Vec<PathBuf> = match fs::read_dir(out) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("summary.txt").is_file())
            .collect(),
        Err(e) => return fail(format!("{}: {e}", out.display()), EXIT_CONFIG),
    };
    dirs.sort();
    let summaries: Result<Vec<Summary>, _> = dirs
        .iter()
        .map(|d| import_summary(&d.join("summary.txt")))
        .collect();
    let summaries = match summaries {
        Ok(s) => s,
        Err(e) => return fail(e, EXIT_CONFIG),
    };
    match compare(&summaries, baseline) {
        Ok(t) => {
            print!("{}", t.render());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e, EXIT_CONFIG),
    }
}
