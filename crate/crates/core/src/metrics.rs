//! Trace records, run summaries, comparison tables, and their text formats.
//!
//! Every float written to disk goes through [`fmt_num`] (6 significant
//! digits). Trace values are quantized to that precision when recorded, so
//! reading an exported trace back yields the same records.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::{classify_phases, Phase, PhaseConfig, PhaseLabel, SimulationResult};

pub const TRACE_HEADER: &str =
    "time,usage,hit_rate,window,active,pending,decoded_cum,recompute_cum,transfers";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("baseline run `{0}` is not among the compared runs")]
    MissingBaseline(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Rounds to 6 significant digits.
pub fn quantize(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float")
}

/// Shortest text that round-trips a value already quantized to 6 digits.
pub fn fmt_num(x: f64) -> String {
    let q = quantize(x);
    if q == 0.0 {
        return "0".into();
    }
    let mag = q.abs();
    if (1e-4..1e15).contains(&mag) {
        format!("{q}")
    } else {
        format!("{q:e}")
    }
}

/// One row of the per-tick time series.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TraceRecord {
    pub time: f64,
    pub usage: f64,
    pub hit_rate: f64,
    pub window: f64,
    pub active: u64,
    pub pending: u64,
    pub decoded_cum: u64,
    pub recompute_cum: u64,
    /// Transfers in the batch running at the tick.
    pub transfers: u64,
}

impl TraceRecord {
    fn to_line(self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            fmt_num(self.time),
            fmt_num(self.usage),
            fmt_num(self.hit_rate),
            fmt_num(self.window),
            self.active,
            self.pending,
            self.decoded_cum,
            self.recompute_cum,
            self.transfers
        )
    }

    fn parse(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(format!("expected 9 columns, found {}", f.len()));
        }
        let float = |i: usize| f[i].parse::<f64>().map_err(|e| format!("column {i}: {e}"));
        let int = |i: usize| f[i].parse::<u64>().map_err(|e| format!("column {i}: {e}"));
        Ok(Self {
            time: float(0)?,
            usage: float(1)?,
            hit_rate: float(2)?,
            window: float(3)?,
            active: int(4)?,
            pending: int(5)?,
            decoded_cum: int(6)?,
            recompute_cum: int(7)?,
            transfers: int(8)?,
        })
    }
}

pub fn render_trace(trace: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(64 * (trace.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn export_trace(trace: &[TraceRecord], path: &Path) -> Result<(), MetricsError> {
    fs::write(path, render_trace(trace)).map_err(io_err(path))
}

pub fn import_trace(path: &Path) -> Result<Vec<TraceRecord>, MetricsError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let parse_err = |line, msg: String| MetricsError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    match lines.next() {
        Some(TRACE_HEADER) => {}
        other => return Err(parse_err(1, format!("unexpected header {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, l)| TraceRecord::parse(l).map_err(|m| parse_err(i + 2, m)))
        .collect()
}

/// Writes one `time value` file per trace column into `dir`.
pub fn export_series(trace: &[TraceRecord], dir: &Path) -> Result<(), MetricsError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    type Column = fn(&TraceRecord) -> String;
    let columns: [(&str, Column); 8] = [
        ("usage", |r| fmt_num(r.usage)),
        ("hit_rate", |r| fmt_num(r.hit_rate)),
        ("window", |r| fmt_num(r.window)),
        ("active", |r| r.active.to_string()),
        ("pending", |r| r.pending.to_string()),
        ("decoded_cum", |r| r.decoded_cum.to_string()),
        ("recompute_cum", |r| r.recompute_cum.to_string()),
        ("transfers", |r| r.transfers.to_string()),
    ];
    for (name, get) in columns {
        let mut out = format!("time {name}\n");
        for r in trace {
            let _ = writeln!(out, "{} {}", fmt_num(r.time), get(r));
        }
        let path = dir.join(format!("{name}.dat"));
        fs::write(&path, out).map_err(io_err(&path))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSummary {
    pub label: PhaseLabel,
    pub duration: f64,
    pub mean_usage: f64,
    pub mean_hit_rate: f64,
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub name: String,
    pub policy: String,
    pub stream_hash: String,
    pub seed: u64,
    pub makespan: f64,
    /// Decoded tokens per simulated second.
    pub throughput: f64,
    /// Token-weighted hit rate over all generation requests.
    pub hit_rate: f64,
    pub recompute_fraction: f64,
    pub decoded_tokens: u64,
    pub recompute_tokens: u64,
    pub fresh_tokens: u64,
    pub reloaded_tokens: u64,
    pub evicted_tokens: u64,
    pub batches: u64,
    pub stalls: u64,
    pub pauses: u64,
    pub busy_prefill_fresh: f64,
    pub busy_prefill_recompute: f64,
    pub busy_decode: f64,
    pub busy_transfer: f64,
    pub tool_wait: f64,
    pub idle: f64,
    /// Warm-up, middle and cool-down, in that order; absent phases have
    /// zero duration and NaN means.
    pub phases: [PhaseSummary; 3],
}

impl Summary {
    /// Floats are quantized to the precision `render` writes, so a summary
    /// read back from disk compares equal to the one that wrote it.
    pub fn from_result(name: &str, seed: u64, r: &SimulationResult, cfg: &PhaseConfig) -> Self {
        let phases = classify_phases(&r.trace, r.makespan, cfg);
        let phase = |label| {
            phases.iter().find(|p: &&Phase| p.label == label).map_or(
                PhaseSummary {
                    label,
                    duration: 0.0,
                    mean_usage: f64::NAN,
                    mean_hit_rate: f64::NAN,
                },
                |p| PhaseSummary {
                    label,
                    duration: quantize(p.duration()),
                    mean_usage: quantize(p.mean_usage),
                    mean_hit_rate: quantize(p.mean_hit_rate),
                },
            )
        };
        let c = &r.counters;
        let throughput = if r.makespan > 0.0 {
            c.decoded_tokens as f64 / r.makespan
        } else {
            0.0
        };
        Self {
            name: name.to_string(),
            policy: r.policy.clone(),
            stream_hash: r.stream_hash.clone(),
            seed,
            makespan: quantize(r.makespan),
            throughput: quantize(throughput),
            hit_rate: quantize(c.hit_rate()),
            recompute_fraction: quantize(r.ledger.recompute_fraction()),
            decoded_tokens: c.decoded_tokens,
            recompute_tokens: c.recompute_tokens,
            fresh_tokens: c.fresh_tokens,
            reloaded_tokens: c.reloaded_tokens,
            evicted_tokens: c.evicted_tokens,
            batches: c.batches,
            stalls: c.stalls,
            pauses: c.pauses,
            busy_prefill_fresh: quantize(r.ledger.prefill_fresh),
            busy_prefill_recompute: quantize(r.ledger.prefill_recompute),
            busy_decode: quantize(r.ledger.decode),
            busy_transfer: quantize(r.ledger.transfer),
            tool_wait: quantize(r.ledger.tool_wait),
            idle: quantize(r.ledger.idle),
            phases: [
                phase(PhaseLabel::Warmup),
                phase(PhaseLabel::Middle),
                phase(PhaseLabel::Cooldown),
            ],
        }
    }

    /// Fraction of the makespan spent in `label`.
    pub fn phase_share(&self, label: PhaseLabel) -> f64 {
        if self.makespan <= 0.0 {
            return 0.0;
        }
        self.phases
            .iter()
            .find(|p| p.label == label)
            .map_or(0.0, |p| p.duration / self.makespan)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = vec![
            ("name".into(), self.name.clone()),
            ("policy".into(), self.policy.clone()),
            ("stream_hash".into(), self.stream_hash.clone()),
            ("seed".into(), self.seed.to_string()),
        ];
        let nums = [
            ("makespan", self.makespan),
            ("throughput", self.throughput),
            ("hit_rate", self.hit_rate),
            ("recompute_fraction", self.recompute_fraction),
            ("busy.prefill_fresh", self.busy_prefill_fresh),
            ("busy.prefill_recompute", self.busy_prefill_recompute),
            ("busy.decode", self.busy_decode),
            ("busy.transfer", self.busy_transfer),
            ("busy.tool_wait", self.tool_wait),
            ("idle", self.idle),
        ];
        kv.extend(nums.iter().map(|(k, v)| (k.to_string(), fmt_num(*v))));
        let ints = [
            ("tokens.decoded", self.decoded_tokens),
            ("tokens.recompute", self.recompute_tokens),
            ("tokens.fresh", self.fresh_tokens),
            ("tokens.reloaded", self.reloaded_tokens),
            ("tokens.evicted", self.evicted_tokens),
            ("batches", self.batches),
            ("stalls", self.stalls),
            ("pauses", self.pauses),
        ];
        kv.extend(ints.iter().map(|(k, v)| (k.to_string(), v.to_string())));
        for p in &self.phases {
            let l = p.label.as_str();
            kv.push((format!("phase.{l}.duration"), fmt_num(p.duration)));
            kv.push((format!("phase.{l}.mean_usage"), fmt_num(p.mean_usage)));
            kv.push((format!("phase.{l}.mean_hit_rate"), fmt_num(p.mean_hit_rate)));
        }
        kv
    }

    /// `key = value` lines in a fixed order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, (usize, String)> {
        let mut map = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or((i + 1, format!("not a `key = value` line: {line:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| map.get(k).cloned().ok_or((0, format!("missing key `{k}`")));
        let num = |k: &str| -> Result<f64, (usize, String)> {
            get(k)?.parse().map_err(|e| (0, format!("{k}: {e}")))
        };
        let int = |k: &str| -> Result<u64, (usize, String)> {
            get(k)?.parse().map_err(|e| (0, format!("{k}: {e}")))
        };
        let phase = |label: PhaseLabel| -> Result<PhaseSummary, (usize, String)> {
            let l = label.as_str();
            Ok(PhaseSummary {
                label,
                duration: num(&format!("phase.{l}.duration"))?,
                mean_usage: num(&format!("phase.{l}.mean_usage"))?,
                mean_hit_rate: num(&format!("phase.{l}.mean_hit_rate"))?,
            })
        };
        Ok(Self {
            name: get("name")?,
            policy: get("policy")?,
            stream_hash: get("stream_hash")?,
            seed: int("seed")?,
            makespan: num("makespan")?,
            throughput: num("throughput")?,
            hit_rate: num("hit_rate")?,
            recompute_fraction: num("recompute_fraction")?,
            decoded_tokens: int("tokens.decoded")?,
            recompute_tokens: int("tokens.recompute")?,
            fresh_tokens: int("tokens.fresh")?,
            reloaded_tokens: int("tokens.reloaded")?,
            evicted_tokens: int("tokens.evicted")?,
            batches: int("batches")?,
            stalls: int("stalls")?,
            pauses: int("pauses")?,
            busy_prefill_fresh: num("busy.prefill_fresh")?,
            busy_prefill_recompute: num("busy.prefill_recompute")?,
            busy_decode: num("busy.decode")?,
            busy_transfer: num("busy.transfer")?,
            tool_wait: num("busy.tool_wait")?,
            idle: num("idle")?,
            phases: [
                phase(PhaseLabel::Warmup)?,
                phase(PhaseLabel::Middle)?,
                phase(PhaseLabel::Cooldown)?,
            ],
        })
    }
}

pub fn export_summary(summary: &Summary, path: &Path) -> Result<(), MetricsError> {
    fs::write(path, summary.render()).map_err(io_err(path))
}

pub fn import_summary(path: &Path) -> Result<Summary, MetricsError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Summary::parse(&text).map_err(|(line, msg)| MetricsError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })
}

pub fn render_phases(phases: &[Phase]) -> String {
    let mut out = String::from("phase start end mean_usage mean_hit_rate\n");
    for p in phases {
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            p.label.as_str(),
            fmt_num(p.start),
            fmt_num(p.end),
            fmt_num(p.mean_usage),
            fmt_num(p.mean_hit_rate)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub policy: String,
    pub makespan: f64,
    /// Baseline makespan over this run's makespan.
    pub speedup: f64,
    pub hit_rate: f64,
    /// Hit rate minus the baseline's, in percentage points.
    pub hit_delta_pp: f64,
    pub recompute_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

pub fn compare(runs: &[Summary], baseline: &str) -> Result<Comparison, MetricsError> {
    let base = runs
        .iter()
        .find(|s| s.name == baseline)
        .ok_or_else(|| MetricsError::MissingBaseline(baseline.to_string()))?;
    let rows = runs
        .iter()
        .map(|s| ComparisonRow {
            name: s.name.clone(),
            policy: s.policy.clone(),
            makespan: s.makespan,
            speedup: if s.name == base.name {
                1.0
            } else {
                base.makespan / s.makespan
            },
            hit_rate: s.hit_rate,
            hit_delta_pp: 100.0 * (s.hit_rate - base.hit_rate),
            recompute_fraction: s.recompute_fraction,
        })
        .collect();
    Ok(Comparison {
        baseline: baseline.to_string(),
        rows,
    })
}

impl Comparison {
    /// Fixed-width table, one run per row.
    pub fn render(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain([4])
            .max()
            .unwrap_or(4);
        let pol_w = self
            .rows
            .iter()
            .map(|r| r.policy.len())
            .chain([6])
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<name_w$}  {:<pol_w$}  {:>12}  {:>8}  {:>9}  {:>9}  {:>10}",
            "run", "policy", "makespan_s", "speedup", "hit_%", "delta_pp", "recompute"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:<pol_w$}  {:>12.3}  {:>7.2}x  {:>9.2}  {:>+9.2}  {:>10.3}",
                r.name,
                r.policy,
                r.makespan,
                r.speedup,
                100.0 * r.hit_rate,
                r.hit_delta_pp,
                r.recompute_fraction
            );
        }
        let _ = writeln!(out, "baseline: {}", self.baseline);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(name: &str, makespan: f64, hit: f64) -> Summary {
        let phase = |label| PhaseSummary {
            label,
            duration: 0.0,
            mean_usage: f64::NAN,
            mean_hit_rate: f64::NAN,
        };
        Summary {
            name: name.into(),
            policy: "aimd".into(),
            stream_hash: "ab".into(),
            seed: 1,
            makespan,
            throughput: 1.0,
            hit_rate: hit,
            recompute_fraction: 0.0,
            decoded_tokens: 0,
            recompute_tokens: 0,
            fresh_tokens: 0,
            reloaded_tokens: 0,
            evicted_tokens: 0,
            batches: 0,
            stalls: 0,
            pauses: 0,
            busy_prefill_fresh: 0.0,
            busy_prefill_recompute: 0.0,
            busy_decode: 0.0,
            busy_transfer: 0.0,
            tool_wait: 0.0,
            idle: 0.0,
            phases: [
                phase(PhaseLabel::Warmup),
                phase(PhaseLabel::Middle),
                phase(PhaseLabel::Cooldown),
            ],
        }
    }

    #[test]
    fn quantize_keeps_six_digits() {
        assert_eq!(quantize(1.23456789), 1.23457);
        assert_eq!(quantize(-0.000123456789), -0.000123457);
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_num(1e-7), "1e-7");
        assert_eq!(fmt_num(0.0), "0");
    }

    #[test]
    fn empty_trace_is_header_only() {
        assert_eq!(render_trace(&[]), format!("{TRACE_HEADER}\n"));
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let trace: Vec<_> = (1..50)
            .map(|i| TraceRecord {
                time: quantize(i as f64 * 0.7),
                usage: quantize((i as f64 / 49.0).sqrt()),
                hit_rate: quantize(1.0 / i as f64),
                window: quantize(i as f64 * 1.5),
                active: i,
                pending: 50 - i,
                decoded_cum: i * 100,
                recompute_cum: i * 7,
                transfers: i % 3,
            })
            .collect();
        export_trace(&trace, &path).unwrap();
        assert_eq!(import_trace(&path).unwrap(), trace);
    }

    #[test]
    fn summary_round_trip_is_byte_stable() {
        let mut s = summary("a", 12.3456789, 0.5);
        s.phases[1].duration = 3.0;
        s.phases[1].mean_usage = 0.9;
        let text = s.render();
        let back = Summary::parse(&text).unwrap();
        assert_eq!(back.render(), text);
    }

    #[test]
    fn speedups() {
        let runs = [summary("base", 10.0, 0.4), summary("fast", 5.0, 0.7)];
        let c = compare(&runs, "base").unwrap();
        assert_eq!(c.rows[0].speedup, 1.0);
        assert_eq!(c.rows[1].speedup, 2.0);
        assert!((c.rows[1].hit_delta_pp - 30.0).abs() < 1e-9);
        assert!(c.render().contains("2.00x"));
        assert!(matches!(
            compare(&runs, "nope"),
            Err(MetricsError::MissingBaseline(_))
        ));
    }
}
