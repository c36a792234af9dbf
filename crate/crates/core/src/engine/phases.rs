//! Splits a run into warm-up, thrashing middle, and cool-down.
//!
//! A tick is thrashing when cache usage is at or above the saturation
//! threshold while the trailing-mean hit rate is below the hit threshold.
//! A thrashing episode opens at a thrashing tick and closes only after
//! `hysteresis` consecutive non-thrashing ticks; the close is dated to the
//! first of them. The longest episode is the middle phase, so a brief
//! cold-start dip does not hide the real one. A run that never thrashes is
//! one warm-up phase.

use serde::{Deserialize, Serialize};

use crate::metrics::TraceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub sat_threshold: f64,
    pub hit_threshold: f64,
    /// Consecutive violating ticks needed to leave the middle phase; also
    /// the length of the trailing hit-rate window.
    pub hysteresis: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            sat_threshold: 0.8,
            hit_threshold: 0.5,
            hysteresis: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseLabel {
    Warmup,
    Middle,
    Cooldown,
}

impl PhaseLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseLabel::Warmup => "warmup",
            PhaseLabel::Middle => "middle",
            PhaseLabel::Cooldown => "cooldown",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub label: PhaseLabel,
    pub start: f64,
    pub end: f64,
    /// Mean usage over the ticks inside the phase (NaN if none).
    pub mean_usage: f64,
    pub mean_hit_rate: f64,
}

impl Phase {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Labels `[0, makespan]` from the tick trace. Phases are contiguous, in
/// order, and zero-length phases are dropped.
pub fn classify_phases(trace: &[TraceRecord], makespan: f64, cfg: &PhaseConfig) -> Vec<Phase> {
    let k = cfg.hysteresis.max(1);
    let trailing_hit = |i: usize| {
        let lo = (i + 1).saturating_sub(k);
        let w = &trace[lo..=i];
        w.iter().map(|r| r.hit_rate).sum::<f64>() / w.len() as f64
    };

    let thrashing =
        |i: usize| trace[i].usage >= cfg.sat_threshold && trailing_hit(i) < cfg.hit_threshold;

    // Every episode, as (open tick time, close time or None if it runs to
    // the end of the trace).
    let mut episodes: Vec<(f64, Option<f64>)> = Vec::new();
    let mut i = 0;
    while i < trace.len() {
        if !thrashing(i) {
            i += 1;
            continue;
        }
        let open = trace[i].time;
        let mut close = None;
        let mut streak = 0usize;
        let mut first_bad = i;
        while i < trace.len() {
            if thrashing(i) {
                streak = 0;
            } else {
                if streak == 0 {
                    first_bad = i;
                }
                streak += 1;
                if streak >= k {
                    close = Some(trace[first_bad].time);
                    break;
                }
            }
            i += 1;
        }
        episodes.push((open, close));
        i += 1;
    }
    let span = |&(s, e): &(f64, Option<f64>)| e.unwrap_or(makespan).min(makespan) - s;
    // earliest wins ties
    let Some(&(middle_start, close)) = episodes
        .iter()
        .rev()
        .max_by(|a, b| span(a).total_cmp(&span(b)))
    else {
        return finish(trace, vec![(PhaseLabel::Warmup, 0.0, makespan)]);
    };
    let middle_end = close.unwrap_or(makespan).min(makespan);
    finish(
        trace,
        vec![
            (PhaseLabel::Warmup, 0.0, middle_start),
            (PhaseLabel::Middle, middle_start, middle_end),
            (PhaseLabel::Cooldown, middle_end, makespan),
        ],
    )
}

fn finish(trace: &[TraceRecord], spans: Vec<(PhaseLabel, f64, f64)>) -> Vec<Phase> {
    spans
        .into_iter()
        .filter(|&(_, s, e)| e > s)
        .map(|(label, start, end)| {
            let inside: Vec<_> = trace
                .iter()
                .filter(|r| r.time >= start && r.time < end)
                .collect();
            let n = inside.len() as f64;
            Phase {
                label,
                start,
                end,
                mean_usage: inside.iter().map(|r| r.usage).sum::<f64>() / n,
                mean_hit_rate: inside.iter().map(|r| r.hit_rate).sum::<f64>() / n,
            }
        })
        .collect()
}
