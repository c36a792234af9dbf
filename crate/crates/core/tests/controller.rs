mod common;

use agentkv::controller::{Command, ControllerConfig, ControllerState, Policy, Signals};
use common::window_law;
use proptest::prelude::*;

fn config() -> impl Strategy<Value = ControllerConfig> {
    (
        0.5f64..4.0,
        0.1f64..0.9,
        0.0f64..0.5,
        0.0f64..0.5,
        0.0f64..1.0,
        1.0f64..4.0,
    )
        .prop_map(|(alpha, beta, lo, gap, h, w_min)| ControllerConfig {
            alpha,
            beta,
            u_low: lo,
            u_high: lo + gap,
            h_thresh: h,
            w_min,
            ..ControllerConfig::default()
        })
}

fn signals() -> impl Strategy<Value = Signals> {
    (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(usage, hit_rate)| Signals { usage, hit_rate })
}

#[derive(Debug, Clone)]
enum Step {
    Tick(Signals),
    Arrive(usize),
    Complete(usize),
    Finish(usize),
    Pass,
}

fn steps() -> impl Strategy<Value = Vec<Step>> {
    let s = prop_oneof![
        signals().prop_map(Step::Tick),
        (0usize..12).prop_map(Step::Arrive),
        (0usize..12).prop_map(Step::Complete),
        (0usize..12).prop_map(Step::Finish),
        Just(Step::Pass),
    ];
    prop::collection::vec(s, 1..120)
}

proptest! {
    #[test]
    fn window_follows_the_law_within_bounds(cfg in config(), seq in prop::collection::vec(signals(), 1..60), n in 1usize..64) {
        let mut s = ControllerState::new(Policy::CacheAwareAimd(cfg), n);
        let (lo, hi) = cfg.window_bounds(n);
        for sig in seq {
            let before = s.window();
            let after = s.update_window(sig);
            let want = window_law(before, sig.usage, sig.hit_rate, cfg.alpha, cfg.beta, cfg.u_low, cfg.u_high, cfg.h_thresh).clamp(lo, hi);
            prop_assert_eq!(after, want);
            prop_assert!(lo <= after && after <= hi);
        }
    }

    #[test]
    fn sets_stay_disjoint(cfg in config(), ops in steps()) {
        // agents 0..12; every agent is always at a step boundary here
        let n = 12;
        let mut s = ControllerState::new(Policy::CacheAwareAimd(cfg), n);
        let mut finished = [false; 12];
        let mut running = vec![];
        for op in ops {
            match op {
                Step::Tick(sig) => { s.update_window(sig); }
                Step::Arrive(id) => {
                    let known = s.is_active(id) || s.is_paused(id) || s.pending().any(|p| p == id);
                    if !known && !finished[id] {
                        s.enqueue(id);
                    }
                }
                Step::Complete(id) => {
                    if running.contains(&id) {
                        running.retain(|&a| a != id);
                        s.on_request_complete(id).unwrap();
                    }
                }
                Step::Finish(id) => {
                    if s.is_active(id) && !running.contains(&id) {
                        s.on_agent_finished(id).unwrap();
                        finished[id] = true;
                    }
                }
                Step::Pass => {
                    for c in s.admission_pass(|_| true) {
                        if let Command::Admit(id) | Command::Resume(id) = c {
                            running.push(id);
                        }
                    }
                }
            }
            // the cap only has to hold once an admission pass has run
            let after_pass = matches!(op, Step::Pass);
            s.check_invariants(|_| after_pass).map_err(TestCaseError::fail)?;
            if let (Some(limit), true) = (s.limit(), after_pass) {
                prop_assert!(s.active().len() <= limit);
            }
        }
    }
}

#[test]
fn congestion_halves_down_to_one() {
    let cfg = ControllerConfig {
        initial_window: Some(40.0),
        ..ControllerConfig::default()
    };
    let mut s = ControllerState::new(Policy::CacheAwareAimd(cfg), 40);
    let hot = Signals {
        usage: 0.9,
        hit_rate: 0.05,
    };
    let seen: Vec<f64> = (0..7).map(|_| s.update_window(hot)).collect();
    assert_eq!(seen, [20.0, 10.0, 5.0, 2.5, 1.25, 1.0, 1.0]);
}

#[test]
fn boundary_values_hold_the_window() {
    let cfg = ControllerConfig {
        initial_window: Some(8.0),
        ..ControllerConfig::default()
    };
    let mut s = ControllerState::new(Policy::CacheAwareAimd(cfg), 40);
    // exactly u_low: no increase; exactly u_high: no decrease
    s.update_window(Signals {
        usage: 0.2,
        hit_rate: 0.0,
    });
    s.update_window(Signals {
        usage: 0.5,
        hit_rate: 0.0,
    });
    // hot but hitting: hold
    s.update_window(Signals {
        usage: 0.9,
        hit_rate: 0.2,
    });
    assert_eq!(s.window(), 8.0);
}
