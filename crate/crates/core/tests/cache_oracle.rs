mod common;

use std::collections::BTreeSet;

use agentkv::cache::{CacheConfig, CacheError, CacheTree, EvictionMode, PathHandle, Token};
use common::{toks, FlatCache};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Match(usize, usize),
    Insert(usize, usize, bool),
    Evict(usize),
    Unpin(usize),
}

fn sequences() -> impl Strategy<Value = Vec<Vec<u8>>> {
    prop::collection::vec(prop::collection::vec(0u8..3, 1..12), 1..=8)
}

fn ops(n: usize) -> impl Strategy<Value = Vec<Op>> {
    let op = prop_oneof![
        (0usize..8, 1usize..12).prop_map(|(s, l)| Op::Match(s, l)),
        (0usize..8, 1usize..12, any::<bool>()).prop_map(|(s, l, p)| Op::Insert(s, l, p)),
        (1usize..10).prop_map(Op::Evict),
        (0usize..4).prop_map(Op::Unpin),
    ];
    prop::collection::vec(op, 1..n)
}

/// Drives the tree and the oracle with the same operations and compares
/// them after every step.
fn replay(seqs: &[Vec<u8>], capacity: usize, ops: &[Op]) -> Result<(), TestCaseError> {
    let mut tree = CacheTree::with_capacity(capacity);
    let mut flat = FlatCache::new(capacity);
    let mut pinned: Vec<(PathHandle, Vec<Token>)> = Vec::new();
    let mut tree_evicted = BTreeSet::new();

    for op in ops {
        let before = tree.device_prefixes();
        match *op {
            Op::Match(s, l) => {
                let seq = toks(&seqs[s % seqs.len()]);
                let seq = &seq[..l.min(seq.len())];
                let m = tree.match_prefix(seq);
                prop_assert_eq!(m.matched_len, flat.match_prefix(seq));
            }
            Op::Insert(s, l, pin) => {
                let seq = toks(&seqs[s % seqs.len()]);
                let seq = &seq[..l.min(seq.len())];
                let got = tree.insert(seq);
                let want = flat.insert(seq);
                prop_assert_eq!(got.is_ok(), want.is_ok(), "insert outcome diverged");
                if let Ok((ins, _)) = got {
                    if pin {
                        tree.pin_path(ins.handle);
                        flat.pin(seq);
                        pinned.push((ins.handle, seq.to_vec()));
                    }
                }
            }
            Op::Evict(n) => {
                let got = tree.evict(n, EvictionMode::Discard).reclaimed;
                prop_assert_eq!(got, flat.evict(n));
            }
            Op::Unpin(i) => {
                if !pinned.is_empty() {
                    let (h, seq) = pinned.remove(i % pinned.len());
                    tree.unpin_path(h).unwrap();
                    flat.unpin(&seq);
                }
            }
        }
        let after = tree.device_prefixes();
        tree_evicted.extend(before.difference(&after).cloned());
        prop_assert_eq!(&after, &flat.contents());
        prop_assert_eq!(tree.pool().used(), flat.used());
        tree.check_invariants().map_err(TestCaseError::fail)?;
    }
    prop_assert_eq!(tree_evicted, flat.evicted.clone());
    let (m, r) = tree.hit_window();
    prop_assert_eq!((m as u64, r as u64), (flat.matched, flat.requested));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tree_agrees_with_flat_lru(seqs in sequences(), capacity in 4usize..=32, ops in ops(80)) {
        replay(&seqs, capacity, &ops)?;
    }

    #[test]
    fn pool_conservation_and_bounds(seqs in sequences(), capacity in 1usize..=32, ops in ops(60)) {
        let mut tree = CacheTree::with_capacity(capacity);
        for op in &ops {
            if let Op::Insert(s, l, _) | Op::Match(s, l) = *op {
                let seq = toks(&seqs[s % seqs.len()]);
                let seq = &seq[..l.min(seq.len())];
                let _ = tree.insert(seq);
                let _ = tree.match_prefix(seq);
            }
            let p = tree.pool();
            prop_assert_eq!(p.used() + p.free(), p.capacity());
            prop_assert!((0.0..=1.0).contains(&tree.usage()));
            prop_assert!((0.0..=1.0).contains(&tree.hit_rate()));
        }
    }

    #[test]
    fn pinned_paths_survive_any_pressure(seqs in sequences(), ops in ops(60)) {
        let mut tree = CacheTree::with_capacity(32);
        let first = toks(&seqs[0]);
        let (ins, _) = tree.insert(&first).unwrap();
        tree.pin_path(ins.handle);
        for op in &ops {
            match *op {
                Op::Insert(s, l, _) => {
                    let seq = toks(&seqs[s % seqs.len()]);
                    let _ = tree.insert(&seq[..l.min(seq.len())]);
                }
                Op::Evict(n) => {
                    tree.evict(n * 4, EvictionMode::Discard);
                }
                _ => {}
            }
            prop_assert_eq!(tree.match_prefix(&first).matched_len, first.len());
        }
    }

    #[test]
    fn sharing_bound(seqs in sequences()) {
        let mut tree = CacheTree::with_capacity(1024);
        let mut distinct = BTreeSet::new();
        for s in &seqs {
            let t = toks(s);
            tree.insert(&t).unwrap();
            for k in 1..=t.len() {
                distinct.insert(t[..k].to_vec());
            }
        }
        prop_assert!(tree.pool().used() <= distinct.len());
        prop_assert_eq!(tree.device_prefixes(), distinct);
    }
}

#[test]
fn shared_system_prompt_is_stored_once() {
    // 8 agents, 64 shared tokens, 100 private ones each
    let mut tree = CacheTree::with_capacity(10_000);
    let mut total = 0;
    for a in 0..8u64 {
        let mut seq: Vec<Token> = (0..64).map(Token).collect();
        seq.extend((0..100).map(|i| Token(1000 * (a + 1) + i)));
        total += seq.len();
        tree.insert(&seq).unwrap();
    }
    assert_eq!(tree.pool().used(), 64 + 8 * 100);
    assert!(tree.pool().used() < total);
}

#[test]
fn tool_paused_prefixes_go_first() {
    // A1 and A2 sit in tool calls while A3 keeps generating under pressure.
    let a = |id: u64, n: u64| (0..n).map(|i| Token(id * 100 + i)).collect::<Vec<_>>();
    let mut tree = CacheTree::with_capacity(30);
    tree.insert(&a(1, 10)).unwrap();
    tree.insert(&a(2, 10)).unwrap();
    let (ins, _) = tree.insert(&a(3, 10)).unwrap();
    tree.pin_path(ins.handle);
    tree.unpin_path(ins.handle).unwrap();
    let (_, ev) = tree.insert(&a(3, 25)).unwrap();
    assert_eq!(ev.reclaimed, 15);
    // A1 is gone, A2 lost its tail, A3 is whole
    assert_eq!(tree.match_prefix(&a(1, 10)).matched_len, 0);
    assert_eq!(tree.match_prefix(&a(2, 10)).matched_len, 5);
    assert_eq!(tree.match_prefix(&a(3, 25)).matched_len, 25);
}

#[test]
fn offload_round_trip_keeps_content() {
    let mut tree = CacheTree::new(CacheConfig {
        eviction: EvictionMode::Offload,
        ..CacheConfig::new(8)
    });
    let x = toks(&[1, 2, 3, 4, 5, 6]);
    let y = toks(&[7, 7, 7, 7, 7, 7]);
    tree.insert(&x).unwrap();
    let (_, ev) = tree.insert(&y).unwrap();
    assert_eq!(ev.offloaded, 4);
    let m = tree.match_prefix(&x);
    assert_eq!((m.matched_len, m.host_len), (2, 4));
    let (ins, _) = tree.insert(&x).unwrap();
    assert_eq!(ins.reloaded_len, 4);
    assert_eq!(tree.match_prefix(&x).matched_len, 6);
    tree.check_invariants().unwrap();
}

#[test]
fn unpin_of_unpinned_path_underflows() {
    let mut tree = CacheTree::with_capacity(8);
    let (ins, _) = tree.insert(&toks(&[1, 2])).unwrap();
    assert!(matches!(
        tree.unpin_path(ins.handle),
        Err(CacheError::UnpinUnderflow(_))
    ));
}
