//! Test oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use agentkv::cache::Token;

/// Brute-force LRU cache with no tree: every cached token is keyed by its
/// full prefix and carries its own timestamp and pin count. The clock ticks
/// once per lookup or insert, as in the tree.
#[derive(Debug, Clone)]
pub struct FlatCache {
    capacity: usize,
    clock: u64,
    /// prefix -> (last access, pins)
    entries: BTreeMap<Vec<Token>, (u64, u32)>,
    pub matched: u64,
    pub requested: u64,
    pub evicted: BTreeSet<Vec<Token>>,
}

impl FlatCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            clock: 0,
            entries: BTreeMap::new(),
            matched: 0,
            requested: 0,
            evicted: BTreeSet::new(),
        }
    }

    pub fn used(&self) -> usize {
        self.entries.len()
    }

    pub fn contents(&self) -> BTreeSet<Vec<Token>> {
        self.entries.keys().cloned().collect()
    }

    fn cached_len(&self, tokens: &[Token]) -> usize {
        (1..=tokens.len())
            .take_while(|&k| self.entries.contains_key(&tokens[..k]))
            .count()
    }

    fn touch(&mut self, tokens: &[Token], upto: usize, stamp: u64) {
        for k in 1..=upto {
            self.entries.get_mut(&tokens[..k]).unwrap().0 = stamp;
        }
    }

    pub fn match_prefix(&mut self, tokens: &[Token]) -> usize {
        self.clock += 1;
        let m = self.cached_len(tokens);
        self.touch(tokens, m, self.clock);
        self.matched += m as u64;
        self.requested += tokens.len() as u64;
        m
    }

    fn is_leaf(&self, key: &[Token]) -> bool {
        // any cached key one token longer that starts with `key`
        let mut lo = key.to_vec();
        lo.push(Token(0));
        self.entries
            .range(lo..)
            .take_while(|(k, _)| k.starts_with(key))
            .all(|(k, _)| k.len() != key.len() + 1)
    }

    /// Removes `needed` tokens, oldest unpinned leaf token first. Returns
    /// the number actually removed.
    pub fn evict(&mut self, needed: usize) -> usize {
        let mut done = 0;
        while done < needed {
            let victim = self
                .entries
                .iter()
                .filter(|(k, (_, pins))| *pins == 0 && self.is_leaf(k))
                .min_by_key(|(k, (t, _))| (*t, std::cmp::Reverse(k.len())))
                .map(|(k, _)| k.clone());
            let Some(v) = victim else { break };
            self.entries.remove(&v);
            self.evicted.insert(v);
            done += 1;
        }
        done
    }

    pub fn pin(&mut self, tokens: &[Token]) {
        for k in 1..=tokens.len() {
            self.entries.get_mut(&tokens[..k]).unwrap().1 += 1;
        }
    }

    pub fn unpin(&mut self, tokens: &[Token]) {
        for k in 1..=tokens.len() {
            self.entries.get_mut(&tokens[..k]).unwrap().1 -= 1;
        }
    }

    /// Ok(()) when the whole sequence ends up cached.
    pub fn insert(&mut self, tokens: &[Token]) -> Result<(), ()> {
        self.clock += 1;
        let stamp = self.clock;
        let have = self.cached_len(tokens);
        self.touch(tokens, have, stamp);
        let needed = tokens.len() - have;
        let free = self.capacity - self.used();
        if free < needed {
            self.pin(&tokens[..have]);
            self.evict(needed - free);
            self.unpin(&tokens[..have]);
            if self.capacity - self.used() < needed {
                return Err(());
            }
        }
        for k in have + 1..=tokens.len() {
            self.entries.insert(tokens[..k].to_vec(), (stamp, 0));
        }
        Ok(())
    }
}

/// The window update written out directly from its three cases, without
/// clamping.
#[allow(clippy::too_many_arguments)]
pub fn window_law(
    w: f64,
    u: f64,
    h: f64,
    alpha: f64,
    beta: f64,
    u_low: f64,
    u_high: f64,
    h_thr: f64,
) -> f64 {
    if u < u_low {
        w + alpha
    } else if u > u_high && h < h_thr {
        w * beta
    } else {
        w
    }
}

/// Sequences over a tiny alphabet so that random draws share prefixes.
pub fn toks(v: &[u8]) -> Vec<Token> {
    v.iter().map(|&t| Token(t as u64)).collect()
}
