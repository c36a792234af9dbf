//! Simulated device-resident KV cache.
//!
//! The cache is a prefix tree over a fixed pool of slots, one slot per
//! token. Every node holds a contiguous token segment together with the
//! slots backing it. Lookups walk from the root; shared prefixes share
//! slots. When the pool runs dry, unpinned leaves are reclaimed in LRU
//! order, either discarded outright or moved to an unbounded host tier.
//!
//! Paths are addressed by [`PathHandle`], the deepest node of the path.
//! Pinning walks parent links, so a handle stays valid when an interior
//! node is split by a later insertion.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

/// Opaque token identifier. Only equality is meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Deepest node of a root path returned by [`CacheTree::match_prefix`] or
/// [`CacheTree::insert`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PathHandle(NodeId);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Device,
    Host,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionMode {
    Discard,
    Offload,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("insufficient slots: need {needed}, only {available} reclaimable")]
    InsufficientSlots { needed: usize, available: usize },
    #[error("unpin would drive pin count of node {0} below zero")]
    UnpinUnderflow(usize),
    #[error("stale path handle {0}")]
    StaleHandle(usize),
}

/// Fixed pool of KV slots. `used + free == capacity` always holds.
#[derive(Debug, Clone)]
pub struct SlotPool {
    capacity: usize,
    free_list: Vec<u32>,
}

impl SlotPool {
    pub fn new(capacity: usize) -> Self {
        // Popped from the back, so slot 0 is handed out first.
        let free_list = (0..capacity as u32).rev().collect();
        Self {
            capacity,
            free_list,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn free(&self) -> usize {
        self.free_list.len()
    }

    pub fn used(&self) -> usize {
        self.capacity - self.free_list.len()
    }

    fn allocate(&mut self, n: usize) -> Vec<u32> {
        debug_assert!(n <= self.free_list.len());
        let at = self.free_list.len() - n;
        self.free_list.split_off(at)
    }

    fn release(&mut self, slots: Vec<u32>) {
        self.free_list.extend(slots);
        debug_assert!(self.free_list.len() <= self.capacity);
    }
}

#[derive(Debug, Clone)]
struct CacheNode {
    segment: Vec<Token>,
    /// Empty while the node lives on the host tier.
    slots: Vec<u32>,
    parent: Option<NodeId>,
    children: BTreeMap<Token, NodeId>,
    last_access: u64,
    pin_count: u32,
    tier: Tier,
    ordinal: u64,
}

impl CacheNode {
    fn has_device_child(&self, nodes: &[Option<CacheNode>]) -> bool {
        self.children
            .values()
            .any(|c| nodes[c.0].as_ref().map(|n| n.tier) == Some(Tier::Device))
    }
}

/// Result of a prefix lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixMatch {
    /// Longest prefix resident on the device tier.
    pub matched_len: usize,
    /// Additional tokens beyond `matched_len` that sit on the host tier.
    pub host_len: usize,
    /// Device-tier nodes along the matched path, root child first.
    pub path: Vec<NodeId>,
    pub handle: PathHandle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Insertion {
    /// Newly allocated device slots (brand new tokens plus host reloads).
    pub inserted_len: usize,
    /// Tokens promoted from the host tier back to the device.
    pub reloaded_len: usize,
    pub handle: PathHandle,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvictOutcome {
    pub reclaimed: usize,
    /// Tokens moved to the host tier (offload mode only).
    pub offloaded: usize,
    /// Number of distinct offload transfers (one per evicted node).
    pub transfers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheConfig {
    pub capacity: usize,
    pub eviction: EvictionMode,
    /// Match lengths are rounded down to a multiple of this many tokens.
    pub page_size: usize,
}

impl CacheConfig {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            eviction: EvictionMode::Discard,
            page_size: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct HitWindow {
    matched: f64,
    requested: f64,
}

/// Lifetime cache counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheCounters {
    pub evicted_tokens: u64,
    pub evictions: u64,
    pub offloaded_tokens: u64,
    pub reloaded_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct CacheTree {
    nodes: Vec<Option<CacheNode>>,
    free_ids: Vec<usize>,
    pool: SlotPool,
    clock: u64,
    next_ordinal: u64,
    eviction: EvictionMode,
    page_size: usize,
    window: HitWindow,
    counters: CacheCounters,
}

const ROOT: NodeId = NodeId(0);

impl CacheTree {
    pub fn new(config: CacheConfig) -> Self {
        let root = CacheNode {
            segment: Vec::new(),
            slots: Vec::new(),
            parent: None,
            children: BTreeMap::new(),
            last_access: 0,
            pin_count: 0,
            tier: Tier::Device,
            ordinal: 0,
        };
        Self {
            nodes: vec![Some(root)],
            free_ids: Vec::new(),
            pool: SlotPool::new(config.capacity),
            clock: 0,
            next_ordinal: 1,
            eviction: config.eviction,
            page_size: config.page_size.max(1),
            window: HitWindow::default(),
            counters: CacheCounters::default(),
        }
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self::new(CacheConfig::new(capacity))
    }

    pub fn pool(&self) -> &SlotPool {
        &self.pool
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn eviction_mode(&self) -> EvictionMode {
        self.eviction
    }

    pub fn counters(&self) -> CacheCounters {
        self.counters
    }

    pub fn root_handle(&self) -> PathHandle {
        PathHandle(ROOT)
    }

    fn node(&self, id: NodeId) -> &CacheNode {
        self.nodes[id.0].as_ref().expect("live node")
    }

    fn node_mut(&mut self, id: NodeId) -> &mut CacheNode {
        self.nodes[id.0].as_mut().expect("live node")
    }

    fn is_live(&self, id: NodeId) -> bool {
        self.nodes.get(id.0).is_some_and(Option::is_some)
    }

    fn alloc_node(&mut self, node: CacheNode) -> NodeId {
        match self.free_ids.pop() {
            Some(i) => {
                self.nodes[i] = Some(node);
                NodeId(i)
            }
            None => {
                self.nodes.push(Some(node));
                NodeId(self.nodes.len() - 1)
            }
        }
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Splits `id` after its first `at` tokens. The new head node takes over
    /// the parent link; `id` keeps the tail so outstanding handles stay the
    /// deepest node of their path.
    fn split(&mut self, id: NodeId, at: usize) -> NodeId {
        let ordinal = self.next_ordinal;
        self.next_ordinal += 1;
        let node = self.node_mut(id);
        debug_assert!(at > 0 && at < node.segment.len());
        let tail_segment = node.segment.split_off(at);
        let head_segment = std::mem::replace(&mut node.segment, tail_segment);
        let head_slots = if node.tier == Tier::Device {
            let tail_slots = node.slots.split_off(at);
            std::mem::replace(&mut node.slots, tail_slots)
        } else {
            Vec::new()
        };
        let head = CacheNode {
            segment: head_segment,
            slots: head_slots,
            parent: node.parent,
            children: BTreeMap::new(),
            last_access: node.last_access,
            pin_count: node.pin_count,
            tier: node.tier,
            ordinal,
        };
        let first_tail = node.segment[0];
        let parent = node.parent.expect("root is never split");
        let head_first = head.segment[0];
        let head_id = self.alloc_node(head);
        self.node_mut(head_id).children.insert(first_tail, id);
        self.node_mut(id).parent = Some(head_id);
        self.node_mut(parent).children.insert(head_first, head_id);
        head_id
    }

    /// Walks `tokens` from the root, splitting the last touched node on a
    /// partial match so that the returned path covers exactly the matched
    /// tokens. Returns (device path, device length, host path, host length).
    fn walk(&mut self, tokens: &[Token]) -> (Vec<NodeId>, usize, Vec<NodeId>, usize) {
        let mut device_path = Vec::new();
        let mut host_path = Vec::new();
        let mut device_len = 0;
        let mut host_len = 0;
        let mut cur = ROOT;
        let mut i = 0;
        while i < tokens.len() {
            let Some(&child) = self.node(cur).children.get(&tokens[i]) else {
                break;
            };
            let seg = &self.node(child).segment;
            let common = seg
                .iter()
                .zip(&tokens[i..])
                .take_while(|(a, b)| a == b)
                .count();
            let seg_len = seg.len();
            let node_id = if common < seg_len {
                self.split(child, common)
            } else {
                child
            };
            match self.node(node_id).tier {
                Tier::Device if host_path.is_empty() => {
                    device_path.push(node_id);
                    device_len += common;
                }
                _ => {
                    host_path.push(node_id);
                    host_len += common;
                }
            }
            i += common;
            cur = node_id;
            if common < seg_len {
                break;
            }
        }
        (device_path, device_len, host_path, host_len)
    }

    /// Truncates a device path so its length is a multiple of the page size.
    fn page_align(&mut self, path: &mut Vec<NodeId>, len: usize) -> usize {
        let aligned = len - len % self.page_size;
        if aligned == len {
            return len;
        }
        let mut depth = 0;
        let mut keep = 0;
        for (k, &id) in path.iter().enumerate() {
            let seg = self.node(id).segment.len();
            if depth + seg > aligned {
                let within = aligned - depth;
                if within > 0 {
                    let head = self.split(id, within);
                    path[k] = head;
                    keep = k + 1;
                } else {
                    keep = k;
                }
                break;
            }
            depth += seg;
            keep = k + 1;
        }
        path.truncate(keep);
        aligned
    }

    /// Longest device-resident prefix of `tokens`. Refreshes the LRU stamp of
    /// every node on the matched path and feeds the hit-rate window.
    pub fn match_prefix(&mut self, tokens: &[Token]) -> PrefixMatch {
        let stamp = self.tick();
        let (mut path, mut matched_len, host_path, mut host_len) = self.walk(tokens);
        if self.page_size > 1 {
            let aligned = self.page_align(&mut path, matched_len);
            if aligned != matched_len {
                host_len = 0;
            }
            matched_len = aligned;
        }
        for &id in path.iter().chain(host_path.iter()) {
            self.node_mut(id).last_access = stamp;
        }
        self.window.matched += matched_len as f64;
        self.window.requested += tokens.len() as f64;
        let handle = PathHandle(path.last().copied().unwrap_or(ROOT));
        PrefixMatch {
            matched_len,
            host_len,
            path,
            handle,
        }
    }

    /// Credits tokens served from the host tier to the hit window.
    pub fn record_host_hits(&mut self, tokens: usize) {
        self.window.matched += tokens as f64;
    }

    /// Makes the whole of `tokens` device resident, allocating slots for the
    /// part not already on the device. Host-tier nodes on the path are
    /// reloaded. Unpinned leaves are evicted with the tree's eviction mode
    /// when the pool is short; the matched path itself is protected.
    pub fn insert(&mut self, tokens: &[Token]) -> Result<(Insertion, EvictOutcome), CacheError> {
        let stamp = self.tick();
        let (device_path, device_len, host_path, host_len) = self.walk(tokens);
        for &id in device_path.iter().chain(host_path.iter()) {
            self.node_mut(id).last_access = stamp;
        }
        let needed = tokens.len() - device_len;
        let guard = PathHandle(device_path.last().copied().unwrap_or(ROOT));
        let mut outcome = EvictOutcome::default();
        if self.pool.free() < needed {
            self.pin_path(guard);
            outcome = self.evict(needed - self.pool.free(), self.eviction);
            self.unpin_path(guard).expect("guard pin");
            if self.pool.free() < needed {
                return Err(CacheError::InsufficientSlots {
                    needed,
                    available: self.pool.free(),
                });
            }
        }

        let mut last = device_path.last().copied().unwrap_or(ROOT);
        for &id in &host_path {
            let n = self.node(id).segment.len();
            let slots = self.pool.allocate(n);
            let node = self.node_mut(id);
            node.slots = slots;
            node.tier = Tier::Device;
            last = id;
        }
        self.counters.reloaded_tokens += host_len as u64;

        let offset = device_len + host_len;
        if offset < tokens.len() {
            let segment = tokens[offset..].to_vec();
            let slots = self.pool.allocate(segment.len());
            let ordinal = self.next_ordinal;
            self.next_ordinal += 1;
            let pin_count = 0;
            let first = segment[0];
            let id = self.alloc_node(CacheNode {
                segment,
                slots,
                parent: Some(last),
                children: BTreeMap::new(),
                last_access: stamp,
                pin_count,
                tier: Tier::Device,
                ordinal,
            });
            self.node_mut(last).children.insert(first, id);
            last = id;
        }
        Ok((
            Insertion {
                inserted_len: needed,
                reloaded_len: host_len,
                handle: PathHandle(last),
            },
            outcome,
        ))
    }

    fn eviction_candidate(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .skip(1)
            .filter_map(|(i, n)| n.as_ref().map(|n| (NodeId(i), n)))
            .filter(|(_, n)| {
                n.tier == Tier::Device && n.pin_count == 0 && !n.has_device_child(&self.nodes)
            })
            .min_by_key(|(_, n)| (n.last_access, n.ordinal))
            .map(|(id, _)| id)
    }

    /// Reclaims `needed` device slots from unpinned leaves, least recently
    /// used first. A leaf longer than the remaining need loses only its
    /// tail. Falls short only when no unpinned leaf remains.
    pub fn evict(&mut self, needed: usize, mode: EvictionMode) -> EvictOutcome {
        let mut out = EvictOutcome::default();
        while out.reclaimed < needed {
            let Some(victim) = self.eviction_candidate() else {
                break;
            };
            // Only the tail the request still needs is reclaimed.
            let len = self.node(victim).segment.len();
            let n = len.min(needed - out.reclaimed);
            if n < len {
                self.split(victim, len - n);
            }
            match mode {
                EvictionMode::Discard => self.remove_subtree(victim),
                EvictionMode::Offload => {
                    let node = self.node_mut(victim);
                    let slots = std::mem::take(&mut node.slots);
                    node.tier = Tier::Host;
                    self.pool.release(slots);
                    out.offloaded += n;
                    out.transfers += 1;
                    self.counters.offloaded_tokens += n as u64;
                }
            }
            out.reclaimed += n;
            self.counters.evicted_tokens += n as u64;
            self.counters.evictions += 1;
        }
        out
    }

    /// Detaches `id` from its parent and frees it with every descendant.
    fn remove_subtree(&mut self, id: NodeId) {
        let node = self.node(id);
        let first = node.segment[0];
        if let Some(parent) = node.parent {
            self.node_mut(parent).children.remove(&first);
        }
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            let node = self.nodes[cur.0].take().expect("live node");
            debug_assert_eq!(node.pin_count, 0);
            stack.extend(node.children.values().copied());
            self.pool.release(node.slots);
            self.free_ids.push(cur.0);
        }
    }

    fn ancestors(&self, handle: PathHandle) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = Some(handle.0);
        while let Some(id) = cur {
            if id == ROOT {
                break;
            }
            out.push(id);
            cur = self.node(id).parent;
        }
        out
    }

    pub fn pin_path(&mut self, handle: PathHandle) {
        for id in self.ancestors(handle) {
            self.node_mut(id).pin_count += 1;
        }
    }

    pub fn unpin_path(&mut self, handle: PathHandle) -> Result<(), CacheError> {
        if !self.is_live(handle.0) {
            return Err(CacheError::StaleHandle(handle.0 .0));
        }
        let path = self.ancestors(handle);
        if let Some(id) = path.iter().find(|id| self.node(**id).pin_count == 0) {
            return Err(CacheError::UnpinUnderflow(id.0));
        }
        for id in path {
            self.node_mut(id).pin_count -= 1;
        }
        Ok(())
    }

    /// Drops the unpinned, childless tail of the path ending at `handle`,
    /// stopping at the first node still shared or pinned. Used when an agent
    /// finishes and gives its cache back.
    pub fn release_path(&mut self, handle: PathHandle) -> usize {
        let mut freed = 0;
        let mut cur = handle.0;
        while cur != ROOT && self.is_live(cur) {
            let node = self.node(cur);
            if node.pin_count > 0 || !node.children.is_empty() {
                break;
            }
            let parent = node.parent.expect("non-root has parent");
            if node.tier == Tier::Device {
                freed += node.segment.len();
            }
            self.remove_subtree(cur);
            cur = parent;
        }
        freed
    }

    pub fn pin_count(&self, id: NodeId) -> u32 {
        self.node(id).pin_count
    }

    pub fn last_access(&self, id: NodeId) -> u64 {
        self.node(id).last_access
    }

    /// U_t: device slots in use over pool capacity.
    pub fn usage(&self) -> f64 {
        if self.pool.capacity == 0 {
            return 0.0;
        }
        self.pool.used() as f64 / self.pool.capacity as f64
    }

    /// H_t over the current window; 1.0 when nothing was requested.
    pub fn hit_rate(&self) -> f64 {
        if self.window.requested <= 0.0 {
            1.0
        } else {
            (self.window.matched / self.window.requested).clamp(0.0, 1.0)
        }
    }

    /// Window totals as (matched, requested).
    pub fn hit_window(&self) -> (f64, f64) {
        (self.window.matched, self.window.requested)
    }

    /// Starts a new hit-rate window. `decay` of 0 clears the window, values
    /// in (0, 1) carry a geometrically weighted history forward.
    pub fn reset_hit_window(&mut self, decay: f64) {
        self.window.matched *= decay;
        self.window.requested *= decay;
    }

    /// Slots currently held by pinned nodes.
    pub fn pinned_slots(&self) -> usize {
        self.live_nodes()
            .filter(|(_, n)| n.pin_count > 0 && n.tier == Tier::Device)
            .map(|(_, n)| n.slots.len())
            .sum()
    }

    fn live_nodes(&self) -> impl Iterator<Item = (NodeId, &CacheNode)> {
        self.nodes
            .iter()
            .enumerate()
            .skip(1)
            .filter_map(|(i, n)| n.as_ref().map(|n| (NodeId(i), n)))
    }

    pub fn node_count(&self) -> usize {
        self.live_nodes().count()
    }

    /// Every device-resident token prefix, each identified by its full
    /// token path from the root.
    pub fn device_prefixes(&self) -> BTreeSet<Vec<Token>> {
        let mut out = BTreeSet::new();
        let mut stack = vec![(ROOT, Vec::new())];
        while let Some((id, prefix)) = stack.pop() {
            for &child in self.node(id).children.values() {
                let node = self.node(child);
                if node.tier != Tier::Device {
                    continue;
                }
                let mut p = prefix.clone();
                for &t in &node.segment {
                    p.push(t);
                    out.insert(p.clone());
                }
                stack.push((child, p));
            }
        }
        out
    }

    /// Diagnostic dump, one line per node in depth-first order:
    /// `depth segment_len tier pin_count last_access`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![(ROOT, 0usize)];
        while let Some((id, depth)) = stack.pop() {
            let node = self.node(id);
            let tier = match node.tier {
                Tier::Device => "device",
                Tier::Host => "host",
            };
            let _ = writeln!(
                out,
                "{depth} {} {tier} {} {}",
                node.segment.len(),
                node.pin_count,
                node.last_access
            );
            for &child in node.children.values().rev() {
                stack.push((child, depth + 1));
            }
        }
        out
    }

    /// Checks structural invariants, returning a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.pool.used() + self.pool.free() != self.pool.capacity() {
            return Err("pool conservation violated".into());
        }
        let mut device_slots = 0;
        for (id, node) in self.live_nodes() {
            if node.segment.is_empty() {
                return Err(format!("node {} has empty segment", id.0));
            }
            let parent = node.parent.ok_or("non-root node without parent")?;
            let p = self.nodes[parent.0]
                .as_ref()
                .ok_or(format!("node {} has dead parent", id.0))?;
            if p.children.get(&node.segment[0]) != Some(&id) {
                return Err(format!("node {} not indexed by its parent", id.0));
            }
            if p.pin_count < node.pin_count && parent != ROOT {
                return Err(format!("pin count of node {} exceeds its parent", id.0));
            }
            match node.tier {
                Tier::Device => {
                    if node.slots.len() != node.segment.len() {
                        return Err(format!("node {} slot/segment mismatch", id.0));
                    }
                    if p.tier != Tier::Device {
                        return Err(format!("device node {} under host parent", id.0));
                    }
                    device_slots += node.slots.len();
                }
                Tier::Host => {
                    if !node.slots.is_empty() {
                        return Err(format!("host node {} holds device slots", id.0));
                    }
                    if node.pin_count > 0 {
                        return Err(format!("host node {} is pinned", id.0));
                    }
                }
            }
            for (tok, child) in &node.children {
                let c = self.nodes[child.0]
                    .as_ref()
                    .ok_or(format!("node {} has dead child", id.0))?;
                if c.segment[0] != *tok {
                    return Err(format!("child key mismatch under node {}", id.0));
                }
            }
        }
        if device_slots != self.pool.used() {
            return Err(format!(
                "device slots {device_slots} != pool.used {}",
                self.pool.used()
            ));
        }
        Ok(())
    }
}
