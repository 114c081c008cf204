//! Locality-aware multi-ring overlay.
//!
//! Every live node keeps a two-level routing table (zone fingers plus
//! base-`2^b` prefix rows over the intra-zone suffix), a leaf set of the
//! numerically nearest nodes and a neighborhood set of the
//! proximity-nearest nodes. Every entry is a deterministic function of the
//! live membership, so incremental join/leave/repair converges to the same
//! state a fresh build would produce.
//!
//! Routing is memoryless: the next hop depends only on the current node and
//! the key. Every hop strictly improves closeness to the key (ring distance,
//! ties toward the clockwise identifier), which rules out loops.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};
use thiserror::Error;

use crate::idspace::{closer_to, clockwise_distance, ring_distance, zone_distance, NodeId, ZoneConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OverlayError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("membership error: {0}")]
    Membership(String),
    #[error("bootstrap node {0} is not live")]
    Bootstrap(NodeId),
    #[error("node {0} is not live")]
    NotLive(NodeId),
    #[error("node {0} is already a member")]
    AlreadyMember(NodeId),
    #[error("route blocked at zone boundary by {at}")]
    Blocked { at: NodeId, path: RoutePath },
    #[error("internal invariant violated: routing loop after {0} hops")]
    RoutingLoop(usize),
}

/// Round-trip time oracle between two overlay nodes, in milliseconds.
pub trait Proximity: Send + Sync {
    fn rtt_ms(&self, a: NodeId, b: NodeId) -> f64;
}

impl<F> Proximity for F
where
    F: Fn(NodeId, NodeId) -> f64 + Send + Sync,
{
    fn rtt_ms(&self, a: NodeId, b: NodeId) -> f64 {
        self(a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayConfig {
    pub zone: ZoneConfig,
    /// Digit width `b`; trees fan out by up to `2^b`.
    pub digit_bits: u32,
    /// Total leaf-set size (half on each side).
    pub leaf_set_size: usize,
    pub neighborhood_size: usize,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self {
            zone: ZoneConfig::default(),
            digit_bits: 4,
            leaf_set_size: 24,
            neighborhood_size: 8,
        }
    }
}

impl OverlayConfig {
    pub fn validate(&self) -> Result<(), OverlayError> {
        if !(1..=8).contains(&self.digit_bits) {
            return Err(OverlayError::Config(format!(
                "digit bits b must be in 1..=8, got {}",
                self.digit_bits
            )));
        }
        if self.leaf_set_size < 2 || self.leaf_set_size % 2 != 0 {
            return Err(OverlayError::Config(format!(
                "leaf set size must be even and >= 2, got {}",
                self.leaf_set_size
            )));
        }
        Ok(())
    }

    /// Number of base-`2^b` digits in the intra-zone suffix.
    pub fn digit_count(&self) -> u32 {
        self.zone.suffix_bits().div_ceil(self.digit_bits)
    }

    fn digit_width(&self, row: u32) -> u32 {
        self.digit_bits.min(self.zone.suffix_bits() - row * self.digit_bits)
    }

    /// Bit offset (from the least significant end of the suffix) of the low
    /// edge of digit `row`.
    fn digit_shift(&self, row: u32) -> u32 {
        self.zone.suffix_bits() - row * self.digit_bits - self.digit_width(row)
    }

    pub fn digit(&self, suffix: u128, row: u32) -> u32 {
        let w = self.digit_width(row);
        ((suffix >> self.digit_shift(row)) & ((1u128 << w) - 1)) as u32
    }

    /// Number of leading suffix digits two identifiers share.
    pub fn shared_digits(&self, a: u128, b: u128) -> u32 {
        let n = self.zone.suffix_bits();
        let x = self.zone.suffix_of(a) ^ self.zone.suffix_of(b);
        if x == 0 {
            return self.digit_count();
        }
        let shared_bits = x.leading_zeros() - self.zone.prefix_bits();
        (shared_bits.min(n)) / self.digit_bits
    }
}

/// Level-1 target for entry `i` (1-based): `((P + 2^(i-1)) mod 2^m) * 2^n`.
pub fn level1_target(prefix: u64, i: u32, m: u32, n: u32) -> u128 {
    (((prefix + (1u64 << (i - 1))) % (1u64 << m)) as u128) << n
}

/// All `m` level-1 targets of a node in zone `prefix`.
pub fn level1_targets(prefix: u32, cfg: &ZoneConfig) -> Vec<u128> {
    (1..=cfg.prefix_bits())
        .map(|i| level1_target(prefix as u64, i, cfg.prefix_bits(), cfg.suffix_bits()))
        .collect()
}

/// Level-2 finger target for entry `i` (1-based): `(S + 2^(i-1)) mod 2^n`.
pub fn level2_finger_targets(suffix: u128, suffix_bits: u32) -> Vec<u128> {
    let mask = if suffix_bits >= 128 {
        u128::MAX
    } else {
        (1u128 << suffix_bits) - 1
    };
    (1..=suffix_bits)
        .map(|i| suffix.wrapping_add(1u128 << (i - 1)) & mask)
        .collect()
}

/// Administrative flags for one zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZonePolicy {
    pub allow_egress: bool,
    pub allow_ingress: bool,
}

impl Default for ZonePolicy {
    fn default() -> Self {
        Self {
            allow_egress: true,
            allow_ingress: true,
        }
    }
}

/// Result of distributed binning against a fixed landmark list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinLabel {
    /// Landmark indices ordered by increasing RTT.
    pub order: Vec<usize>,
    /// Per-landmark level: number of thresholds the RTT reaches.
    pub levels: Vec<u8>,
}

impl BinLabel {
    pub fn zone_prefix(&self, cfg: &ZoneConfig) -> u32 {
        let mut h = Sha1::new();
        for o in &self.order {
            h.update((*o as u32).to_be_bytes());
        }
        h.update([0xff]);
        h.update(&self.levels);
        let d = h.finalize();
        u32::from_be_bytes([d[0], d[1], d[2], d[3]]) % cfg.zone_count()
    }
}

/// Bins a node from its RTTs to the landmarks.
pub fn bin_node(rtts_ms: &[f64], thresholds_ms: &[f64]) -> Result<BinLabel, OverlayError> {
    if rtts_ms.is_empty() {
        return Err(OverlayError::Config("binning needs at least one landmark".into()));
    }
    if thresholds_ms.windows(2).any(|w| w[0] > w[1]) {
        return Err(OverlayError::Config("binning thresholds must be ascending".into()));
    }
    let mut order: Vec<usize> = (0..rtts_ms.len()).collect();
    order.sort_by(|&a, &b| rtts_ms[a].total_cmp(&rtts_ms[b]).then(a.cmp(&b)));
    let levels = rtts_ms
        .iter()
        .map(|&r| thresholds_ms.iter().filter(|&&t| r >= t).count() as u8)
        .collect();
    Ok(BinLabel { order, levels })
}

/// Number of logical nodes a host of the given capacity is split into.
pub fn logical_node_count(capacity: u32, unit: u32) -> Result<u32, OverlayError> {
    if capacity == 0 {
        return Err(OverlayError::Config("host capacity must be at least one unit".into()));
    }
    if unit == 0 {
        return Err(OverlayError::Config("capacity unit must be positive".into()));
    }
    Ok(capacity.div_ceil(unit).max(1))
}

/// Splits a physical host into independent logical NodeIds in its zone.
pub fn multiplex_logical_nodes(
    host_key: &[u8],
    zone_prefix: u32,
    capacity: u32,
    unit: u32,
    cfg: &ZoneConfig,
) -> Result<Vec<NodeId>, OverlayError> {
    let count = logical_node_count(capacity, unit)?;
    (0..count)
        .map(|i| {
            let mut h = Sha1::new();
            h.update(host_key);
            h.update(i.to_be_bytes());
            let d = h.finalize();
            let mut top = [0u8; 16];
            top.copy_from_slice(&d[..16]);
            let suffix = u128::from_be_bytes(top) & cfg.suffix_mask();
            crate::idspace::make_node_id(zone_prefix as u128, suffix, cfg)
                .map_err(|e| OverlayError::Config(e.to_string()))
        })
        .collect()
}

/// Per-node routing state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingState {
    pub owner: NodeId,
    /// Zone targets from the level-1 formula (entry `i` at index `i-1`).
    pub level1_targets: Vec<u128>,
    /// Occupants of the clockwise level-1 entries.
    pub level1: Vec<Option<NodeId>>,
    /// Occupants of the mirrored counter-clockwise entries `P - 2^(i-1)`.
    pub level1_ccw: Vec<Option<NodeId>>,
    /// Prefix rows over the suffix; `level2[r][d]` shares `r` digits with the
    /// owner and has digit `d` at position `r`.
    pub level2: Vec<Vec<Option<NodeId>>>,
    /// Clockwise half of the leaf set, nearest first.
    pub leaf_cw: Vec<NodeId>,
    /// Counter-clockwise half of the leaf set, nearest first.
    pub leaf_ccw: Vec<NodeId>,
    /// True when the leaf set holds every other live node.
    pub leaf_complete: bool,
    /// Proximity-nearest nodes, nearest first.
    pub neighborhood: Vec<NodeId>,
}

impl RoutingState {
    /// Leaf set ordered by ring distance to the owner.
    pub fn leaf_set(&self) -> Vec<NodeId> {
        let mut all: Vec<NodeId> = self.leaf_cw.iter().chain(&self.leaf_ccw).copied().collect();
        all.sort_by(|a, b| closer_to(self.owner.0, a.0, b.0));
        all.dedup();
        all
    }

    fn known(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.leaf_cw
            .iter()
            .chain(&self.leaf_ccw)
            .copied()
            .chain(self.level2.iter().flatten().flatten().copied())
            .chain(self.level1.iter().flatten().copied())
            .chain(self.level1_ccw.iter().flatten().copied())
            .chain(self.neighborhood.iter().copied())
    }

    pub fn references(&self, node: NodeId) -> bool {
        self.known().any(|x| x == node)
    }
}

/// Ordered hop list from the source to the delivering node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutePath {
    pub hops: Vec<NodeId>,
}

impl RoutePath {
    pub fn hop_count(&self) -> usize {
        self.hops.len().saturating_sub(1)
    }

    pub fn source(&self) -> NodeId {
        self.hops[0]
    }

    pub fn destination(&self) -> NodeId {
        *self.hops.last().expect("route path is never empty")
    }
}

/// Zone restriction applied while forwarding a message.
#[derive(Clone, Copy)]
enum Scope {
    Open,
    Zone(u32),
}

/// The overlay: live membership plus every node's routing state.
pub struct Overlay {
    cfg: OverlayConfig,
    ring: Vec<u128>,
    states: BTreeMap<NodeId, RoutingState>,
    policies: BTreeMap<u32, ZonePolicy>,
    proximity: Arc<dyn Proximity>,
}

impl std::fmt::Debug for Overlay {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Overlay")
            .field("cfg", &self.cfg)
            .field("live", &self.ring.len())
            .finish()
    }
}

impl Overlay {
    /// Bulk-builds the overlay over a set of nodes.
    pub fn build(
        cfg: OverlayConfig,
        nodes: impl IntoIterator<Item = NodeId>,
        proximity: Arc<dyn Proximity>,
    ) -> Result<Self, OverlayError> {
        cfg.validate()?;
        let mut ring: Vec<u128> = nodes.into_iter().map(|n| n.0).collect();
        ring.sort_unstable();
        ring.dedup();
        if ring.is_empty() {
            return Err(OverlayError::Membership("overlay needs at least one node".into()));
        }
        let mut overlay = Self {
            cfg,
            ring,
            states: BTreeMap::new(),
            policies: BTreeMap::new(),
            proximity,
        };
        let ids: Vec<NodeId> = overlay.ring.iter().map(|&x| NodeId(x)).collect();
        for id in ids {
            let st = overlay.compute_state(id);
            overlay.states.insert(id, st);
        }
        Ok(overlay)
    }

    pub fn config(&self) -> &OverlayConfig {
        &self.cfg
    }

    pub fn proximity(&self) -> &Arc<dyn Proximity> {
        &self.proximity
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn is_live(&self, id: NodeId) -> bool {
        self.ring.binary_search(&id.0).is_ok()
    }

    pub fn live_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.ring.iter().map(|&x| NodeId(x))
    }

    pub fn state(&self, id: NodeId) -> Option<&RoutingState> {
        self.states.get(&id)
    }

    pub fn zone_of(&self, id: NodeId) -> u32 {
        id.zone(&self.cfg.zone)
    }

    pub fn set_zone_policy(&mut self, zone: u32, policy: ZonePolicy) {
        self.policies.insert(zone, policy);
    }

    pub fn zone_policy(&self, zone: u32) -> ZonePolicy {
        self.policies.get(&zone).copied().unwrap_or_default()
    }

    /// Live node closest to `key` (ties toward the clockwise node).
    pub fn closest_live(&self, key: u128) -> Option<NodeId> {
        self.closest_in(&self.ring, key)
    }

    /// Live node closest to `key` among the nodes of one zone.
    pub fn closest_live_in_zone(&self, key: u128, zone: u32) -> Option<NodeId> {
        let (lo, hi) = self.zone_bounds(zone);
        self.closest_in(&self.ring[lo..hi], key)
    }

    /// Proximity-based RTT between two nodes.
    pub fn rtt_ms(&self, a: NodeId, b: NodeId) -> f64 {
        self.proximity.rtt_ms(a, b)
    }

    fn closest_in(&self, slice: &[u128], key: u128) -> Option<NodeId> {
        if slice.is_empty() {
            return None;
        }
        let pos = slice.partition_point(|&x| x < key);
        let mut cands = vec![slice[pos % slice.len()], slice[(pos + slice.len() - 1) % slice.len()]];
        cands.dedup();
        cands.into_iter().min_by(|a, b| closer_to(key, *a, *b)).map(NodeId)
    }

    fn zone_bounds(&self, zone: u32) -> (usize, usize) {
        let z = &self.cfg.zone;
        let lo_id = z.zone_start(zone);
        let lo = self.ring.partition_point(|&x| x < lo_id);
        let hi = if zone + 1 == z.zone_count() {
            self.ring.len()
        } else {
            let hi_id = z.zone_start(zone + 1);
            self.ring.partition_point(|&x| x < hi_id)
        };
        (lo, hi)
    }

    /// Live node inside `[lo, lo + size)` closest to `target` (which lies inside the range).
    fn closest_in_range(&self, lo: u128, size_bits: u32, target: u128, exclude: u128) -> Option<NodeId> {
        let hi_incl = if size_bits >= 128 {
            u128::MAX
        } else {
            lo + ((1u128 << size_bits) - 1)
        };
        let pos = self.ring.partition_point(|&x| x < target);
        let mut best: Option<u128> = None;
        let mut consider = |x: u128| {
            if x >= lo && x <= hi_incl && x != exclude {
                best = match best {
                    Some(b) if closer_to(target, b, x) != Ordering::Greater => Some(b),
                    _ => Some(x),
                };
            }
        };
        // Scan outward on each side, skipping the excluded owner.
        for i in pos..self.ring.len().min(pos + 2) {
            consider(self.ring[i]);
        }
        for i in pos.saturating_sub(2)..pos {
            consider(self.ring[i]);
        }
        best.map(NodeId)
    }

    /// Computes the routing state of `owner` from the current live set.
    pub fn build_routing_state(&self, owner: NodeId) -> Result<RoutingState, OverlayError> {
        if self.ring.is_empty() {
            return Err(OverlayError::Membership("no live peers".into()));
        }
        if !self.is_live(owner) {
            return Err(OverlayError::NotLive(owner));
        }
        Ok(self.compute_state(owner))
    }

    fn compute_state(&self, owner: NodeId) -> RoutingState {
        let (level1, level1_ccw) = self.compute_level1(owner);
        let level2 = self.compute_level2(owner);
        let (leaf_cw, leaf_ccw, leaf_complete) = self.compute_leaf(owner);
        let neighborhood = self.compute_neighborhood(owner);
        RoutingState {
            owner,
            level1_targets: level1_targets(owner.zone(&self.cfg.zone), &self.cfg.zone),
            level1,
            level1_ccw,
            level2,
            leaf_cw,
            leaf_ccw,
            leaf_complete,
            neighborhood,
        }
    }

    fn level1_occupant(&self, owner: NodeId, zone: u32) -> Option<NodeId> {
        let z = &self.cfg.zone;
        if zone == owner.zone(z) {
            return None;
        }
        self.closest_live_in_zone(z.zone_start(zone) | owner.suffix(z), zone)
    }

    fn compute_level1(&self, owner: NodeId) -> (Vec<Option<NodeId>>, Vec<Option<NodeId>>) {
        let z = &self.cfg.zone;
        let p = owner.zone(z) as u64;
        let count = z.zone_count() as u64;
        let mut cw = Vec::with_capacity(z.prefix_bits() as usize);
        let mut ccw = Vec::with_capacity(z.prefix_bits() as usize);
        for i in 1..=z.prefix_bits() {
            let step = 1u64 << (i - 1);
            cw.push(self.level1_occupant(owner, ((p + step) % count) as u32));
            ccw.push(self.level1_occupant(owner, ((p + count - step) % count) as u32));
        }
        (cw, ccw)
    }

    fn row_range(&self, owner: NodeId, row: u32, digit: u32) -> (u128, u32, u128) {
        let cfg = &self.cfg;
        let z = &cfg.zone;
        let shift = cfg.digit_shift(row);
        let keep_mask = !((1u128 << (shift + cfg.digit_width(row))) - 1) & z.suffix_mask();
        let suffix = owner.suffix(z);
        let base = z.zone_start(owner.zone(z)) | (suffix & keep_mask) | ((digit as u128) << shift);
        let low_mask = if shift == 0 { 0 } else { (1u128 << shift) - 1 };
        let target = base | (suffix & low_mask);
        (base, shift, target)
    }

    fn compute_level2(&self, owner: NodeId) -> Vec<Vec<Option<NodeId>>> {
        let cfg = &self.cfg;
        let z = &cfg.zone;
        let width = 1usize << cfg.digit_bits;
        let (zlo, zhi) = self.zone_bounds(owner.zone(z));
        let mut rows = Vec::new();
        if zhi - zlo <= 1 {
            return rows;
        }
        let suffix = owner.suffix(z);
        for row in 0..cfg.digit_count() {
            // Stop once no other node shares `row` digits with the owner.
            let shift_above = z.suffix_bits() - row * cfg.digit_bits;
            let region_lo = z.zone_start(owner.zone(z))
                | if shift_above >= 128 {
                    0
                } else {
                    suffix & !((1u128 << shift_above) - 1) & z.suffix_mask()
                };
            let region_hi = if shift_above >= 128 {
                u128::MAX
            } else {
                region_lo + ((1u128 << shift_above) - 1)
            };
            let a = self.ring.partition_point(|&x| x < region_lo);
            let b = self.ring.partition_point(|&x| x <= region_hi);
            if b - a <= 1 {
                break;
            }
            let own_digit = cfg.digit(suffix, row);
            let mut entries = vec![None; width];
            let row_width = 1u32 << cfg.digit_width(row);
            for d in 0..row_width {
                if d == own_digit {
                    continue;
                }
                let (base, shift, target) = self.row_range(owner, row, d);
                entries[d as usize] = self.closest_in_range(base, shift, target, owner.0);
            }
            rows.push(entries);
        }
        rows
    }

    fn compute_leaf(&self, owner: NodeId) -> (Vec<NodeId>, Vec<NodeId>, bool) {
        let n = self.ring.len();
        let others = n - 1;
        let half = self.cfg.leaf_set_size / 2;
        let pos = self.ring.binary_search(&owner.0).expect("owner is live");
        let (n_cw, n_ccw) = if others <= self.cfg.leaf_set_size {
            (others.div_ceil(2), others / 2)
        } else {
            (half, half)
        };
        let cw = (1..=n_cw).map(|i| NodeId(self.ring[(pos + i) % n])).collect();
        let ccw = (1..=n_ccw).map(|i| NodeId(self.ring[(pos + n - i) % n])).collect();
        (cw, ccw, others <= self.cfg.leaf_set_size)
    }

    fn compute_neighborhood(&self, owner: NodeId) -> Vec<NodeId> {
        let k = self.cfg.neighborhood_size;
        if k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(f64, u128)> = Vec::with_capacity(k + 1);
        for &x in &self.ring {
            if x == owner.0 {
                continue;
            }
            let d = self.proximity.rtt_ms(owner, NodeId(x));
            if best.len() == k {
                let worst = best[k - 1];
                if (d, x) >= worst {
                    continue;
                }
            }
            let at = best.partition_point(|&(bd, bx)| (bd, bx) < (d, x));
            best.insert(at, (d, x));
            best.truncate(k);
        }
        best.into_iter().map(|(_, x)| NodeId(x)).collect()
    }

    /// Adds `new_node` to the overlay through a live bootstrap node and
    /// updates every state the newcomer improves. Returns the JOIN path.
    pub fn join(&mut self, new_node: NodeId, bootstrap: NodeId) -> Result<RoutePath, OverlayError> {
        if !self.is_live(bootstrap) {
            return Err(OverlayError::Bootstrap(bootstrap));
        }
        if self.is_live(new_node) {
            return Err(OverlayError::AlreadyMember(new_node));
        }
        let path = self.route(new_node.0, bootstrap)?;
        let pos = self.ring.partition_point(|&x| x < new_node.0);
        self.ring.insert(pos, new_node.0);
        let st = self.compute_state(new_node);
        self.states.insert(new_node, st);
        self.announce(new_node);
        Ok(path)
    }

    /// Graceful departure: the node is removed and every reference repaired.
    pub fn leave(&mut self, node: NodeId) -> Result<(), OverlayError> {
        self.fail(node)?;
        self.repair_all(node);
        Ok(())
    }

    /// Abrupt failure: the node disappears but peers keep stale references
    /// until they run [`Overlay::repair`].
    pub fn fail(&mut self, node: NodeId) -> Result<(), OverlayError> {
        let pos = self
            .ring
            .binary_search(&node.0)
            .map_err(|_| OverlayError::NotLive(node))?;
        if self.ring.len() == 1 {
            return Err(OverlayError::Membership("cannot remove the last live node".into()));
        }
        self.ring.remove(pos);
        self.states.remove(&node);
        Ok(())
    }

    /// Repairs `node`'s state after detecting that `failed_peer` is gone.
    /// Returns the number of entries rebuilt.
    pub fn repair(&mut self, node: NodeId, failed_peer: NodeId) -> Result<usize, OverlayError> {
        if !self.is_live(node) {
            return Err(OverlayError::NotLive(node));
        }
        if self.is_live(failed_peer) {
            return Ok(0);
        }
        let st = self.states.get(&node).expect("live node has state");
        if !st.references(failed_peer) {
            return Ok(0);
        }
        let mut changed = 0;
        let mut st = st.clone();
        let in_leaf = st.leaf_cw.contains(&failed_peer) || st.leaf_ccw.contains(&failed_peer);
        if in_leaf {
            let (cw, ccw, complete) = self.compute_leaf(node);
            st.leaf_cw = cw;
            st.leaf_ccw = ccw;
            st.leaf_complete = complete;
            changed += 1;
        }
        if st.neighborhood.contains(&failed_peer) {
            st.neighborhood = self.compute_neighborhood(node);
            changed += 1;
        }
        let z = self.cfg.zone;
        let p = node.zone(&z) as u64;
        let count = z.zone_count() as u64;
        for i in 0..st.level1.len() {
            let step = 1u64 << i;
            if st.level1[i] == Some(failed_peer) {
                st.level1[i] = self.level1_occupant(node, ((p + step) % count) as u32);
                changed += 1;
            }
            if st.level1_ccw[i] == Some(failed_peer) {
                st.level1_ccw[i] = self.level1_occupant(node, ((p + count - step) % count) as u32);
                changed += 1;
            }
        }
        for r in 0..st.level2.len() {
            for d in 0..st.level2[r].len() {
                if st.level2[r][d] == Some(failed_peer) {
                    let (base, shift, target) = self.row_range(node, r as u32, d as u32);
                    st.level2[r][d] = self.closest_in_range(base, shift, target, node.0);
                    changed += 1;
                }
            }
        }
        // Rows may shrink when the last node sharing a prefix is gone.
        while st.level2.last().is_some_and(|row| row.iter().all(Option::is_none)) {
            st.level2.pop();
        }
        self.states.insert(node, st);
        Ok(changed)
    }

    /// Every live node repairs its references to `failed_peer`. Returns the
    /// nodes that had to change state.
    pub fn repair_all(&mut self, failed_peer: NodeId) -> Vec<NodeId> {
        let affected: Vec<NodeId> = self
            .states
            .iter()
            .filter(|(_, st)| st.references(failed_peer))
            .map(|(id, _)| *id)
            .collect();
        for &id in &affected {
            self.repair(id, failed_peer).expect("affected node is live");
        }
        affected
    }

    /// Updates existing states that the newly inserted node improves.
    fn announce(&mut self, y: NodeId) {
        let cfg = self.cfg;
        let z = cfg.zone;
        let n = self.ring.len();
        let pos = self.ring.binary_search(&y.0).expect("inserted");
        // Leaf sets of nodes within half a leaf set on either side.
        let half = cfg.leaf_set_size / 2;
        let mut leaf_touch = BTreeSet::new();
        if n - 1 <= cfg.leaf_set_size + 1 {
            leaf_touch.extend(self.ring.iter().copied());
        } else {
            for i in 1..=half {
                leaf_touch.insert(self.ring[(pos + i) % n]);
                leaf_touch.insert(self.ring[(pos + n - i) % n]);
            }
        }
        leaf_touch.remove(&y.0);
        let ids: Vec<u128> = self.ring.iter().copied().filter(|&x| x != y.0).collect();
        for x in ids {
            let xid = NodeId(x);
            let mut st = self.states.remove(&xid).expect("live node has state");
            if leaf_touch.contains(&x) {
                let (cw, ccw, complete) = self.compute_leaf(xid);
                st.leaf_cw = cw;
                st.leaf_ccw = ccw;
                st.leaf_complete = complete;
            }
            if xid.zone(&z) == y.zone(&z) {
                let row = cfg.shared_digits(x, y.0);
                if row < cfg.digit_count() {
                    let d = cfg.digit(y.suffix(&z), row) as usize;
                    let (_, _, target) = self.row_range(xid, row, d as u32);
                    while st.level2.len() <= row as usize {
                        st.level2.push(vec![None; 1 << cfg.digit_bits]);
                    }
                    let slot = &mut st.level2[row as usize][d];
                    let better = match slot {
                        None => true,
                        Some(cur) => closer_to(target, y.0, cur.0) == Ordering::Less,
                    };
                    if better {
                        *slot = Some(y);
                    }
                }
            } else {
                let px = xid.zone(&z) as u64;
                let count = z.zone_count() as u64;
                let target = z.zone_start(y.zone(&z)) | xid.suffix(&z);
                for i in 0..z.prefix_bits() as usize {
                    let step = 1u64 << i;
                    for (slot, zone) in [
                        (&mut st.level1[i], ((px + step) % count) as u32),
                        (&mut st.level1_ccw[i], ((px + count - step) % count) as u32),
                    ] {
                        if zone != y.zone(&z) {
                            continue;
                        }
                        let better = match slot {
                            None => true,
                            Some(cur) => closer_to(target, y.0, cur.0) == Ordering::Less,
                        };
                        if better {
                            *slot = Some(y);
                        }
                    }
                }
            }
            let k = cfg.neighborhood_size;
            if k > 0 {
                let d = self.proximity.rtt_ms(xid, y);
                let key = |id: NodeId, d: f64| (d, id.0);
                let worst = st
                    .neighborhood
                    .last()
                    .map(|&w| key(w, self.proximity.rtt_ms(xid, w)));
                if st.neighborhood.len() < k || worst.is_some_and(|w| key(y, d) < w) {
                    let prox = &self.proximity;
                    let at = st
                        .neighborhood
                        .partition_point(|&w| key(w, prox.rtt_ms(xid, w)) < key(y, d));
                    st.neighborhood.insert(at, y);
                    st.neighborhood.truncate(k);
                }
            }
            self.states.insert(xid, st);
        }
    }

    fn policy_allows_entry(&self, origin_zone: u32, to: NodeId) -> bool {
        let zt = self.zone_of(to);
        zt == origin_zone || self.zone_policy(zt).allow_ingress
    }

    /// Routes `key` from `from` to the live node numerically closest to it,
    /// honoring zone policies of the origin zone.
    pub fn route(&self, key: u128, from: NodeId) -> Result<RoutePath, OverlayError> {
        if !self.is_live(from) {
            return Err(OverlayError::NotLive(from));
        }
        let z = self.cfg.zone;
        let origin = self.zone_of(from);
        let key_zone = z.zone_of(key);
        if !self.zone_policy(origin).allow_egress {
            // Stay inside the origin zone. Cross-zone keys stop at the node
            // closest to the zone edge facing the key.
            let target = if key_zone == origin {
                key
            } else {
                let start = z.zone_start(origin);
                let end = start | z.suffix_mask();
                if ring_distance(start, key) <= ring_distance(end, key) {
                    start
                } else {
                    end
                }
            };
            let path = self.route_scoped(target, from, Scope::Zone(origin))?;
            if key_zone != origin {
                return Err(OverlayError::Blocked {
                    at: path.destination(),
                    path,
                });
            }
            return Ok(path);
        }
        let path = self.route_scoped(key, from, Scope::Open)?;
        // Ingress check along the path.
        for (i, w) in path.hops.windows(2).enumerate() {
            if self.zone_of(w[1]) != self.zone_of(w[0]) && !self.policy_allows_entry(origin, w[1]) {
                return Err(OverlayError::Blocked {
                    at: w[0],
                    path: RoutePath {
                        hops: path.hops[..=i].to_vec(),
                    },
                });
            }
        }
        Ok(path)
    }

    /// Next hop for `key` at `current`, or `None` when `current` delivers.
    pub fn next_hop(&self, key: u128, current: NodeId) -> Option<NodeId> {
        self.next_hop_scoped(key, current, Scope::Open)
    }

    fn route_scoped(&self, key: u128, from: NodeId, scope: Scope) -> Result<RoutePath, OverlayError> {
        let mut hops = vec![from];
        let mut cur = from;
        let limit = self.ring.len() + 1;
        while let Some(next) = self.next_hop_scoped(key, cur, scope) {
            hops.push(next);
            cur = next;
            if hops.len() > limit {
                return Err(OverlayError::RoutingLoop(hops.len()));
            }
        }
        Ok(RoutePath { hops })
    }

    fn allowed(&self, x: NodeId, scope: Scope) -> bool {
        self.is_live(x)
            && match scope {
                Scope::Open => true,
                Scope::Zone(zone) => self.zone_of(x) == zone,
            }
    }

    fn next_hop_scoped(&self, key: u128, c: NodeId, scope: Scope) -> Option<NodeId> {
        let st = self.states.get(&c)?;
        let closer = |h: NodeId| closer_to(key, h.0, c.0) == Ordering::Less;

        if let Some(dest) = self.leaf_delivery(st, key, scope) {
            return (dest != c).then_some(dest);
        }

        let z = &self.cfg.zone;
        let kz = z.zone_of(key);
        let cz = c.zone(z);
        if matches!(scope, Scope::Open) && cz != kz {
            let here = zone_distance(cz, kz, z);
            let best = st
                .level1
                .iter()
                .chain(&st.level1_ccw)
                .flatten()
                .copied()
                .filter(|&h| self.is_live(h))
                .filter(|&h| zone_distance(h.zone(z), kz, z) < here)
                .min_by(|a, b| {
                    zone_distance(a.zone(z), kz, z)
                        .cmp(&zone_distance(b.zone(z), kz, z))
                        .then_with(|| closer_to(key, a.0, b.0))
                });
            if best.is_some() {
                return best;
            }
        }

        let mut row = 0;
        if cz == kz {
            row = self.cfg.shared_digits(c.0, key);
            if let Some(entries) = st.level2.get(row as usize) {
                let d = self.cfg.digit(z.suffix_of(key), row) as usize;
                // A longer shared prefix is progress on its own.
                if let Some(h) = entries[d] {
                    if self.allowed(h, scope) {
                        return Some(h);
                    }
                }
            }
        }

        // Rare case: a closer node that keeps the shared prefix, else any
        // closer node.
        let keeps = |h: &NodeId| h.zone(z) == kz && self.cfg.shared_digits(h.0, key) >= row;
        let pick = |want_prefix: bool| {
            st.known()
                .filter(|&h| self.allowed(h, scope) && closer(h) && (!want_prefix || keeps(&h)))
                .min_by(|a, b| closer_to(key, a.0, b.0))
        };
        if cz == kz {
            if let Some(h) = pick(true) {
                return Some(h);
            }
        }
        pick(false)
    }

    /// If `key` falls inside the range covered by the leaf set, the node in
    /// that range closest to it.
    fn leaf_delivery(&self, st: &RoutingState, key: u128, scope: Scope) -> Option<NodeId> {
        let c = st.owner;
        let best_of = |cands: &mut dyn Iterator<Item = NodeId>| {
            cands
                .chain(std::iter::once(c))
                .min_by(|a, b| closer_to(key, a.0, b.0))
        };
        match scope {
            Scope::Open => {
                let cw_end = st.leaf_cw.iter().rev().copied().find(|&x| self.is_live(x)).unwrap_or(c);
                let ccw_end = st.leaf_ccw.iter().rev().copied().find(|&x| self.is_live(x)).unwrap_or(c);
                let covered = st.leaf_complete
                    || clockwise_distance(ccw_end.0, key) <= clockwise_distance(ccw_end.0, cw_end.0);
                if !covered {
                    return None;
                }
                let mut it = st.leaf_cw.iter().chain(&st.leaf_ccw).copied().filter(|&x| self.is_live(x));
                best_of(&mut it)
            }
            Scope::Zone(zone) => {
                let zc = &self.cfg.zone;
                let live_cw: Vec<NodeId> = st.leaf_cw.iter().copied().filter(|&x| self.is_live(x)).collect();
                let live_ccw: Vec<NodeId> = st.leaf_ccw.iter().copied().filter(|&x| self.is_live(x)).collect();
                let in_zone = |x: &NodeId| x.zone(zc) == zone;
                let covered = if st.leaf_complete {
                    true
                } else if key >= c.0 {
                    live_cw.iter().any(|x| !in_zone(x))
                        || live_cw.last().is_some_and(|e| e.0 >= key)
                } else {
                    live_ccw.iter().any(|x| !in_zone(x))
                        || live_ccw.last().is_some_and(|e| e.0 <= key)
                };
                if !covered {
                    return None;
                }
                let mut it = live_cw.into_iter().chain(live_ccw).filter(|x| in_zone(x));
                best_of(&mut it)
            }
        }
    }

    /// Tab-separated dump: NodeId, zone prefix, leaf set, level-1 finger targets.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# m={} b={} leaf={} neighborhood={}",
            self.cfg.zone.prefix_bits(),
            self.cfg.digit_bits,
            self.cfg.leaf_set_size,
            self.cfg.neighborhood_size
        );
        for (id, st) in &self.states {
            let leaf: Vec<String> = st.leaf_set().iter().map(|x| x.to_hex()).collect();
            let fingers: Vec<String> = st.level1_targets.iter().map(|t| format!("{t:032x}")).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                id.to_hex(),
                self.zone_of(*id),
                leaf.join(","),
                fingers.join(",")
            );
        }
        out
    }
}

/// One parsed line of an overlay dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpEntry {
    pub node: NodeId,
    pub zone: u32,
    pub leaf_set: Vec<NodeId>,
    pub finger_targets: Vec<u128>,
}

/// Report produced by [`check_dump`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DumpReport {
    pub nodes: usize,
    pub violations: Vec<String>,
}

/// Parses and validates an overlay dump: identifiers, zone prefixes,
/// finger-target formulas and leaf-set membership.
pub fn check_dump(text: &str) -> Result<DumpReport, OverlayError> {
    let mut m = None;
    let mut leaf_size = None;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if let Some(header) = line.strip_prefix('#') {
            for kv in header.split_whitespace() {
                if let Some((k, v)) = kv.split_once('=') {
                    let v: usize = v
                        .parse()
                        .map_err(|_| OverlayError::Config(format!("line {}: bad header value `{kv}`", lineno + 1)))?;
                    match k {
                        "m" => m = Some(v as u32),
                        "leaf" => leaf_size = Some(v),
                        _ => {}
                    }
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(OverlayError::Config(format!(
                "line {}: expected 4 tab-separated columns, found {}",
                lineno + 1,
                cols.len()
            )));
        }
        let parse_id = |s: &str| -> Result<NodeId, OverlayError> {
            s.parse().map_err(|e: crate::idspace::IdError| OverlayError::Config(format!("line {}: {e}", lineno + 1)))
        };
        let split = |s: &str| s.split(',').filter(|x| !x.is_empty()).map(str::to_string).collect::<Vec<_>>();
        entries.push(DumpEntry {
            node: parse_id(cols[0])?,
            zone: cols[1]
                .parse()
                .map_err(|_| OverlayError::Config(format!("line {}: bad zone prefix", lineno + 1)))?,
            leaf_set: split(cols[2]).iter().map(|s| parse_id(s)).collect::<Result<_, _>>()?,
            finger_targets: split(cols[3])
                .iter()
                .map(|s| parse_id(s).map(|x| x.0))
                .collect::<Result<_, _>>()?,
        });
    }
    let m = m.ok_or_else(|| OverlayError::Config("missing `# m=` header".into()))?;
    let zcfg = ZoneConfig::new(m).map_err(|e| OverlayError::Config(e.to_string()))?;
    let leaf_size = leaf_size.ok_or_else(|| OverlayError::Config("missing `leaf=` header".into()))?;
    let mut ring: Vec<u128> = entries.iter().map(|e| e.node.0).collect();
    ring.sort_unstable();
    let mut report = DumpReport {
        nodes: entries.len(),
        violations: Vec::new(),
    };
    let n = ring.len();
    for e in &entries {
        if e.node.zone(&zcfg) != e.zone {
            report
                .violations
                .push(format!("{}: zone column {} != prefix {}", e.node, e.zone, e.node.zone(&zcfg)));
        }
        if e.finger_targets != level1_targets(e.zone, &zcfg) {
            report.violations.push(format!("{}: level-1 finger targets do not match", e.node));
        }
        let pos = ring.binary_search(&e.node.0).expect("present");
        let others = n - 1;
        let (a, b) = if others <= leaf_size {
            (others.div_ceil(2), others / 2)
        } else {
            (leaf_size / 2, leaf_size / 2)
        };
        let mut expected: Vec<NodeId> = (1..=a)
            .map(|i| NodeId(ring[(pos + i) % n]))
            .chain((1..=b).map(|i| NodeId(ring[(pos + n - i) % n])))
            .collect();
        expected.sort_by(|x, y| closer_to(e.node.0, x.0, y.0));
        expected.dedup();
        if expected != e.leaf_set {
            report.violations.push(format!("{}: leaf set is not the {} numerically nearest nodes", e.node, leaf_size));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::idspace::make_node_id;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat_proximity() -> Arc<dyn Proximity> {
        Arc::new(|a: NodeId, b: NodeId| ((a.0 ^ b.0) % 97) as f64 + 1.0)
    }

    fn random_overlay(n: usize, cfg: OverlayConfig, seed: u64) -> Overlay {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<NodeId> = (0..n).map(|_| NodeId(rng.random())).collect();
        Overlay::build(cfg, ids, flat_proximity()).unwrap()
    }

    fn brute_closest(overlay: &Overlay, key: u128) -> NodeId {
        overlay
            .live_nodes()
            .min_by(|a, b| closer_to(key, a.0, b.0))
            .unwrap()
    }

    #[test]
    fn level2_finger_targets_formula() {
        assert_eq!(level2_finger_targets(0, 4), vec![1, 2, 4, 8]);
        assert_eq!(level2_finger_targets(15, 4), vec![0, 1, 3, 7]);
    }

    #[test]
    fn level1_targets_formula() {
        let z = ZoneConfig::new(3).unwrap();
        // ((2 + 2^(i-1)) mod 8) * 2^125 for i = 1..3.
        let t = level1_targets(2, &z);
        assert_eq!(t, vec![3u128 << 125, 4u128 << 125, 6u128 << 125]);
        // A 7-bit space with m = 3, n = 4.
        let small: Vec<u128> = (1..=3).map(|i| level1_target(2, i, 3, 4)).collect();
        assert_eq!(small, vec![48, 64, 96]);
    }

    #[test]
    fn binning_examples() {
        let bin = bin_node(&[10.0, 50.0, 200.0], &[100.0, 400.0]).unwrap();
        assert_eq!(bin.order, vec![0, 1, 2]);
        assert_eq!(bin.levels, vec![0, 0, 1]);
        let again = bin_node(&[10.0, 50.0, 200.0], &[100.0, 400.0]).unwrap();
        assert_eq!(bin, again);
        let single = bin_node(&[30.0], &[100.0, 400.0]).unwrap();
        assert_eq!(single.levels, vec![0]);
        assert!(bin_node(&[], &[100.0]).is_err());
        assert!(bin_node(&[1.0], &[400.0, 100.0]).is_err());
        let z = ZoneConfig::default();
        assert!(bin.zone_prefix(&z) < 256);
    }

    #[test]
    fn logical_node_counts() {
        assert_eq!(logical_node_count(8, 2).unwrap(), 4);
        assert_eq!(logical_node_count(1, 2).unwrap(), 1);
        assert!(logical_node_count(0, 2).is_err());
        let z = ZoneConfig::default();
        let counts: Vec<usize> = [1, 2, 4, 8, 16]
            .iter()
            .map(|&c| multiplex_logical_nodes(b"host", 3, c, 1, &z).unwrap().len())
            .collect();
        assert_eq!(counts, vec![1, 2, 4, 8, 16]);
        let ids = multiplex_logical_nodes(b"host", 3, 16, 1, &z).unwrap();
        assert!(ids.iter().all(|id| id.zone(&z) == 3));
    }

    #[test]
    fn three_node_ring_leaf_sets() {
        let ov = random_overlay(3, OverlayConfig::default(), 1);
        for id in ov.live_nodes() {
            let leaf = ov.state(id).unwrap().leaf_set();
            assert_eq!(leaf.len(), 2);
            assert!(!leaf.contains(&id));
        }
    }

    #[test]
    fn nearest_of_three() {
        let cfg = OverlayConfig::default();
        let ids = [0x10u128 << 120, 0x40u128 << 120, 0x90u128 << 120].map(NodeId);
        let ov = Overlay::build(cfg, ids, flat_proximity()).unwrap();
        for &src in &ids {
            let p = ov.route(0x42u128 << 120, src).unwrap();
            assert_eq!(p.destination(), ids[1]);
        }
    }

    #[test]
    fn exhaustive_convergence_small() {
        let cfg = OverlayConfig {
            zone: ZoneConfig::new(2).unwrap(),
            digit_bits: 2,
            leaf_set_size: 4,
            neighborhood_size: 2,
        };
        for n in [1usize, 2, 5, 17, 40, 64] {
            let ov = random_overlay(n, cfg, n as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let keys: Vec<u128> = (0..64).map(|_| rng.random()).collect();
            for src in ov.live_nodes().collect::<Vec<_>>() {
                for &k in &keys {
                    let p = ov.route(k, src).unwrap();
                    assert_eq!(p.destination(), brute_closest(&ov, k));
                }
            }
        }
    }

    #[test]
    fn empty_zone_policy_blocks_egress() {
        let cfg = OverlayConfig {
            zone: ZoneConfig::new(2).unwrap(),
            ..OverlayConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids: Vec<NodeId> = (0..200)
            .map(|i| make_node_id(i % 4, rng.random::<u128>() & cfg.zone.suffix_mask(), &cfg.zone).unwrap())
            .collect();
        let mut ov = Overlay::build(cfg, ids.clone(), flat_proximity()).unwrap();
        ov.set_zone_policy(1, ZonePolicy { allow_egress: false, allow_ingress: true });
        let src = *ids.iter().find(|x| x.zone(&cfg.zone) == 1).unwrap();
        let key = cfg.zone.zone_start(3) + 12345;
        match ov.route(key, src) {
            Err(OverlayError::Blocked { at, path }) => {
                assert_eq!(at.zone(&cfg.zone), 1);
                assert!(path.hops.iter().all(|h| h.zone(&cfg.zone) == 1));
            }
            other => panic!("expected blocked, got {other:?}"),
        }
        // Within-zone keys are delivered to the in-zone minimizer.
        let key = cfg.zone.zone_start(1) + 777;
        let p = ov.route(key, src).unwrap();
        assert_eq!(Some(p.destination()), ov.closest_live_in_zone(key, 1));
        assert!(p.hops.iter().all(|h| h.zone(&cfg.zone) == 1));
    }

    #[test]
    fn ingress_block() {
        let cfg = OverlayConfig {
            zone: ZoneConfig::new(2).unwrap(),
            ..OverlayConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ids: Vec<NodeId> = (0..200)
            .map(|i| make_node_id(i % 4, rng.random::<u128>() & cfg.zone.suffix_mask(), &cfg.zone).unwrap())
            .collect();
        let mut ov = Overlay::build(cfg, ids.clone(), flat_proximity()).unwrap();
        ov.set_zone_policy(2, ZonePolicy { allow_egress: true, allow_ingress: false });
        let src = *ids.iter().find(|x| x.zone(&cfg.zone) == 0).unwrap();
        let key = cfg.zone.zone_start(2) + (1u128 << 100);
        assert!(matches!(ov.route(key, src), Err(OverlayError::Blocked { .. })));
    }

    #[test]
    fn join_into_single_node() {
        let cfg = OverlayConfig::default();
        let a = NodeId(1 << 100);
        let b = NodeId(7 << 110);
        let mut ov = Overlay::build(cfg, [a], flat_proximity()).unwrap();
        ov.join(b, a).unwrap();
        assert_eq!(ov.state(a).unwrap().leaf_set(), vec![b]);
        assert_eq!(ov.state(b).unwrap().leaf_set(), vec![a]);
        assert!(matches!(ov.join(NodeId(5), NodeId(6)), Err(OverlayError::Bootstrap(_))));
    }

    #[test]
    fn incremental_matches_bulk_build() {
        let cfg = OverlayConfig {
            zone: ZoneConfig::new(3).unwrap(),
            digit_bits: 3,
            leaf_set_size: 8,
            neighborhood_size: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ids: Vec<NodeId> = (0..120)
            .map(|i| make_node_id(i % 5, rng.random::<u128>() & cfg.zone.suffix_mask(), &cfg.zone).unwrap())
            .collect();
        let mut ov = Overlay::build(cfg, ids[..60].to_vec(), flat_proximity()).unwrap();
        for &id in &ids[60..] {
            let boot = ov.live_nodes().next().unwrap();
            ov.join(id, boot).unwrap();
        }
        for &id in ids.iter().step_by(7) {
            ov.leave(id).unwrap();
        }
        let live: Vec<NodeId> = ov.live_nodes().collect();
        let fresh = Overlay::build(cfg, live.clone(), flat_proximity()).unwrap();
        for id in live {
            assert_eq!(ov.state(id), fresh.state(id), "state mismatch at {id}");
        }
    }
}
