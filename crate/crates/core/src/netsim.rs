//! Deterministic discrete-event network model.
//!
//! Time is an integer count of microseconds. Events at the same instant are
//! ordered by insertion ordinal. Bandwidth is a per-host resource shared
//! equally among the flows bottlenecked at that host (the receiver unless
//! stated otherwise); rates are recomputed whenever a flow starts or
//! finishes and integrated piecewise.
//! 1 Mbps is exactly one bit per microsecond.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};
use thiserror::Error;

use crate::idspace::{NodeId, ZoneConfig};
use crate::overlay::Proximity;

pub type Micros = u64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is down")]
    NodeDown(NodeId),
    #[error("conservation violated: {started} started, {delivered} delivered, {aborted} aborted, {active} active")]
    Conservation {
        started: u64,
        delivered: u64,
        aborted: u64,
        active: u64,
    },
}

pub fn ms_to_us(ms: f64) -> Micros {
    (ms * 1000.0).round().max(0.0) as Micros
}

pub fn us_to_ms(us: Micros) -> f64 {
    us as f64 / 1000.0
}

/// Maps a latency into a reward in `[0, 1]`: `1 - l / l_max`, clipped.
/// The flag reports whether clipping happened.
pub fn reward_from_latency(latency_ms: f64, l_max_ms: f64) -> (f64, bool) {
    assert!(l_max_ms > 0.0, "l_max must be positive");
    let r = 1.0 - latency_ms.max(0.0) / l_max_ms;
    if r < 0.0 {
        (0.0, true)
    } else {
        (r.min(1.0), false)
    }
}

/// Rolling `l_max`: the largest latency seen in the previous window,
/// never below the configured floor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyNormalizer {
    floor_ms: f64,
    current_ms: f64,
    window_max_ms: f64,
    pub samples: u64,
    pub clipped: u64,
}

impl LatencyNormalizer {
    pub fn new(floor_ms: f64) -> Self {
        Self {
            floor_ms,
            current_ms: floor_ms,
            window_max_ms: 0.0,
            samples: 0,
            clipped: 0,
        }
    }

    /// Starts from a predefined bound for the first window, which has no
    /// previous window to calibrate from.
    pub fn with_initial(floor_ms: f64, initial_ms: f64) -> Self {
        Self {
            current_ms: initial_ms.max(floor_ms),
            ..Self::new(floor_ms)
        }
    }

    /// Replaces the calibration with a predefined bound, for a window whose
    /// predecessor no longer describes the network.
    pub fn rebound(&mut self, bound_ms: f64) {
        self.current_ms = bound_ms.max(self.floor_ms);
    }

    pub fn l_max(&self) -> f64 {
        self.current_ms
    }

    pub fn reward(&mut self, latency_ms: f64) -> f64 {
        self.window_max_ms = self.window_max_ms.max(latency_ms);
        let (r, clipped) = reward_from_latency(latency_ms, self.current_ms);
        self.samples += 1;
        self.clipped += clipped as u64;
        r
    }

    /// Closes the window; the next one normalizes by this window's maximum.
    pub fn roll(&mut self) {
        self.current_ms = self.window_max_ms.max(self.floor_ms);
        self.window_max_ms = 0.0;
    }

    pub fn clip_fraction(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.clipped as f64 / self.samples as f64
        }
    }
}

fn hash_unit(seed: u64, parts: &[u128]) -> f64 {
    let mut h = Sha1::new();
    h.update(seed.to_be_bytes());
    for p in parts {
        h.update(p.to_be_bytes());
    }
    let d = h.finalize();
    let v = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
    (v >> 11) as f64 / (1u64 << 53) as f64
}

/// Zone-structured RTT model. Intra-zone RTTs are uniform in
/// `[1, diameter]` ms and frozen per pair; inter-zone pairs add the
/// zone-pair RTT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneLatency {
    pub seed: u64,
    pub zone: ZoneConfig,
    pub diameter_ms: f64,
    /// RTT between zone pairs, keyed with the smaller prefix first.
    pub zone_rtt_ms: BTreeMap<(u32, u32), f64>,
    /// Used for zone pairs missing from the table.
    pub default_inter_ms: f64,
}

impl ZoneLatency {
    pub fn new(seed: u64, zone: ZoneConfig, diameter_ms: f64) -> Self {
        Self {
            seed,
            zone,
            diameter_ms,
            zone_rtt_ms: BTreeMap::new(),
            default_inter_ms: 100.0,
        }
    }

    pub fn zone_pair_rtt(&self, a: u32, b: u32) -> f64 {
        if a == b {
            return 0.0;
        }
        let k = (a.min(b), a.max(b));
        self.zone_rtt_ms.get(&k).copied().unwrap_or(self.default_inter_ms)
    }

    pub fn rtt(&self, a: NodeId, b: NodeId) -> f64 {
        if a == b {
            return 0.0;
        }
        let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
        let base = 1.0 + (self.diameter_ms - 1.0).max(0.0) * hash_unit(self.seed, &[lo, hi]);
        base + self.zone_pair_rtt(a.zone(&self.zone), b.zone(&self.zone))
    }

    /// One-way propagation delay, half the RTT.
    pub fn propagation_ms(&self, a: NodeId, b: NodeId) -> f64 {
        self.rtt(a, b) / 2.0
    }
}

impl Proximity for ZoneLatency {
    fn rtt_ms(&self, a: NodeId, b: NodeId) -> f64 {
        self.rtt(a, b)
    }
}

/// Churn or bandwidth change at a point in virtual time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ChurnKind {
    Fail,
    Leave,
    Join,
    BandwidthSet { mbps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub time_us: Micros,
    pub node: NodeId,
    #[serde(flatten)]
    pub kind: ChurnKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChurnSchedule {
    pub events: Vec<ChurnEvent>,
}

impl ChurnSchedule {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.events.windows(2).any(|w| w[0].time_us > w[1].time_us) {
            return Err(SimError::Config("churn times must be non-decreasing".into()));
        }
        for e in &self.events {
            if let ChurnKind::BandwidthSet { mbps } = e.kind {
                if mbps <= 0.0 || !mbps.is_finite() {
                    return Err(SimError::Config(format!("bandwidth for {} must be positive", e.node)));
                }
            }
        }
        Ok(())
    }
}

pub type FlowId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowOutcome {
    Delivered,
    Aborted,
}

/// A finished transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub flow: FlowId,
    pub src: NodeId,
    pub dst: NodeId,
    pub bytes: u64,
    pub tag: u64,
    pub start_us: Micros,
    pub end_us: Micros,
    /// Flows sharing the bottleneck host when this one started, itself included.
    pub concurrency_at_start: usize,
    pub outcome: FlowOutcome,
}

impl FlowRecord {
    pub fn latency_ms(&self) -> f64 {
        us_to_ms(self.end_us - self.start_us)
    }
}

/// Non-flow events handed back to the caller.
#[derive(Debug, Clone, PartialEq)]
pub enum Notice {
    Timer { time_us: Micros, node: NodeId, tag: u64 },
    Churn(ChurnEvent),
}

#[derive(Debug, Clone, PartialEq)]
enum EventKind {
    StartFlow(FlowId),
    /// Transfer phase finished at the receiving host; `gen` guards staleness.
    Drain { host: usize, gen: u64 },
    Deliver(FlowId),
    Timer { node: NodeId, tag: u64 },
    Churn(ChurnEvent),
}

#[derive(Debug, Clone)]
struct Host {
    bandwidth_mbps: f64,
    active: Vec<FlowId>,
    last_update: f64,
    gen: u64,
}

#[derive(Debug, Clone)]
struct Flow {
    src: NodeId,
    dst: NodeId,
    /// Node whose bandwidth this flow shares.
    via: NodeId,
    bytes: u64,
    tag: u64,
    remaining_bits: f64,
    start_us: Micros,
    concurrency: usize,
    propagation_us: Micros,
    done: bool,
}

/// Line-delimited trace entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_us: Micros,
    pub kind: String,
    pub node: NodeId,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlowCounters {
    pub started: u64,
    pub delivered: u64,
    pub aborted: u64,
}

/// The simulator.
pub struct Network {
    now: Micros,
    ordinal: u64,
    queue: BinaryHeap<Reverse<(Micros, u64)>>,
    pending: BTreeMap<u64, EventKind>,
    hosts: Vec<Host>,
    host_of: BTreeMap<NodeId, usize>,
    down: std::collections::BTreeSet<NodeId>,
    flows: Vec<Flow>,
    latency: Arc<dyn Fn(NodeId, NodeId) -> f64 + Send + Sync>,
    completed: Vec<FlowRecord>,
    notices: Vec<Notice>,
    trace: Option<Vec<TraceRecord>>,
    counters: FlowCounters,
    sent_bytes: BTreeMap<NodeId, u64>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("now", &self.now)
            .field("hosts", &self.hosts.len())
            .field("counters", &self.counters)
            .finish()
    }
}

impl Network {
    /// `latency_ms(a, b)` is the one-way propagation delay.
    pub fn new(latency_ms: Arc<dyn Fn(NodeId, NodeId) -> f64 + Send + Sync>) -> Self {
        Self {
            now: 0,
            ordinal: 0,
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            hosts: Vec::new(),
            host_of: BTreeMap::new(),
            down: Default::default(),
            flows: Vec::new(),
            latency: latency_ms,
            completed: Vec::new(),
            notices: Vec::new(),
            trace: None,
            counters: FlowCounters::default(),
            sent_bytes: BTreeMap::new(),
        }
    }

    pub fn with_zone_latency(model: ZoneLatency) -> Self {
        let m = Arc::new(model);
        Self::new(Arc::new(move |a, b| m.propagation_ms(a, b)))
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn counters(&self) -> FlowCounters {
        self.counters
    }

    /// Adds a physical host and returns its index.
    pub fn add_host(&mut self, bandwidth_mbps: f64) -> Result<usize, SimError> {
        if bandwidth_mbps <= 0.0 || !bandwidth_mbps.is_finite() {
            return Err(SimError::Config("bandwidth must be positive".into()));
        }
        self.hosts.push(Host {
            bandwidth_mbps,
            active: Vec::new(),
            last_update: self.now as f64,
            gen: 0,
        });
        Ok(self.hosts.len() - 1)
    }

    /// Places a (logical) node on a host; logical nodes of one host share
    /// its bandwidth.
    pub fn attach(&mut self, node: NodeId, host: usize) -> Result<(), SimError> {
        if host >= self.hosts.len() {
            return Err(SimError::Config(format!("no host {host}")));
        }
        self.host_of.insert(node, host);
        Ok(())
    }

    /// Shorthand: a dedicated host for one node.
    pub fn add_node(&mut self, node: NodeId, bandwidth_mbps: f64) -> Result<usize, SimError> {
        let h = self.add_host(bandwidth_mbps)?;
        self.attach(node, h)?;
        Ok(h)
    }

    pub fn knows(&self, node: NodeId) -> bool {
        self.host_of.contains_key(&node)
    }

    pub fn is_up(&self, node: NodeId) -> bool {
        self.knows(node) && !self.down.contains(&node)
    }

    pub fn bandwidth(&self, node: NodeId) -> Option<f64> {
        self.host_of.get(&node).map(|&h| self.hosts[h].bandwidth_mbps)
    }

    /// Flows currently sharing the node's host.
    pub fn load(&self, node: NodeId) -> usize {
        self.host_of.get(&node).map_or(0, |&h| self.hosts[h].active.len())
    }

    fn push(&mut self, time: Micros, kind: EventKind) {
        let o = self.ordinal;
        self.ordinal += 1;
        self.queue.push(Reverse((time, o)));
        self.pending.insert(o, kind);
    }

    fn log(&mut self, kind: &str, node: NodeId, detail: String) {
        if let Some(t) = &mut self.trace {
            t.push(TraceRecord {
                time_us: self.now,
                kind: kind.to_string(),
                node,
                detail,
            });
        }
    }

    /// Starts a transfer of `bytes` from `src` to `dst` at `at_us`, sharing
    /// the receiver's bandwidth.
    pub fn transmit_at(&mut self, at_us: Micros, src: NodeId, dst: NodeId, bytes: u64, tag: u64) -> Result<FlowId, SimError> {
        self.transmit_via(at_us, src, dst, dst, bytes, tag)
    }

    /// Starts a transfer whose rate is a share of `via`'s bandwidth; `via`
    /// is the forwarding node, either endpoint.
    pub fn transmit_via(
        &mut self,
        at_us: Micros,
        src: NodeId,
        dst: NodeId,
        via: NodeId,
        bytes: u64,
        tag: u64,
    ) -> Result<FlowId, SimError> {
        if via != src && via != dst {
            return Err(SimError::Config("the shared node must be an endpoint".into()));
        }
        for n in [src, dst] {
            if !self.knows(n) {
                return Err(SimError::UnknownNode(n));
            }
        }
        let id = self.flows.len();
        let propagation_us = ms_to_us((self.latency)(src, dst));
        self.flows.push(Flow {
            src,
            dst,
            via,
            bytes,
            tag,
            remaining_bits: bytes as f64 * 8.0,
            start_us: at_us.max(self.now),
            concurrency: 0,
            propagation_us,
            done: false,
        });
        self.push(at_us.max(self.now), EventKind::StartFlow(id));
        Ok(id)
    }

    pub fn transmit(&mut self, src: NodeId, dst: NodeId, bytes: u64, tag: u64) -> Result<FlowId, SimError> {
        self.transmit_at(self.now, src, dst, bytes, tag)
    }

    pub fn schedule_timer(&mut self, at_us: Micros, node: NodeId, tag: u64) {
        self.push(at_us.max(self.now), EventKind::Timer { node, tag });
    }

    /// Queues every event of a churn schedule.
    pub fn inject(&mut self, schedule: &ChurnSchedule) -> Result<(), SimError> {
        schedule.validate()?;
        for e in &schedule.events {
            if !self.knows(e.node) && !matches!(e.kind, ChurnKind::Join) {
                return Err(SimError::UnknownNode(e.node));
            }
        }
        for e in &schedule.events {
            self.push(e.time_us.max(self.now), EventKind::Churn(e.clone()));
        }
        Ok(())
    }

    /// Brings integrated progress of a host's flows up to `now`.
    fn settle(&mut self, h: usize) {
        let now = self.now as f64;
        let host = &mut self.hosts[h];
        let n = host.active.len();
        if n > 0 {
            let rate = host.bandwidth_mbps / n as f64;
            let dt = now - host.last_update;
            for &f in &host.active {
                self.flows[f].remaining_bits -= rate * dt;
            }
        }
        host.last_update = now;
    }

    /// Schedules the next drain of a host under its current rate.
    fn reschedule(&mut self, h: usize) {
        let host = &mut self.hosts[h];
        host.gen += 1;
        if host.active.is_empty() {
            return;
        }
        let rate = host.bandwidth_mbps / host.active.len() as f64;
        let min_left = host
            .active
            .iter()
            .map(|&f| self.flows[f].remaining_bits)
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
        let at = self.now + (min_left / rate).ceil() as Micros;
        let gen = host.gen;
        self.push(at, EventKind::Drain { host: h, gen });
    }

    fn finish(&mut self, f: FlowId, outcome: FlowOutcome) {
        let fl = &mut self.flows[f];
        fl.done = true;
        let rec = FlowRecord {
            flow: f,
            src: fl.src,
            dst: fl.dst,
            bytes: fl.bytes,
            tag: fl.tag,
            start_us: fl.start_us,
            end_us: self.now,
            concurrency_at_start: fl.concurrency,
            outcome,
        };
        match outcome {
            FlowOutcome::Delivered => {
                self.counters.delivered += 1;
                *self.sent_bytes.entry(rec.src).or_default() += rec.bytes;
            }
            FlowOutcome::Aborted => self.counters.aborted += 1,
        }
        let src = rec.src;
        self.log(
            if outcome == FlowOutcome::Delivered { "delivered" } else { "aborted" },
            src,
            format!("flow={f} dst={} start={} end={}", rec.dst, rec.start_us, rec.end_us),
        );
        self.completed.push(rec);
    }

    fn handle(&mut self, kind: EventKind) {
        match kind {
            EventKind::StartFlow(f) => {
                self.counters.started += 1;
                let (src, dst) = (self.flows[f].src, self.flows[f].dst);
                self.flows[f].start_us = self.now;
                if self.down.contains(&src) || self.down.contains(&dst) {
                    self.flows[f].concurrency = 0;
                    self.finish(f, FlowOutcome::Aborted);
                    return;
                }
                let h = self.host_of[&self.flows[f].via];
                self.settle(h);
                self.hosts[h].active.push(f);
                self.flows[f].concurrency = self.hosts[h].active.len();
                let c = self.flows[f].concurrency;
                self.log("flow_start", src, format!("flow={f} dst={dst} concurrency={c}"));
                self.reschedule(h);
            }
            EventKind::Drain { host, gen } => {
                if self.hosts[host].gen != gen {
                    return;
                }
                self.settle(host);
                let rate = self.hosts[host].bandwidth_mbps / self.hosts[host].active.len().max(1) as f64;
                // Anything within one microsecond of work is complete.
                let (done, keep): (Vec<FlowId>, Vec<FlowId>) = self.hosts[host]
                    .active
                    .iter()
                    .partition(|&&f| self.flows[f].remaining_bits <= rate * 1.0 + 1e-9);
                self.hosts[host].active = keep;
                for f in done {
                    let at = self.now + self.flows[f].propagation_us;
                    self.push(at, EventKind::Deliver(f));
                }
                self.reschedule(host);
            }
            EventKind::Deliver(f) => {
                if !self.flows[f].done {
                    let ok = !self.down.contains(&self.flows[f].dst) && !self.down.contains(&self.flows[f].src);
                    self.finish(f, if ok { FlowOutcome::Delivered } else { FlowOutcome::Aborted });
                }
            }
            EventKind::Timer { node, tag } => {
                self.log("timer", node, format!("tag={tag}"));
                self.notices.push(Notice::Timer {
                    time_us: self.now,
                    node,
                    tag,
                });
            }
            EventKind::Churn(e) => {
                self.log("churn", e.node, format!("{:?}", e.kind));
                match e.kind {
                    ChurnKind::Fail | ChurnKind::Leave => self.take_down(e.node),
                    ChurnKind::Join => {
                        self.down.remove(&e.node);
                    }
                    ChurnKind::BandwidthSet { mbps } => {
                        if let Some(&h) = self.host_of.get(&e.node) {
                            self.settle(h);
                            self.hosts[h].bandwidth_mbps = mbps;
                            self.reschedule(h);
                        }
                    }
                }
                self.notices.push(Notice::Churn(e));
            }
        }
    }

    /// Marks a node down and aborts every flow it sends or receives.
    pub fn take_down(&mut self, node: NodeId) {
        if !self.down.insert(node) {
            return;
        }
        let affected: Vec<FlowId> = (0..self.flows.len())
            .filter(|&f| !self.flows[f].done && (self.flows[f].src == node || self.flows[f].dst == node))
            .collect();
        let mut touched = Vec::new();
        for f in affected {
            let h = self.host_of[&self.flows[f].via];
            if let Some(pos) = self.hosts[h].active.iter().position(|&x| x == f) {
                self.settle(h);
                self.hosts[h].active.remove(pos);
                touched.push(h);
            }
            // Flows not yet started are aborted when their start event fires.
            if self.flows[f].concurrency > 0 || self.flows[f].remaining_bits <= 0.0 {
                self.finish(f, FlowOutcome::Aborted);
            }
        }
        touched.sort_unstable();
        touched.dedup();
        for h in touched {
            self.reschedule(h);
        }
    }

    /// Processes every event with timestamp `<= until_us`.
    pub fn advance(&mut self, until_us: Micros) -> usize {
        let mut n = 0;
        while let Some(&Reverse((t, o))) = self.queue.peek() {
            if t > until_us {
                break;
            }
            self.queue.pop();
            let kind = self.pending.remove(&o).expect("queued event");
            debug_assert!(t >= self.now);
            self.now = t;
            if !matches!(kind, EventKind::Drain { .. }) {
                n += 1;
            }
            self.handle(kind);
        }
        self.now = self.now.max(until_us.min(self.next_time().unwrap_or(until_us)));
        n
    }

    pub fn next_time(&self) -> Option<Micros> {
        self.queue.peek().map(|r| r.0 .0)
    }

    /// Runs until the queue is empty.
    pub fn run_until_idle(&mut self) -> usize {
        let mut n = 0;
        while let Some(t) = self.next_time() {
            n += self.advance(t);
        }
        n
    }

    /// One-way propagation delay between two nodes, ms.
    pub fn propagation_ms(&self, a: NodeId, b: NodeId) -> f64 {
        (self.latency)(a, b)
    }

    /// Bytes each node has delivered so far.
    pub fn sent_bytes(&self) -> &BTreeMap<NodeId, u64> {
        &self.sent_bytes
    }

    /// Changes a node's host bandwidth now.
    pub fn set_bandwidth(&mut self, node: NodeId, mbps: f64) -> Result<(), SimError> {
        if mbps <= 0.0 || !mbps.is_finite() {
            return Err(SimError::Config(format!("bandwidth for {node} must be positive")));
        }
        let h = *self.host_of.get(&node).ok_or(SimError::UnknownNode(node))?;
        self.settle(h);
        self.hosts[h].bandwidth_mbps = mbps;
        self.reschedule(h);
        Ok(())
    }

    pub fn drain_completed(&mut self) -> Vec<FlowRecord> {
        std::mem::take(&mut self.completed)
    }

    pub fn drain_notices(&mut self) -> Vec<Notice> {
        std::mem::take(&mut self.notices)
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.trace.as_deref()
    }

    /// Trace as `time\tkind\tnode\tdetail` lines.
    pub fn trace_text(&self) -> String {
        let mut s = String::new();
        for r in self.trace.iter().flatten() {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.time_us, r.kind, r.node, r.detail);
        }
        s
    }

    /// Every started flow is delivered, aborted or still active.
    pub fn check_conservation(&self) -> Result<(), SimError> {
        let active = self.flows.iter().filter(|f| !f.done).count() as u64;
        let unstarted = self
            .pending
            .values()
            .filter(|k| matches!(k, EventKind::StartFlow(_)))
            .count() as u64;
        let c = self.counters;
        if c.started + unstarted != c.delivered + c.aborted + active {
            return Err(SimError::Conservation {
                started: c.started,
                delivered: c.delivered,
                aborted: c.aborted,
                active,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_latency() -> Network {
        Network::new(Arc::new(|_, _| 0.0))
    }

    #[test]
    fn reward_mapping() {
        assert_eq!(reward_from_latency(0.0, 2000.0), (1.0, false));
        assert_eq!(reward_from_latency(2000.0, 2000.0), (0.0, false));
        assert_eq!(reward_from_latency(500.0, 2000.0), (0.75, false));
        assert_eq!(reward_from_latency(3000.0, 2000.0), (0.0, true));
    }

    #[test]
    fn single_flow_arithmetic() {
        let mut net = zero_latency();
        let (a, b) = (NodeId(1), NodeId(2));
        net.add_node(a, 100.0).unwrap();
        net.add_node(b, 100.0).unwrap();
        // 25 Mb = 3_125_000 bytes at 100 Mbps.
        net.transmit(a, b, 3_125_000, 0).unwrap();
        net.run_until_idle();
        let done = net.drain_completed();
        assert_eq!(done[0].end_us, 250_000);
    }

    #[test]
    fn four_way_share() {
        let mut net = zero_latency();
        let hop = NodeId(100);
        net.add_node(hop, 100.0).unwrap();
        for i in 0..4 {
            net.add_node(NodeId(i), 100.0).unwrap();
            net.transmit(NodeId(i), hop, 1_250_000, i as u64).unwrap();
        }
        net.run_until_idle();
        let done = net.drain_completed();
        // 10 Mb each at 25 Mbps: 400 ms.
        assert!(done.iter().all(|r| r.end_us == 400_000 && r.concurrency_at_start <= 4));
        assert_eq!(done.iter().map(|r| r.concurrency_at_start).max(), Some(4));
        net.check_conservation().unwrap();
    }

    #[test]
    fn failure_aborts_and_conserves() {
        let mut net = zero_latency();
        let (a, b) = (NodeId(1), NodeId(2));
        net.add_node(a, 10.0).unwrap();
        net.add_node(b, 10.0).unwrap();
        net.transmit(a, b, 1_000_000, 0).unwrap();
        net.inject(&ChurnSchedule {
            events: vec![ChurnEvent {
                time_us: 1000,
                node: b,
                kind: ChurnKind::Fail,
            }],
        })
        .unwrap();
        net.run_until_idle();
        let done = net.drain_completed();
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].outcome, FlowOutcome::Aborted);
        net.check_conservation().unwrap();
        assert_eq!(net.counters().aborted, 1);
    }

    #[test]
    fn unknown_node_in_schedule() {
        let mut net = zero_latency();
        let s = ChurnSchedule {
            events: vec![ChurnEvent {
                time_us: 0,
                node: NodeId(9),
                kind: ChurnKind::Fail,
            }],
        };
        assert!(matches!(net.inject(&s), Err(SimError::UnknownNode(_))));
    }

    #[test]
    fn normalizer_rolls() {
        let mut n = LatencyNormalizer::new(100.0);
        assert_eq!(n.reward(50.0), 0.5);
        n.reward(300.0);
        assert_eq!(n.clipped, 1);
        n.roll();
        assert_eq!(n.l_max(), 300.0);
    }

    #[test]
    fn zone_latency_bounds() {
        let z = ZoneConfig::new(2).unwrap();
        let m = ZoneLatency::new(1, z, 40.0);
        let a = NodeId(5);
        let b = NodeId(77);
        let r = m.rtt(a, b);
        assert!((1.0..=40.0).contains(&r));
        assert_eq!(r, m.rtt(b, a));
        let far = NodeId(z.zone_start(3) + 1);
        assert!(m.rtt(a, far) >= 100.0);
    }
}
