//! Synthetic FL rounds over the forest, their timing in the network model,
//! and failure recovery timing.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::HarnessError;
use crate::forest::{ForestError, Forest, Identity, Tree};
use crate::idspace::{AppId, NodeId};
use crate::netsim::{ms_to_us, us_to_ms, FlowOutcome, FlowRecord, Network, ZoneLatency};

/// Output of one synthetic round.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRound {
    pub model: Vec<f64>,
    /// Each member's local perturbation of the broadcast model.
    pub perturbations: BTreeMap<NodeId, Vec<f64>>,
    pub dissemination_depth: usize,
    pub messages: usize,
    pub round: u64,
}

/// Broadcasts `model`, lets every member add Gaussian noise, aggregates the
/// results with uniform weights and commits the round at the master.
pub fn synth_fl_round<R: Rng + ?Sized>(
    forest: &mut Forest,
    app: AppId,
    model: &[f64],
    noise_scale: f64,
    rng: &mut R,
) -> Result<SynthRound, HarnessError> {
    let tree = forest.tree(app).ok_or(ForestError::UnknownTree(app))?;
    let root = tree.root();
    let mut received: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    if tree.is_member(root) {
        received.insert(root, model.to_vec());
    }
    let report = forest.broadcast(app, root, model, &Identity, &mut |n, p| {
        received.insert(n, p.to_vec());
    })?;
    let noise = Normal::new(0.0, noise_scale.max(0.0)).map_err(|e| HarnessError::schema("workload.noise_scale", &e.to_string()))?;
    let mut perturbations = BTreeMap::new();
    let mut payloads = BTreeMap::new();
    for (n, p) in received {
        let delta: Vec<f64> = (0..p.len()).map(|_| noise.sample(rng)).collect();
        let local: Vec<f64> = p.iter().zip(&delta).map(|(a, d)| a + d).collect();
        perturbations.insert(n, delta);
        payloads.insert(n, (local, 1.0));
    }
    let agg = forest.aggregate(app, &payloads)?;
    let next = agg.value.unwrap_or_else(|| model.to_vec());
    let round = forest.commit_round(app, next.clone())?;
    Ok(SynthRound {
        model: next,
        perturbations,
        dissemination_depth: report.max_depth,
        messages: report.messages + agg.messages,
        round,
    })
}

/// Wall time of one tree pass in the network model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TreeTiming {
    pub elapsed_ms: f64,
    pub depth: usize,
    pub delivered: usize,
    pub aborted: usize,
    /// Sum of delivered flow latencies.
    pub flow_latency_us: u64,
}

fn tree_index(tree: &Tree) -> (Vec<NodeId>, BTreeMap<NodeId, u64>) {
    let nodes = tree.nodes();
    let idx = nodes.iter().enumerate().map(|(i, n)| (*n, i as u64)).collect();
    (nodes, idx)
}

/// Level-by-level broadcast: every node forwards to its children once the
/// payload has fully arrived; a sender's uplink is shared by its children.
pub fn time_broadcast(net: &mut Network, tree: &Tree, bytes: u64) -> Result<TreeTiming, HarnessError> {
    let (nodes, idx) = tree_index(tree);
    let t0 = net.now();
    let mut out = TreeTiming {
        elapsed_ms: 0.0,
        depth: 0,
        delivered: 0,
        aborted: 0,
        flow_latency_us: 0,
    };
    let mut pending = 0usize;
    let send = |net: &mut Network, from: NodeId, pending: &mut usize| -> Result<(), HarnessError> {
        for c in tree.children_of(from) {
            if net.is_up(from) && net.is_up(c) {
                net.transmit_via(net.now(), from, c, from, bytes, idx[&c])?;
                *pending += 1;
            }
        }
        Ok(())
    };
    send(net, tree.root(), &mut pending)?;
    let mut last = t0;
    while pending > 0 {
        let Some(t) = net.next_time() else { break };
        net.advance(t);
        for rec in net.drain_completed() {
            pending -= 1;
            let node = nodes[rec.tag as usize];
            match rec.outcome {
                FlowOutcome::Delivered => {
                    out.delivered += 1;
                    out.flow_latency_us += rec.end_us - rec.start_us;
                    last = last.max(rec.end_us);
                    out.depth = out.depth.max(tree.depth(node).unwrap_or(0));
                    send(net, node, &mut pending)?;
                }
                FlowOutcome::Aborted => out.aborted += 1,
            }
        }
    }
    out.elapsed_ms = us_to_ms(last - t0);
    Ok(out)
}

/// Convergecast: leaves send first, an inner node forwards its partial once
/// every child has reported; a receiver's downlink is shared by its children.
pub fn time_aggregation(net: &mut Network, tree: &Tree, bytes: u64) -> Result<TreeTiming, HarnessError> {
    let (nodes, idx) = tree_index(tree);
    let t0 = net.now();
    let mut out = TreeTiming {
        elapsed_ms: 0.0,
        depth: 0,
        delivered: 0,
        aborted: 0,
        flow_latency_us: 0,
    };
    let mut waiting: BTreeMap<NodeId, usize> = nodes.iter().map(|n| (*n, tree.children_of(*n).count())).collect();
    let mut ready: Vec<NodeId> = waiting.iter().filter(|(_, c)| **c == 0).map(|(n, _)| *n).collect();
    let mut in_flight = 0usize;
    let mut last = t0;
    loop {
        // A node whose partial cannot be sent still releases its parent.
        while let Some(n) = ready.pop() {
            let Some(p) = tree.parent_of(n) else { continue };
            if net.is_up(n) && net.is_up(p) {
                net.transmit_at(net.now(), n, p, bytes, idx[&n])?;
                in_flight += 1;
            } else {
                let w = waiting.get_mut(&p).expect("indexed");
                *w -= 1;
                if *w == 0 {
                    ready.push(p);
                }
            }
        }
        if in_flight == 0 {
            break;
        }
        let Some(t) = net.next_time() else { break };
        net.advance(t);
        for rec in net.drain_completed() {
            in_flight -= 1;
            let child = nodes[rec.tag as usize];
            let parent = tree.parent_of(child).expect("only attached nodes send");
            match rec.outcome {
                FlowOutcome::Delivered => {
                    out.delivered += 1;
                    out.flow_latency_us += rec.end_us - rec.start_us;
                    last = last.max(rec.end_us);
                    out.depth = out.depth.max(tree.depth(child).unwrap_or(0));
                }
                FlowOutcome::Aborted => out.aborted += 1,
            }
            let w = waiting.get_mut(&parent).expect("indexed");
            *w -= 1;
            if *w == 0 {
                ready.push(parent);
            }
        }
    }
    out.elapsed_ms = us_to_ms(last - t0);
    Ok(out)
}

/// One recovery episode for one tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryRecord {
    pub app: AppId,
    pub failed: usize,
    pub master_failed: bool,
    pub orphans: usize,
    /// From the failure to the last orphan holding the current round again.
    pub recovery_ms: f64,
    pub max_contacted: usize,
    pub total_contacted: usize,
    pub unrecoverable: bool,
    /// Sum of delivered flow latencies.
    pub flow_latency_us: u64,
}

pub fn delivered_latency_us(records: &[FlowRecord]) -> u64 {
    records
        .iter()
        .filter(|r| r.outcome == FlowOutcome::Delivered)
        .map(|r| r.end_us - r.start_us)
        .sum()
}

fn path_latency_ms(latency: &ZoneLatency, path: &[NodeId]) -> f64 {
    path.windows(2).map(|w| latency.propagation_ms(w[0], w[1])).sum()
}

/// Fails `failed` at once and repairs every tree.
///
/// Failures are noticed after the keep-alive timeout. Each orphan then
/// re-JOINs, which costs the propagation delay of its JOIN route, and the
/// graft point retransmits the current round to it over its own uplink, so
/// orphans landing on the same graft point share its bandwidth. A failed
/// master is replaced first: the new master pulls the replicated state from
/// the replica holder before serving its orphans.
pub fn fail_and_recover(
    forest: &mut Forest,
    net: &mut Network,
    latency: &ZoneLatency,
    failed: &[NodeId],
    detection_ms: f64,
    model_bytes: u64,
) -> Result<Vec<RecoveryRecord>, HarnessError> {
    let failed_set: BTreeSet<NodeId> = failed.iter().copied().collect();
    for &f in &failed_set {
        if forest.overlay().is_live(f) {
            forest.overlay_mut().fail(f)?;
        }
        if net.knows(f) {
            net.take_down(f);
        }
    }
    for &f in &failed_set {
        forest.overlay_mut().repair_all(f);
    }
    let t0 = net.now();
    let detect = t0 + ms_to_us(detection_ms);
    let apps: Vec<AppId> = forest.trees().map(|t| t.app).collect();
    let mut records = Vec::new();
    for app in apps {
        let tree = forest.tree(app).expect("listed");
        let touched = failed_set.iter().any(|f| tree.contains(*f));
        if !touched {
            continue;
        }
        let master_failed = failed_set.contains(&tree.root());
        let failed_here = failed_set.iter().filter(|f| tree.contains(**f)).count();
        let orphans = forest.detach_all_failed(app, &failed_set)?;
        let mut rec = RecoveryRecord {
            app,
            failed: failed_here,
            master_failed,
            orphans: orphans.len(),
            recovery_ms: 0.0,
            max_contacted: 0,
            total_contacted: 0,
            unrecoverable: false,
            flow_latency_us: 0,
        };
        // (start time, graft point, orphan) of each retransmission.
        let mut transfers: Vec<(u64, NodeId, NodeId)> = Vec::new();
        let mut ready = detect;
        if master_failed {
            match forest.recover_master(app) {
                Ok(m) => {
                    rec.orphans += m.regrafted.len();
                    rec.total_contacted += m.contacted;
                    rec.max_contacted = rec.max_contacted.max(m.contacted);
                    let elect = m.paths.first().map_or(0.0, |p| path_latency_ms(latency, p));
                    let start = detect + ms_to_us(elect);
                    // State pull from the replica holder.
                    if let Some(holder) = m.replica {
                        net.transmit_via(start, holder, m.new_master, holder, model_bytes, u64::MAX)?;
                    }
                    net.run_until_idle();
                    let done = net.drain_completed();
                    rec.flow_latency_us += delivered_latency_us(&done);
                    let pulled = done
                        .iter()
                        .filter(|r| r.tag == u64::MAX)
                        .map(|r| r.end_us)
                        .max()
                        .unwrap_or(start);
                    ready = pulled;
                    let tree = forest.tree(app).expect("listed");
                    for (o, p) in m.regrafted.iter().zip(m.paths.iter()) {
                        let graft = *p.last().expect("non-empty path");
                        let at = (detect + ms_to_us(path_latency_ms(latency, p))).max(ready);
                        let source = if tree.contains(graft) { graft } else { m.new_master };
                        transfers.push((at, source, *o));
                    }
                }
                Err(ForestError::Unrecoverable { .. }) => rec.unrecoverable = true,
                Err(e) => return Err(e.into()),
            }
        }
        for (o, lost) in orphans {
            if forest.tree(app).expect("listed").parent_of(o).is_some() {
                continue;
            }
            let w = forest.recover_worker(app, o, lost)?;
            rec.total_contacted += w.contacted;
            rec.max_contacted = rec.max_contacted.max(w.contacted);
            let at = (detect + ms_to_us(path_latency_ms(latency, &w.path))).max(ready);
            transfers.push((at, w.new_parent, o));
        }
        let start_of_batch = net.now();
        for (i, (at, from, to)) in transfers.iter().enumerate() {
            if from != to {
                net.transmit_via((*at).max(start_of_batch), *from, *to, *from, model_bytes, i as u64)?;
            }
        }
        net.run_until_idle();
        let done = net.drain_completed();
        rec.flow_latency_us += delivered_latency_us(&done);
        let end = done
            .iter()
            .map(|r| r.end_us)
            .chain(transfers.iter().map(|t| t.0))
            .max()
            .unwrap_or(detect)
            .max(ready);
        rec.recovery_ms = us_to_ms(end - t0);
        forest.validate(app)?;
        records.push(rec);
    }
    Ok(records)
}
