mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use edgeforest::harness::{run, RewardMode, RunOptions, Scenario};
use edgeforest::harness::output::render;
use edgeforest::idspace::NodeId;
use edgeforest::netsim::*;
use proptest::prelude::*;
use rand::Rng;

fn zero_latency() -> Network {
    Network::new(Arc::new(|_, _| 0.0))
}

/// Completion times under equal sharing for flows that all start at zero:
/// `t_i = Σ_j min(s_j, s_i) / B`.
fn processor_sharing_oracle(bits: &[f64], mbps: f64) -> Vec<f64> {
    bits.iter()
        .map(|&si| bits.iter().map(|&sj| sj.min(si)).sum::<f64>() / mbps)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn equal_sharing_matches_oracle(sizes in prop::collection::vec(1_000u64..2_000_000, 1..12), mbps in 1.0f64..200.0) {
        let mut net = zero_latency();
        let sink = NodeId(1000);
        net.add_node(sink, mbps).unwrap();
        for (i, &b) in sizes.iter().enumerate() {
            net.add_node(NodeId(i as u128), 1000.0).unwrap();
            net.transmit(NodeId(i as u128), sink, b, i as u64).unwrap();
        }
        net.run_until_idle();
        let mut done = net.drain_completed();
        done.sort_by_key(|r| r.tag);
        let bits: Vec<f64> = sizes.iter().map(|b| (*b * 8) as f64).collect();
        let want = processor_sharing_oracle(&bits, mbps);
        for (r, w) in done.iter().zip(&want) {
            prop_assert!((r.end_us as f64 - w).abs() <= sizes.len() as f64 + 1.0, "flow {}: {} vs {}", r.tag, r.end_us, w);
        }
        // The sink never moves more than B bits per microsecond.
        let last = done.iter().map(|r| r.end_us).max().unwrap() as f64;
        prop_assert!(bits.iter().sum::<f64>() / mbps <= last + 1.0);
    }

    #[test]
    fn every_flow_ends_once(seed in any::<u64>(), flows in 1usize..80, failures in 0usize..4) {
        let mut r = common::rng(seed);
        let mut net = Network::new(Arc::new(|a: NodeId, b: NodeId| ((a.0 + b.0) % 7) as f64));
        let nodes: Vec<NodeId> = (0..10).map(NodeId).collect();
        for &n in &nodes {
            net.add_node(n, r.random_range(5.0..100.0)).unwrap();
        }
        for i in 0..flows {
            let a = nodes[r.random_range(0..10)];
            let b = nodes[r.random_range(0..10)];
            if a != b {
                net.transmit_at(r.random_range(0..2_000_000), a, b, r.random_range(1..500_000), i as u64).unwrap();
            }
        }
        let mut events: Vec<ChurnEvent> = (0..failures)
            .map(|_| ChurnEvent { time_us: r.random_range(0..3_000_000), node: nodes[r.random_range(0..10)], kind: ChurnKind::Fail })
            .collect();
        events.sort_by_key(|e| e.time_us);
        net.inject(&ChurnSchedule { events }).unwrap();
        net.run_until_idle();
        net.check_conservation().unwrap();
        let c = net.counters();
        prop_assert_eq!(c.started, c.delivered + c.aborted);
        let done = net.drain_completed();
        let ids: BTreeSet<FlowId> = done.iter().map(|r| r.flow).collect();
        prop_assert_eq!(ids.len(), done.len());
        prop_assert_eq!(done.len() as u64, c.started);
    }
}

fn traced_run(seed: u64) -> String {
    let mut r = common::rng(seed);
    let mut net = Network::with_zone_latency(ZoneLatency::new(seed, Default::default(), 40.0));
    net.enable_trace();
    let nodes: Vec<NodeId> = (0..20).map(|_| NodeId(r.random())).collect();
    for &n in &nodes {
        net.add_node(n, 50.0).unwrap();
    }
    for i in 0..200 {
        let (a, b) = (nodes[r.random_range(0..20)], nodes[r.random_range(0..20)]);
        if a != b {
            net.transmit_at(r.random_range(0..1_000_000), a, b, 100_000, i).unwrap();
        }
    }
    net.run_until_idle();
    net.trace_text()
}

#[test]
fn identical_seeds_give_identical_traces() {
    assert_eq!(traced_run(9), traced_run(9));
    assert_ne!(traced_run(9), traced_run(10));
    let mut last = 0u64;
    for line in traced_run(9).lines() {
        let t: u64 = line.split('\t').next().unwrap().parse().unwrap();
        assert!(t >= last);
        last = t;
    }

    let mut sc = Scenario::minimal(40, 5);
    sc.workload.packets = 50;
    let a = render(&run(&sc, RunOptions { trace: true }).unwrap());
    let b = render(&run(&sc, RunOptions { trace: true }).unwrap());
    assert_eq!(a, b);
}

#[test]
fn halving_bandwidth_slows_the_next_episode() {
    let mut net = Network::new(Arc::new(|_, _| 2.0));
    let relay = NodeId(99);
    net.add_node(relay, 40.0).unwrap();
    let senders: Vec<NodeId> = (0..8).map(NodeId).collect();
    for &s in &senders {
        net.add_node(s, 40.0).unwrap();
    }
    let episode_us = 1_000_000;
    let mut events = Vec::new();
    for n in senders.iter().chain([&relay]) {
        events.push(ChurnEvent { time_us: 10 * episode_us, node: *n, kind: ChurnKind::BandwidthSet { mbps: 20.0 } });
    }
    net.inject(&ChurnSchedule { events }).unwrap();
    let mut mean = Vec::new();
    for e in 0..12u64 {
        for (i, &s) in senders.iter().enumerate() {
            net.transmit_at(e * episode_us + 1, s, relay, 50_000, i as u64).unwrap();
        }
        net.advance((e + 1) * episode_us);
        let done = net.drain_completed();
        mean.push(done.iter().map(|r| r.latency_ms()).sum::<f64>() / done.len() as f64);
    }
    assert!(mean[11] > mean[9], "{mean:?}");
    assert_eq!(mean[9], mean[8]);
}

#[test]
fn latency_rewards_rarely_clip() {
    let mut sc = Scenario::minimal(60, 8);
    sc.reward.mode = RewardMode::Latency;
    sc.workload.packets = 300;
    let bundle = run(&sc, RunOptions::default()).unwrap();
    let g = bundle.game.unwrap();
    assert!(g.clip_fraction < 0.01, "clip fraction {}", g.clip_fraction);
}
