//! Scenario-driven experiments: topology, trees, FL rounds, the routing
//! game, churn and recovery, with deterministic CSV/JSON output.

pub mod output;
pub mod routing;
pub mod scenario;
pub mod topology;
pub mod workload;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::forest::{Forest, ForestError, TreeConfig, TreeScope};
use crate::game::GameError;
use crate::idspace::{app_id, AppId, NodeId};
use crate::netsim::{Network, SimError};
use crate::overlay::{Overlay, OverlayConfig, OverlayError, Proximity};

pub use output::{emit, replay, FileDigest, Manifest};
pub use routing::{GameMetrics, GameSetup, PolicyRow, RegretRow};
pub use scenario::{load_scenario, override_key, RewardMode, RoutingPolicy, Scenario};
pub use workload::{fail_and_recover, synth_fl_round, RecoveryRecord};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario key `{key}`: must be {constraint}")]
    Schema { key: String, constraint: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl HarnessError {
    pub fn schema(key: &str, constraint: &str) -> Self {
        Self::Schema {
            key: key.to_string(),
            constraint: constraint.to_string(),
        }
    }

    /// Invariant violations map to a distinct process exit code.
    pub fn is_invariant(&self) -> bool {
        matches!(self, Self::Invariant(_) | Self::Forest(ForestError::Invariant(_)))
            || matches!(self, Self::Sim(SimError::Conservation { .. }))
    }
}

/// Independent random stream `id` of a seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const TOPOLOGY_STREAM: u64 = 1;
const MEMBERSHIP_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const SETUP_STREAM: u64 = 4;
const LEARN_STREAM: u64 = 5;
const REWARD_STREAM: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRow {
    pub app: AppId,
    pub round: u64,
    pub dissemination_depth: usize,
    pub dissemination_ms: f64,
    pub aggregation_depth: usize,
    pub aggregation_ms: f64,
    pub deliveries: usize,
    pub messages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub nodes: usize,
    pub zones: usize,
    pub trees: usize,
    pub members: usize,
    pub max_tree_depth: usize,
    pub mean_tree_depth: f64,
    pub rounds: usize,
    pub mean_round_ms: f64,
    pub failures: usize,
    pub final_average_regret: Option<f64>,
    pub mean_reward: Option<f64>,
    pub flows_started: u64,
    pub flows_delivered: u64,
    pub flows_aborted: u64,
    /// Sum of the latencies of every delivered flow.
    pub delivered_latency_us: u64,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsBundle {
    pub summary: Summary,
    pub rounds: Vec<RoundRow>,
    pub recovery: Vec<RecoveryRecord>,
    pub game: Option<GameMetrics>,
    /// Bytes delivered per sending node.
    pub traffic: BTreeMap<NodeId, u64>,
    /// Number of nodes mastering each count of trees.
    pub masters: BTreeMap<usize, usize>,
    pub overlay_dump: String,
    pub trace: Option<String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub trace: bool,
}

/// A built scenario: topology, overlay, forest and network.
pub struct World {
    pub topology: topology::Topology,
    pub forest: Forest,
    pub net: Network,
    pub apps: Vec<AppId>,
}

/// Builds topology, overlay, trees and network for a scenario.
pub fn build_world(sc: &Scenario, opts: RunOptions) -> Result<World, HarnessError> {
    let topo = topology::build_topology(sc, &mut stream(sc.seed, TOPOLOGY_STREAM))?;
    let cfg = OverlayConfig {
        zone: topo.latency.zone,
        digit_bits: sc.overlay.digit_bits,
        leaf_set_size: sc.overlay.leaf_set_size,
        neighborhood_size: sc.overlay.neighborhood_size,
    };
    let proximity: Arc<dyn Proximity> = Arc::new(topo.latency.clone());
    let overlay = Overlay::build(cfg, topo.ids(), proximity)?;
    let mut forest = Forest::new(overlay);
    let mut net = Network::with_zone_latency(topo.latency.clone());
    if opts.trace {
        net.enable_trace();
    }
    for bw in &topo.host_bandwidth {
        net.add_host(*bw)?;
    }
    for p in &topo.nodes {
        net.attach(p.id, p.host)?;
    }
    let ids = topo.ids();
    let mut rng = stream(sc.seed, MEMBERSHIP_STREAM);
    let members = ((ids.len() as f64) * sc.apps.member_fraction).round() as usize;
    let mut apps = Vec::with_capacity(sc.apps.count);
    for a in 0..sc.apps.count {
        let salt = sc.apps.salts.get(a).cloned().unwrap_or_else(|| a.to_string());
        let name = format!("app-{a}");
        let app = app_id(&name, &sc.seed.to_be_bytes(), salt.as_bytes());
        let mut chosen: Vec<usize> = sample(&mut rng, ids.len(), members).into_vec();
        chosen.sort_unstable();
        let scope = match sc.apps.scope {
            scenario::ScopeKind::Global => TreeScope::Global,
            scenario::ScopeKind::Zone => {
                let anchor = ids[chosen.first().copied().unwrap_or(0)];
                // Members outside the anchor's zone could not reach the key.
                let z = anchor.zone(&topo.latency.zone);
                chosen.retain(|&i| ids[i].zone(&topo.latency.zone) == z);
                TreeScope::Zone(z)
            }
        };
        forest.create_tree(
            app,
            &name,
            TreeConfig {
                scope,
                replicas: sc.apps.replicas,
                ..TreeConfig::default()
            },
        )?;
        for i in chosen {
            forest.subscribe(app, ids[i])?;
        }
        apps.push(app);
    }
    forest.validate_all()?;
    Ok(World {
        topology: topo,
        forest,
        net,
        apps,
    })
}

/// Runs a scenario end to end.
pub fn run(sc: &Scenario, opts: RunOptions) -> Result<MetricsBundle, HarnessError> {
    sc.validate()?;
    let mut w = build_world(sc, opts)?;
    let ids = w.topology.ids();
    let mut noise = stream(sc.seed, NOISE_STREAM);
    let mut rounds = Vec::new();
    let mut recovery = Vec::new();
    let mut failures = 0;
    let mut latency_us = 0u64;
    let mut models: BTreeMap<AppId, Vec<f64>> = w.apps.iter().map(|a| (*a, vec![0.0; sc.workload.model_dim])).collect();
    for r in 0..sc.workload.rounds {
        let mut batch = Vec::new();
        for c in sc.churn.iter().filter(|c| c.before_round == r) {
            let node = ids[c.node];
            match c.action {
                scenario::ChurnAction::Fail | scenario::ChurnAction::Leave => batch.push(node),
                scenario::ChurnAction::BandwidthSet => w.net.set_bandwidth(node, c.mbps.expect("validated"))?,
            }
        }
        if !batch.is_empty() {
            failures += batch.len();
            recovery.extend(fail_and_recover(
                &mut w.forest,
                &mut w.net,
                &w.topology.latency,
                &batch,
                sc.recovery.detection_ms(),
                sc.workload.model_bytes,
            )?);
        }
        for &app in &w.apps {
            let out = synth_fl_round(&mut w.forest, app, &models[&app], sc.workload.noise_scale, &mut noise)?;
            let tree = w.forest.tree(app).expect("created");
            let down = workload::time_broadcast(&mut w.net, tree, sc.workload.model_bytes)?;
            let up = workload::time_aggregation(&mut w.net, tree, sc.workload.model_bytes)?;
            latency_us += down.flow_latency_us + up.flow_latency_us;
            rounds.push(RoundRow {
                app,
                round: out.round,
                dissemination_depth: out.dissemination_depth,
                dissemination_ms: down.elapsed_ms,
                aggregation_depth: up.depth,
                aggregation_ms: up.elapsed_ms,
                deliveries: out.perturbations.len(),
                messages: out.messages,
            });
            models.insert(app, out.model);
        }
    }
    let game = if sc.workload.packets > 0 {
        let live: BTreeSet<NodeId> = w.forest.overlay().live_nodes().collect();
        let mut topo = w.topology.clone();
        topo.nodes.retain(|p| live.contains(&p.id));
        let setup = GameSetup::build(sc, &topo, &mut stream(sc.seed, SETUP_STREAM))?;
        Some(routing::run_routing_game(
            sc,
            &setup,
            &mut w.net,
            &mut stream(sc.seed, LEARN_STREAM),
            &mut stream(sc.seed, REWARD_STREAM),
        )?)
    } else {
        None
    };
    w.forest.validate_all()?;
    w.net.check_conservation()?;
    if let Some(g) = &game {
        if sc.reward.mode == scenario::RewardMode::Latency && g.clip_fraction > 0.01 {
            return Err(HarnessError::Invariant(format!(
                "{:.2}% of latency rewards were clipped",
                100.0 * g.clip_fraction
            )));
        }
    }
    let mut per_master: BTreeMap<NodeId, usize> = BTreeMap::new();
    for t in w.forest.trees().filter(|t| w.apps.contains(&t.app)) {
        *per_master.entry(t.root()).or_default() += 1;
    }
    let live = w.forest.overlay().len();
    let mut masters: BTreeMap<usize, usize> = BTreeMap::new();
    masters.insert(0, live - per_master.len());
    for c in per_master.values() {
        *masters.entry(*c).or_default() += 1;
    }
    let depths: Vec<usize> = w
        .apps
        .iter()
        .flat_map(|a| {
            let t = w.forest.tree(*a).expect("created");
            t.members().iter().filter_map(|m| t.depth(*m)).collect::<Vec<_>>()
        })
        .collect();
    let counters = w.net.counters();
    let summary = Summary {
        nodes: live,
        zones: w.topology.zones().len(),
        trees: w.apps.len(),
        members: depths.len(),
        max_tree_depth: depths.iter().copied().max().unwrap_or(0),
        mean_tree_depth: if depths.is_empty() {
            0.0
        } else {
            depths.iter().sum::<usize>() as f64 / depths.len() as f64
        },
        rounds: rounds.len(),
        mean_round_ms: if rounds.is_empty() {
            0.0
        } else {
            rounds.iter().map(|r| r.dissemination_ms + r.aggregation_ms).sum::<f64>() / rounds.len() as f64
        },
        failures,
        final_average_regret: game.as_ref().and_then(|g| g.final_average_regret()),
        mean_reward: game.as_ref().map(|g| g.mean_reward),
        flows_started: counters.started,
        flows_delivered: counters.delivered,
        flows_aborted: counters.aborted,
        delivered_latency_us: latency_us
            + recovery.iter().map(|r| r.flow_latency_us).sum::<u64>()
            + game.as_ref().map_or(0, |g| g.flow_latency_us),
    };
    Ok(MetricsBundle {
        summary,
        rounds,
        recovery,
        game,
        traffic: w.net.sent_bytes().clone(),
        masters,
        overlay_dump: w.forest.overlay().dump(),
        trace: opts.trace.then(|| w.net.trace_text()),
    })
}

/// Sum of delivered flow latencies recomputed from a trace.
pub fn trace_delivered_latency_us(trace: &str) -> Result<u64, HarnessError> {
    let mut total = 0u64;
    for line in trace.lines() {
        let mut f = line.split('\t');
        if f.nth(1) != Some("delivered") {
            continue;
        }
        let detail = f.nth(1).ok_or_else(|| HarnessError::Parse(format!("trace line `{line}`")))?;
        let field = |k: &str| -> Result<u64, HarnessError> {
            detail
                .split(' ')
                .find_map(|kv| kv.strip_prefix(k))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| HarnessError::Parse(format!("trace line `{line}` lacks {k}")))
        };
        total += field("end=")? - field("start=")?;
    }
    Ok(total)
}

/// Regret series of a recorded policy history under a scenario.
pub fn regret_eval(sc: &Scenario, rows: &[PolicyRow]) -> Result<Vec<RegretRow>, HarnessError> {
    sc.validate()?;
    let topo = topology::build_topology(sc, &mut stream(sc.seed, TOPOLOGY_STREAM))?;
    // Churn removes nodes before the routing phase; mirror that here.
    let gone: BTreeSet<NodeId> = sc
        .churn
        .iter()
        .filter(|c| c.action != scenario::ChurnAction::BandwidthSet && c.before_round < sc.workload.rounds)
        .map(|c| topo.nodes[c.node].id)
        .collect();
    let mut topo = topo;
    topo.nodes.retain(|p| !gone.contains(&p.id));
    let setup = GameSetup::build(sc, &topo, &mut stream(sc.seed, SETUP_STREAM))?;
    routing::regret_from_history(sc, &setup, rows)
}

/// Runs scenario variants on worker threads; results keep input order.
pub fn run_many(variants: &[Scenario], threads: usize, opts: RunOptions) -> Vec<Result<MetricsBundle, HarnessError>> {
    let threads = threads.max(1);
    let mut results: Vec<Option<Result<MetricsBundle, HarnessError>>> = (0..variants.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= variants.len() {
                    break;
                }
                let r = run(&variants[i], opts);
                slots.lock().expect("no poisoned worker")[i] = Some(r);
            });
        }
    });
    results.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Expands `key=v1,v2,...` into one scenario per value.
pub fn sweep_variants(base: &Scenario, vary: &str) -> Result<Vec<Scenario>, HarnessError> {
    let (key, values) = vary
        .split_once('=')
        .ok_or_else(|| HarnessError::schema("--vary", "of the form key=v1,v2"))?;
    values
        .split(',')
        .map(|v| override_key(base, key.trim(), v.trim()))
        .collect()
}

/// Draws `count` distinct live nodes other than `exclude`.
pub fn pick_nodes<R: Rng + ?Sized>(forest: &Forest, count: usize, exclude: &[NodeId], rng: &mut R) -> Vec<NodeId> {
    let pool: Vec<NodeId> = forest.overlay().live_nodes().filter(|n| !exclude.contains(n)).collect();
    let mut idx = sample(rng, pool.len(), count.min(pool.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i]).collect()
}
