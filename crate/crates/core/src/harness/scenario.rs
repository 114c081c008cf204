//! Scenario files: TOML with a defaults table for everything but the node
//! count and seed. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use super::HarnessError;
use crate::game::GameConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingPolicy {
    #[default]
    Algorithm1,
    Bandit,
    Opt,
    Multicast,
}

impl std::str::FromStr for RoutingPolicy {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "algorithm1" => Ok(Self::Algorithm1),
            "bandit" => Ok(Self::Bandit),
            "opt" => Ok(Self::Opt),
            "multicast" => Ok(Self::Multicast),
            _ => Err(HarnessError::schema("policy", "one of algorithm1, bandit, opt, multicast")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZoneParams {
    /// Zone prefix width.
    pub m: u32,
    /// Geographic clusters the generator places nodes in.
    pub clusters: usize,
    /// Landmarks used for binning; one landmark puts every node in one zone.
    pub landmarks: usize,
    pub thresholds_ms: Vec<f64>,
    /// Upper bound of intra-zone RTT.
    pub diameter_ms: f64,
    /// Half-width of the region, in degrees.
    pub spread_deg: f64,
    /// Optional `id,lat,lon` site list replacing the generator.
    pub sites_csv: Option<String>,
}

impl Default for ZoneParams {
    fn default() -> Self {
        Self {
            m: 8,
            clusters: 4,
            landmarks: 3,
            thresholds_ms: vec![100.0, 400.0],
            diameter_ms: 40.0,
            spread_deg: 20.0,
            sites_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlayParams {
    pub digit_bits: u32,
    pub leaf_set_size: usize,
    pub neighborhood_size: usize,
}

impl Default for OverlayParams {
    fn default() -> Self {
        Self {
            digit_bits: 4,
            leaf_set_size: 24,
            neighborhood_size: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    #[default]
    Global,
    /// Each tree is scoped to the zone of a randomly chosen member.
    Zone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppParams {
    pub count: usize,
    /// Fraction of nodes subscribing to each application.
    pub member_fraction: f64,
    pub scope: ScopeKind,
    pub replicas: usize,
    /// Salt per application; missing entries default to the index.
    pub salts: Vec<String>,
}

impl Default for AppParams {
    fn default() -> Self {
        Self {
            count: 1,
            member_fraction: 1.0,
            scope: ScopeKind::Global,
            replicas: 2,
            salts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingParams {
    /// Fraction of nodes acting as relays.
    pub relay_fraction: f64,
    pub min_hops: usize,
    pub max_hops: usize,
    /// Simplex grid resolution for candidate sets.
    pub grid: usize,
    /// Explicit candidate policies over each node's hops, overriding the grid.
    pub candidates: Option<Vec<Vec<f64>>>,
    /// Asynchronous update delay: node update periods are drawn from `1..=D+1`.
    pub async_delay: usize,
    pub bandit_epsilon: f64,
    /// Derive alpha and beta from the node and episode counts
    /// (`1 - α = 1/(N K)`, `β = 1/(N √K)`); tau is kept.
    pub theory_schedule: bool,
}

impl Default for RoutingParams {
    fn default() -> Self {
        Self {
            relay_fraction: 0.1,
            min_hops: 2,
            max_hops: 4,
            grid: 10,
            candidates: None,
            async_delay: 0,
            bandit_epsilon: 0.05,
            theory_schedule: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Bernoulli success scaled by the measured relay concurrency.
    #[default]
    Congestion,
    /// `1 - l / l_max` from simulated delivery latency.
    Latency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    pub mode: RewardMode,
    pub theta_min: f64,
    pub theta_max: f64,
    pub rate_max_mbps: f64,
    pub bandwidth_min_mbps: f64,
    pub bandwidth_max_mbps: f64,
    /// Relay bandwidths are redrawn every this many episodes; 0 disables.
    pub perturb_every: usize,
    /// Relative size of the perturbation.
    pub perturb_scale: f64,
    pub l_max_floor_ms: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            mode: RewardMode::Congestion,
            theta_min: 0.6,
            theta_max: 1.0,
            rate_max_mbps: 20.0,
            bandwidth_min_mbps: 20.0,
            bandwidth_max_mbps: 100.0,
            perturb_every: 10,
            perturb_scale: 0.5,
            l_max_floor_ms: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    pub rounds: usize,
    pub model_dim: usize,
    pub noise_scale: f64,
    pub model_bytes: u64,
    /// Packets each sender transmits in the routing phase; 0 skips it.
    pub packets: usize,
    pub packet_bytes: u64,
    /// Packet bins of the hop-selection heatmap.
    pub heatmap_bins: usize,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            rounds: 3,
            model_dim: 8,
            noise_scale: 0.01,
            model_bytes: 1_000_000,
            packets: 200,
            packet_bytes: 12_500,
            heatmap_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryParams {
    pub keepalive_ms: f64,
    pub missed_beats: u32,
}

impl Default for RecoveryParams {
    fn default() -> Self {
        Self {
            keepalive_ms: 1000.0,
            missed_beats: 3,
        }
    }
}

impl RecoveryParams {
    pub fn detection_ms(&self) -> f64 {
        self.keepalive_ms * self.missed_beats as f64
    }
}

/// Physical hosts carrying several logical nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostParams {
    /// Capacity of each host class, cycled over as hosts are created.
    pub capacities: Vec<u32>,
    /// Capacity of the least powerful node.
    pub unit: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChurnAction {
    Fail,
    Leave,
    BandwidthSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnSpec {
    /// Applied before this FL round.
    pub before_round: usize,
    /// Node index in identifier order.
    pub node: usize,
    pub action: ChurnAction,
    pub mbps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub nodes: usize,
    pub seed: u64,
    #[serde(default)]
    pub policy: RoutingPolicy,
    #[serde(default)]
    pub zones: ZoneParams,
    #[serde(default)]
    pub overlay: OverlayParams,
    #[serde(default)]
    pub apps: AppParams,
    #[serde(default)]
    pub game: GameConfig,
    #[serde(default)]
    pub routing: RoutingParams,
    #[serde(default)]
    pub reward: RewardParams,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub recovery: RecoveryParams,
    #[serde(default)]
    pub hosts: Option<HostParams>,
    #[serde(default)]
    pub churn: Vec<ChurnSpec>,
}

fn check(ok: bool, key: &str, constraint: &str) -> Result<(), HarnessError> {
    if ok {
        Ok(())
    } else {
        Err(HarnessError::schema(key, constraint))
    }
}

impl Scenario {
    pub fn minimal(nodes: usize, seed: u64) -> Self {
        Self {
            nodes,
            seed,
            policy: RoutingPolicy::default(),
            zones: ZoneParams::default(),
            overlay: OverlayParams::default(),
            apps: AppParams::default(),
            game: GameConfig::default(),
            routing: RoutingParams::default(),
            reward: RewardParams::default(),
            workload: Workload::default(),
            recovery: RecoveryParams::default(),
            hosts: None,
            churn: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        check(self.nodes >= 2, "nodes", "at least 2")?;
        check((1..=16).contains(&self.zones.m), "zones.m", "in 1..=16")?;
        check(self.zones.clusters >= 1, "zones.clusters", "at least 1")?;
        check(self.zones.landmarks >= 1, "zones.landmarks", "at least 1")?;
        check(
            self.zones.thresholds_ms.windows(2).all(|w| w[0] < w[1]),
            "zones.thresholds_ms",
            "strictly increasing",
        )?;
        check(self.zones.diameter_ms >= 1.0, "zones.diameter_ms", "at least 1")?;
        check(self.zones.spread_deg > 0.0, "zones.spread_deg", "positive")?;
        check((1..=8).contains(&self.overlay.digit_bits), "overlay.digit_bits", "in 1..=8")?;
        check(
            self.overlay.leaf_set_size >= 2 && self.overlay.leaf_set_size % 2 == 0,
            "overlay.leaf_set_size",
            "even and at least 2",
        )?;
        check(
            (0.0..=1.0).contains(&self.apps.member_fraction),
            "apps.member_fraction",
            "in [0, 1]",
        )?;
        if let Err(e) = self.game.validate() {
            let key = if self.game.tau == 0 { "game.tau" } else { "game" };
            return Err(HarnessError::schema(key, &e.to_string()));
        }
        let r = &self.routing;
        check(r.relay_fraction > 0.0 && r.relay_fraction <= 1.0, "routing.relay_fraction", "in (0, 1]")?;
        check(r.min_hops >= 1, "routing.min_hops", "at least 1")?;
        check(r.max_hops >= r.min_hops, "routing.max_hops", "at least routing.min_hops")?;
        check(r.grid >= 1, "routing.grid", "at least 1")?;
        check((0.0..=1.0).contains(&r.bandit_epsilon), "routing.bandit_epsilon", "in [0, 1]")?;
        if let Some(c) = &r.candidates {
            check(!c.is_empty(), "routing.candidates", "non-empty")?;
            let d = c[0].len();
            check(
                c.iter().all(|p| p.len() == d) && d >= r.min_hops && d <= r.max_hops,
                "routing.candidates",
                "one entry per hop with a fixed hop count",
            )?;
        }
        if self.policy == RoutingPolicy::Multicast {
            check(
                r.max_hops <= crate::game::MAX_MULTICAST_HOPS,
                "routing.max_hops",
                "at most 5 for multicast",
            )?;
        }
        let w = &self.reward;
        check(
            0.0 <= w.theta_min && w.theta_min <= w.theta_max && w.theta_max <= 1.0,
            "reward.theta_min",
            "0 <= theta_min <= theta_max <= 1",
        )?;
        check(w.rate_max_mbps > 0.0, "reward.rate_max_mbps", "positive")?;
        check(
            0.0 < w.bandwidth_min_mbps && w.bandwidth_min_mbps <= w.bandwidth_max_mbps,
            "reward.bandwidth_min_mbps",
            "0 < min <= max",
        )?;
        check((0.0..1.0).contains(&w.perturb_scale), "reward.perturb_scale", "in [0, 1)")?;
        check(w.l_max_floor_ms > 0.0, "reward.l_max_floor_ms", "positive")?;
        check(self.workload.model_dim >= 1, "workload.model_dim", "at least 1")?;
        check(self.workload.noise_scale >= 0.0, "workload.noise_scale", "non-negative")?;
        check(self.workload.heatmap_bins >= 1, "workload.heatmap_bins", "at least 1")?;
        check(self.recovery.keepalive_ms > 0.0, "recovery.keepalive_ms", "positive")?;
        if let Some(h) = &self.hosts {
            check(
                !h.capacities.is_empty() && h.unit > 0 && h.capacities.iter().all(|c| *c >= h.unit),
                "hosts.capacities",
                "non-empty, each at least hosts.unit",
            )?;
        }
        for (i, c) in self.churn.iter().enumerate() {
            check(c.node < self.nodes, &format!("churn[{i}].node"), "below nodes")?;
            if c.action == ChurnAction::BandwidthSet {
                check(c.mbps.is_some_and(|b| b > 0.0), &format!("churn[{i}].mbps"), "positive")?;
            }
        }
        check(
            self.churn.windows(2).all(|w| w[0].before_round <= w[1].before_round),
            "churn",
            "ordered by before_round",
        )?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-1 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex_sha1(self.to_toml().as_bytes())
    }
}

pub fn hex_sha1(bytes: &[u8]) -> String {
    Sha1::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses and validates a scenario.
pub fn load_scenario(text: &str) -> Result<Scenario, HarnessError> {
    let sc: Scenario = toml::from_str(text).map_err(|e| HarnessError::Parse(e.message().to_string()))?;
    sc.validate()?;
    Ok(sc)
}

/// Sets a dotted key (`game.alpha`, `nodes`) to a TOML literal.
pub fn override_key(sc: &Scenario, dotted: &str, literal: &str) -> Result<Scenario, HarnessError> {
    let mut doc: toml::Table = toml::from_str(&sc.to_toml()).expect("own output parses");
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {literal}"))
        .map_err(|_| HarnessError::schema(dotted, "a TOML literal"))?
        .remove("v")
        .expect("parsed key");
    let parts: Vec<&str> = dotted.split('.').collect();
    let (last, path) = parts.split_last().ok_or_else(|| HarnessError::schema(dotted, "a key"))?;
    let mut table = &mut doc;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| HarnessError::schema(dotted, "a table path"))?;
    }
    table.insert(last.to_string(), value);
    load_scenario(&toml::to_string(&doc).expect("table serializes"))
}
