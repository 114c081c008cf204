//! Next-hop routing game played over the simulated network.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::scenario::{RewardMode, RoutingPolicy, Scenario};
use super::topology::Topology;
use super::{stream, HarnessError};
use crate::game::{
    lift_to_multicast, opt_assignment, BanditLearner, CandidateSet, Congestion, GameModel, Learner, MulticastSpace,
    Policy, RewardModel,
};
use crate::idspace::NodeId;
use crate::netsim::{LatencyNormalizer, Network};

const PERTURB_STREAM: u64 = 1000;

/// Senders, relays and the reward parameters of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSetup {
    pub senders: Vec<NodeId>,
    pub relays: Vec<NodeId>,
    /// Relay indices behind each sender's local hops, nearest first.
    pub node_paths: Vec<Vec<usize>>,
    pub theta: Vec<f64>,
    pub base_bandwidth: Vec<f64>,
    pub rate_max: f64,
    pub perturb_every: usize,
    pub perturb_scale: f64,
    seed: u64,
}

impl GameSetup {
    pub fn build(sc: &Scenario, topo: &Topology, rng: &mut ChaCha8Rng) -> Result<Self, HarnessError> {
        let ids = topo.ids();
        let n = ids.len();
        let r = &sc.routing;
        let relay_count = ((sc.nodes as f64 * r.relay_fraction).ceil() as usize)
            .max(r.max_hops)
            .min(n - 1);
        if relay_count < r.min_hops {
            return Err(HarnessError::schema("routing.min_hops", "at most the relay count"));
        }
        let mut picked: Vec<usize> = sample(rng, n, relay_count).into_vec();
        picked.sort_unstable();
        let relays: Vec<NodeId> = picked.iter().map(|&i| ids[i]).collect();
        let senders: Vec<NodeId> = ids.iter().copied().filter(|x| !relays.contains(x)).collect();
        let fixed = r.candidates.as_ref().map(|c| c[0].len());
        let hi = r.max_hops.min(relay_count);
        let mut node_paths = Vec::with_capacity(senders.len());
        for &s in &senders {
            let h = fixed.unwrap_or_else(|| rng.random_range(r.min_hops..=hi));
            let mut by_rtt: Vec<(f64, usize)> = relays
                .iter()
                .enumerate()
                .map(|(i, &x)| (topo.latency.rtt(s, x), i))
                .collect();
            by_rtt.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            node_paths.push(by_rtt.into_iter().take(h).map(|(_, i)| i).collect());
        }
        let w = &sc.reward;
        let theta = (0..relay_count)
            .map(|_| rng.random_range(w.theta_min..=w.theta_max))
            .collect();
        let host_of: BTreeMap<NodeId, usize> = topo.nodes.iter().map(|p| (p.id, p.host)).collect();
        let base_bandwidth = relays.iter().map(|x| topo.host_bandwidth[host_of[x]]).collect();
        Ok(Self {
            senders,
            relays,
            node_paths,
            theta,
            base_bandwidth,
            rate_max: w.rate_max_mbps,
            perturb_every: w.perturb_every,
            perturb_scale: w.perturb_scale,
            seed: sc.seed,
        })
    }

    pub fn epoch(&self, episode: usize) -> usize {
        if self.perturb_every == 0 {
            0
        } else {
            episode / self.perturb_every
        }
    }

    /// Relay bandwidths during an epoch; epoch 0 is the base draw and later
    /// epochs scale each relay independently.
    pub fn bandwidths(&self, epoch: usize) -> Vec<f64> {
        if epoch == 0 || self.perturb_scale == 0.0 {
            return self.base_bandwidth.clone();
        }
        let mut rng = stream(self.seed, PERTURB_STREAM + epoch as u64);
        let s = self.perturb_scale;
        self.base_bandwidth
            .iter()
            .map(|b| b * rng.random_range(1.0 - s..=1.0 + s))
            .collect()
    }

    pub fn model(&self, epoch: usize) -> Result<GameModel, HarnessError> {
        let rewards = RewardModel::new(
            self.theta.clone(),
            Congestion::Capacity {
                bandwidth: self.bandwidths(epoch),
                rate_max: self.rate_max,
            },
        )?;
        Ok(GameModel::new(rewards, self.node_paths.clone())?)
    }

    /// Candidate set of each sender over its own hops.
    pub fn candidates(&self, sc: &Scenario) -> Result<Vec<CandidateSet>, HarnessError> {
        let floor = sc.game.policy_floor;
        let mut cache: BTreeMap<usize, CandidateSet> = BTreeMap::new();
        self.node_paths
            .iter()
            .map(|p| {
                let d = p.len();
                if let Some(c) = cache.get(&d) {
                    return Ok(c.clone());
                }
                let set = match &sc.routing.candidates {
                    Some(list) => CandidateSet::new(
                        list.iter().map(|v| Policy::new(v.clone())).collect::<Result<_, _>>()?,
                        floor,
                    )?,
                    None => CandidateSet::simplex_grid(d, sc.routing.grid, floor)?,
                };
                cache.insert(d, set.clone());
                Ok(set)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretRow {
    pub episode: usize,
    pub instantaneous: f64,
    pub cumulative: f64,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyRow {
    pub episode: usize,
    pub node: NodeId,
    /// Policy followed during the episode, one entry per action.
    pub policy: Vec<f64>,
    /// Action chosen for the episode's last packet.
    pub chosen: usize,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameMetrics {
    pub policy: RoutingPolicy,
    pub relays: Vec<NodeId>,
    pub episodes: usize,
    pub regret: Vec<RegretRow>,
    pub policies: Vec<PolicyRow>,
    /// Mean packet latency per episode, ms.
    pub latency_ms: Vec<f64>,
    /// Packet bins by relay: how often each relay was picked.
    pub heatmap: Vec<Vec<u64>>,
    pub mean_reward: f64,
    pub clip_fraction: f64,
    /// Sum of delivered packet latencies.
    pub flow_latency_us: u64,
}

impl GameMetrics {
    pub fn final_average_regret(&self) -> Option<f64> {
        self.regret.last().map(|r| r.average)
    }
}

enum Players {
    Learners(Vec<Learner>),
    Bandits(Vec<BanditLearner>),
    Fixed(Vec<usize>),
}

/// Latency bound with every sender's packet on the slowest relay; the
/// calibration for windows without a comparable predecessor.
fn crowd_bound_ms(sc: &Scenario, setup: &GameSetup, net: &Network) -> f64 {
    setup
        .relays
        .iter()
        .map(|&r| {
            let prop = setup.senders.iter().map(|&s| net.propagation_ms(s, r)).fold(0.0, f64::max);
            let bw = net.bandwidth(r).unwrap_or(1.0);
            prop + (sc.workload.packet_bytes * 8 * setup.senders.len() as u64) as f64 / bw / 1000.0
        })
        .fold(0.0, f64::max)
}

/// Plays the routing game for `workload.packets` packets per sender.
pub fn run_routing_game(
    sc: &Scenario,
    setup: &GameSetup,
    net: &mut Network,
    learn_rng: &mut ChaCha8Rng,
    reward_rng: &mut ChaCha8Rng,
) -> Result<GameMetrics, HarnessError> {
    let tau = sc.game.tau;
    let packets = sc.workload.packets;
    let episodes = packets.div_ceil(tau);
    let mut game_cfg = sc.game;
    if sc.routing.theory_schedule {
        let t = crate::game::GameConfig::theory(sc.nodes, episodes);
        game_cfg.alpha = t.alpha;
        game_cfg.beta = t.beta;
    }
    let cands = setup.candidates(sc)?;
    let multicast = sc.policy == RoutingPolicy::Multicast;
    let spaces: Vec<MulticastSpace> = if multicast {
        setup
            .node_paths
            .iter()
            .map(|p| MulticastSpace::new(p.len()))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let mut epoch = 0;
    let mut model = setup.model(0)?;
    let mut players = match sc.policy {
        RoutingPolicy::Algorithm1 => Players::Learners(cands.iter().map(|c| Learner::new(c.clone())).collect()),
        RoutingPolicy::Multicast => Players::Learners(
            cands
                .iter()
                .map(|c| lift_to_multicast(c, false).map(|(_, lifted)| Learner::new(lifted)))
                .collect::<Result<_, _>>()?,
        ),
        RoutingPolicy::Bandit => Players::Bandits(
            setup
                .node_paths
                .iter()
                .map(|p| BanditLearner::new(p.len(), sc.routing.bandit_epsilon))
                .collect(),
        ),
        RoutingPolicy::Opt => Players::Fixed(opt_assignment(&model)),
    };
    // Update period of each sender under asynchronous updates.
    let periods: Vec<usize> = setup
        .senders
        .iter()
        .map(|_| learn_rng.random_range(1..=sc.routing.async_delay + 1))
        .collect();
    let mut normalizer = LatencyNormalizer::with_initial(sc.reward.l_max_floor_ms, crowd_bound_ms(sc, setup, net));
    let bins = sc.workload.heatmap_bins;
    let mut heatmap = vec![vec![0u64; setup.relays.len()]; bins];
    let mut metrics = GameMetrics {
        policy: sc.policy,
        relays: setup.relays.clone(),
        episodes,
        regret: Vec::with_capacity(episodes),
        policies: Vec::new(),
        latency_ms: Vec::with_capacity(episodes),
        heatmap: Vec::new(),
        mean_reward: 0.0,
        clip_fraction: 0.0,
        flow_latency_us: 0,
    };
    let mut cumulative = 0.0;
    let mut reward_total = 0.0;
    let mut reward_count = 0u64;
    let senders = setup.senders.len();
    for e in 0..episodes {
        if setup.epoch(e) != epoch {
            epoch = setup.epoch(e);
            model = setup.model(epoch)?;
            for (i, b) in setup.bandwidths(epoch).into_iter().enumerate() {
                net.set_bandwidth(setup.relays[i], b)?;
            }
            normalizer.rebound(crowd_bound_ms(sc, setup, net));
            if let Players::Fixed(a) = &mut players {
                *a = opt_assignment(&model);
            }
        }
        let joint: Vec<Policy> = match &players {
            Players::Learners(ls) => ls.iter().map(|l| l.policy.clone()).collect(),
            Players::Bandits(bs) => bs.iter().map(|b| b.policy(e as u64 + 1)).collect(),
            Players::Fixed(a) => a
                .iter()
                .zip(&setup.node_paths)
                .map(|(&i, p)| Policy::pure(p.len(), i))
                .collect(),
        };
        if !multicast {
            let r = model.regret(&joint, &cands)?;
            cumulative += r;
            metrics.regret.push(RegretRow {
                episode: e,
                instantaneous: r,
                cumulative,
                average: cumulative / (e + 1) as f64,
            });
        }
        let mut chosen = vec![0usize; senders];
        let mut ep_reward = vec![0.0; senders];
        let mut ep_count = vec![0usize; senders];
        let mut latency_sum = 0.0;
        let mut latency_n = 0usize;
        let steps = tau.min(packets - e * tau);
        for t in 0..steps {
            let packet = e * tau + t;
            let now = net.now();
            // Every sender picks its action, then all flows start at once.
            for n in 0..senders {
                chosen[n] = match &players {
                    Players::Learners(ls) => ls[n].choose(learn_rng),
                    Players::Bandits(bs) => bs[n].choose(e as u64 + 1, learn_rng),
                    Players::Fixed(a) => a[n],
                };
                let hops: Vec<usize> = if multicast {
                    spaces[n].members(chosen[n]).collect()
                } else {
                    vec![chosen[n]]
                };
                for h in hops {
                    let relay = setup.relays[setup.node_paths[n][h]];
                    net.transmit_at(now, setup.senders[n], relay, sc.workload.packet_bytes, (n * 8 + h) as u64)?;
                    heatmap[packet * bins / packets][setup.node_paths[n][h]] += 1;
                }
            }
            net.advance(now);
            let load: Vec<usize> = setup.relays.iter().map(|r| net.load(*r)).collect();
            net.run_until_idle();
            let mut per_node = vec![0.0; senders];
            // The baseline learns from what the hop would give without contention.
            let mut blind = vec![0.0; senders];
            let done = net.drain_completed();
            metrics.flow_latency_us += super::workload::delivered_latency_us(&done);
            for rec in done {
                let (n, h) = ((rec.tag / 8) as usize, (rec.tag % 8) as usize);
                let p = setup.node_paths[n][h];
                latency_sum += rec.latency_ms();
                latency_n += 1;
                match sc.reward.mode {
                    RewardMode::Congestion => {
                        if reward_rng.random::<f64>() < model.rewards.theta[p] {
                            per_node[n] += model.rewards.factor(p, load[p]);
                            blind[n] += model.rewards.factor(p, 1);
                        }
                    }
                    RewardMode::Latency => {
                        per_node[n] += normalizer.reward(rec.latency_ms());
                        let alone = net.propagation_ms(rec.src, rec.dst)
                            + (rec.bytes * 8) as f64 / net.bandwidth(rec.dst).unwrap_or(1.0) / 1000.0;
                        blind[n] += crate::netsim::reward_from_latency(alone, normalizer.l_max()).0;
                    }
                }
            }
            for n in 0..senders {
                let r = if multicast {
                    spaces[n].normalize(per_node[n])
                } else {
                    per_node[n].clamp(0.0, 1.0)
                };
                ep_reward[n] += r;
                ep_count[n] += 1;
                reward_total += r;
                reward_count += 1;
                match &mut players {
                    Players::Learners(ls) => ls[n].observe(chosen[n], r)?,
                    Players::Bandits(bs) => bs[n].observe(chosen[n], blind[n].clamp(0.0, 1.0)),
                    Players::Fixed(_) => {}
                }
            }
        }
        if let Players::Learners(ls) = &mut players {
            for (n, l) in ls.iter_mut().enumerate() {
                if (e + 1) % periods[n] == 0 {
                    l.end_episode(&game_cfg)?;
                } else {
                    l.skip_episode();
                }
            }
        }
        normalizer.roll();
        for n in 0..senders {
            metrics.policies.push(PolicyRow {
                episode: e,
                node: setup.senders[n],
                policy: joint[n].as_slice().to_vec(),
                chosen: chosen[n],
                mean_reward: ep_reward[n] / ep_count[n].max(1) as f64,
            });
        }
        metrics.latency_ms.push(if latency_n == 0 { 0.0 } else { latency_sum / latency_n as f64 });
    }
    metrics.heatmap = heatmap;
    metrics.mean_reward = if reward_count == 0 { 0.0 } else { reward_total / reward_count as f64 };
    metrics.clip_fraction = normalizer.clip_fraction();
    Ok(metrics)
}

/// Recomputes the regret series of a recorded policy history.
pub fn regret_from_history(
    sc: &Scenario,
    setup: &GameSetup,
    rows: &[PolicyRow],
) -> Result<Vec<RegretRow>, HarnessError> {
    let cands = setup.candidates(sc)?;
    let index: BTreeMap<NodeId, usize> = setup.senders.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let mut by_episode: BTreeMap<usize, Vec<Option<Policy>>> = BTreeMap::new();
    for r in rows {
        let i = *index
            .get(&r.node)
            .ok_or_else(|| HarnessError::Parse(format!("history names unknown sender {}", r.node)))?;
        let slot = by_episode.entry(r.episode).or_insert_with(|| vec![None; setup.senders.len()]);
        slot[i] = Some(Policy::new(r.policy.clone())?);
    }
    let mut out = Vec::new();
    let mut cumulative = 0.0;
    for (k, (e, joint)) in by_episode.into_iter().enumerate() {
        let joint: Vec<Policy> = joint
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.ok_or_else(|| HarnessError::Parse(format!("episode {e} lacks sender {}", setup.senders[i]))))
            .collect::<Result<_, _>>()?;
        let r = setup.model(setup.epoch(e))?.regret(&joint, &cands)?;
        cumulative += r;
        out.push(RegretRow {
            episode: e,
            instantaneous: r,
            cumulative,
            average: cumulative / (k + 1) as f64,
        });
    }
    Ok(out)
}
