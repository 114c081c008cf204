//! Edge topologies: a clustered geographic generator or an imported site
//! list, landmark binning into zones and the matching latency model.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scenario::Scenario;
use super::HarnessError;
use crate::idspace::{make_node_id, NodeId, ZoneConfig};
use crate::netsim::ZoneLatency;
use crate::overlay::{bin_node, logical_node_count, multiplex_logical_nodes};

/// Region centre used by the generator.
const REGION: (f64, f64) = (-33.0, 146.0);
/// Fixed RTT floor between any two sites.
const BASE_RTT_MS: f64 = 5.0;
/// Kilometres of great-circle distance per millisecond of RTT, counting
/// both directions and path inflation.
const KM_PER_RTT_MS: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedNode {
    pub id: NodeId,
    pub host: usize,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone)]
pub struct Topology {
    /// Sorted by identifier.
    pub nodes: Vec<PlacedNode>,
    pub host_bandwidth: Vec<f64>,
    pub latency: ZoneLatency,
}

impl Topology {
    pub fn ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    pub fn zones(&self) -> BTreeSet<u32> {
        self.nodes.iter().map(|n| n.id.zone(&self.latency.zone)).collect()
    }
}

pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (la1, lo1, la2, lo2) = (a.0.to_radians(), a.1.to_radians(), b.0.to_radians(), b.1.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().asin()
}

pub fn geo_rtt_ms(a: (f64, f64), b: (f64, f64)) -> f64 {
    BASE_RTT_MS + haversine_km(a, b) / KM_PER_RTT_MS
}

/// Parses `id,lat,lon` lines; a header line and blank lines are skipped.
pub fn import_sites_csv(text: &str) -> Result<Vec<Site>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.to_ascii_lowercase().starts_with("id")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || HarnessError::Parse(format!("site line {}: expected id,lat,lon", i + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        let lat: f64 = f[1].parse().map_err(|_| bad())?;
        let lon: f64 = f[2].parse().map_err(|_| bad())?;
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(bad());
        }
        out.push(Site {
            id: f[0].to_string(),
            lat,
            lon,
        });
    }
    if out.is_empty() {
        return Err(HarnessError::Parse("site list is empty".into()));
    }
    Ok(out)
}

fn host_positions(sc: &Scenario, hosts: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>, HarnessError> {
    let jitter = Normal::new(0.0, 0.05).expect("valid sd");
    if let Some(path) = &sc.zones.sites_csv {
        let text = std::fs::read_to_string(path)?;
        let sites = import_sites_csv(&text)?;
        return Ok((0..hosts)
            .map(|i| {
                let s = &sites[i % sites.len()];
                (s.lat + jitter.sample(rng), s.lon + jitter.sample(rng))
            })
            .collect());
    }
    let s = sc.zones.spread_deg;
    let centres: Vec<(f64, f64)> = (0..sc.zones.clusters)
        .map(|_| {
            (
                REGION.0 + rng.random_range(-s..=s) / 2.0,
                REGION.1 + rng.random_range(-s..=s),
            )
        })
        .collect();
    let spread = Normal::new(0.0, s / 20.0).expect("valid sd");
    Ok((0..hosts)
        .map(|_| {
            let c = centres[rng.random_range(0..centres.len())];
            (c.0 + spread.sample(rng), c.1 + spread.sample(rng))
        })
        .collect())
}

/// Places nodes, bins them by landmark RTT and derives zone-pair RTTs from
/// the mean position of each zone.
pub fn build_topology(sc: &Scenario, rng: &mut ChaCha8Rng) -> Result<Topology, HarnessError> {
    let zone = ZoneConfig::new(sc.zones.m).map_err(|e| HarnessError::schema("zones.m", &e.to_string()))?;
    // Logical nodes per host.
    let mut per_host = Vec::new();
    match &sc.hosts {
        Some(h) => {
            let mut total = 0usize;
            let mut i = 0;
            while total < sc.nodes {
                let cap = h.capacities[i % h.capacities.len()];
                let c = (logical_node_count(cap, h.unit)? as usize).min(sc.nodes - total);
                per_host.push((cap, c));
                total += c;
                i += 1;
            }
        }
        None => per_host.extend(std::iter::repeat_n((1u32, 1usize), sc.nodes)),
    }
    let positions = host_positions(sc, per_host.len(), rng)?;
    let s = sc.zones.spread_deg;
    let landmarks: Vec<(f64, f64)> = (0..sc.zones.landmarks)
        .map(|_| {
            (
                REGION.0 + rng.random_range(-s..=s) / 2.0,
                REGION.1 + rng.random_range(-s..=s),
            )
        })
        .collect();
    let mut nodes = Vec::with_capacity(sc.nodes);
    let mut host_bandwidth = Vec::with_capacity(per_host.len());
    let mut seen = BTreeSet::new();
    for (h, (&(cap, count), &pos)) in per_host.iter().zip(&positions).enumerate() {
        let rtts: Vec<f64> = landmarks.iter().map(|l| geo_rtt_ms(pos, *l)).collect();
        let prefix = bin_node(&rtts, &sc.zones.thresholds_ms)?.zone_prefix(&zone);
        let bw = rng.random_range(sc.reward.bandwidth_min_mbps..=sc.reward.bandwidth_max_mbps);
        let ids: Vec<NodeId> = if sc.hosts.is_some() {
            let unit = sc.hosts.as_ref().expect("checked").unit;
            let key = [sc.seed.to_be_bytes(), (h as u64).to_be_bytes()].concat();
            multiplex_logical_nodes(&key, prefix, cap, unit, &zone)?
                .into_iter()
                .take(count)
                .collect()
        } else {
            vec![make_node_id(prefix as u128, rng.random::<u128>() & zone.suffix_mask(), &zone)
                .expect("masked suffix fits")]
        };
        for id in ids {
            if seen.insert(id) {
                nodes.push(PlacedNode {
                    id,
                    host: h,
                    lat: pos.0,
                    lon: pos.1,
                });
            }
        }
        host_bandwidth.push(bw);
    }
    nodes.sort_by_key(|n| n.id);
    // Zone-pair RTTs from the mean position of each zone.
    let mut sums: BTreeMap<u32, (f64, f64, f64)> = BTreeMap::new();
    for n in &nodes {
        let e = sums.entry(n.id.zone(&zone)).or_default();
        e.0 += n.lat;
        e.1 += n.lon;
        e.2 += 1.0;
    }
    let centres: Vec<(u32, (f64, f64))> = sums.into_iter().map(|(z, (a, b, c))| (z, (a / c, b / c))).collect();
    let mut latency = ZoneLatency::new(sc.seed, zone, sc.zones.diameter_ms);
    for (i, (za, ca)) in centres.iter().enumerate() {
        for (zb, cb) in &centres[i + 1..] {
            latency.zone_rtt_ms.insert((*za.min(zb), *za.max(zb)), geo_rtt_ms(*ca, *cb));
        }
    }
    Ok(Topology {
        nodes,
        host_bandwidth,
        latency,
    })
}
