//! Browser bindings: one learning episode, one overlay route and a tree
//! depth table. Every export returns a JSON string.

use std::sync::Arc;

use edgeforest::forest::{Forest, TreeConfig, TreeScope};
use edgeforest::game::{
    correlation_det, CandidateSet, GameConfig, Learner, Policy, POLICY_FLOOR,
};
use edgeforest::idspace::{app_id, make_node_id, NodeId, ZoneConfig};
use edgeforest::overlay::{Overlay, OverlayConfig, Proximity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn error(msg: impl std::fmt::Display) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

/// Parses `"0.6 0.4; 0.5 0.5"` into policies.
fn parse_candidates(text: &str) -> Result<CandidateSet, String> {
    let mut out = Vec::new();
    for row in text.split(';').filter(|r| !r.trim().is_empty()) {
        let v: Vec<f64> = row
            .split_whitespace()
            .map(|x| x.parse::<f64>().map_err(|_| format!("not a number: {x}")))
            .collect::<Result<_, _>>()?;
        out.push(Policy::new(v).map_err(|e| e.to_string())?);
    }
    CandidateSet::new(out, POLICY_FLOOR).map_err(|e| e.to_string())
}

/// One episode from the uniform policy: each entry of `rewards` is one
/// packet sent over the matching hop, so `tau` equals the hop count.
#[wasm_bindgen]
pub fn explore_episode(candidates: &str, rewards: &str, alpha: f64, beta: f64) -> String {
    let run = || -> Result<Value, String> {
        let cands = parse_candidates(candidates)?;
        let r: Vec<f64> = rewards
            .split_whitespace()
            .map(|x| x.parse::<f64>().map_err(|_| format!("not a number: {x}")))
            .collect::<Result<_, _>>()?;
        if r.len() != cands.dim() {
            return Err(format!("{} rewards for {} hops", r.len(), cands.dim()));
        }
        let cfg = GameConfig {
            alpha,
            beta,
            tau: r.len(),
            ..GameConfig::default()
        };
        let mut l = Learner::new(cands.clone());
        for (hop, &x) in r.iter().enumerate() {
            l.observe(hop, x).map_err(|e| e.to_string())?;
        }
        let out = l.end_episode(&cfg).map_err(|e| e.to_string())?;
        let dets: Vec<f64> = cands.policies().iter().map(correlation_det).collect();
        let ips: Vec<f64> = cands.policies().iter().map(|p| p.dot(&out.gradient)).collect();
        Ok(json!({
            "determinants": dets,
            "gradient": out.gradient,
            "inner_products": ips,
            "rho": out.rho,
            "tilde": out.tilde,
            "next": out.next.as_slice(),
        }))
    };
    run().map_or_else(error, |v| v.to_string())
}

fn single_zone(n: usize, b: u32, seed: u64) -> Result<(Overlay, Vec<NodeId>), String> {
    let cfg = OverlayConfig {
        zone: ZoneConfig::new(1).map_err(|e| e.to_string())?,
        digit_bits: b,
        ..OverlayConfig::default()
    };
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<NodeId> = (0..n)
        .map(|_| make_node_id(0, r.random::<u128>() & cfg.zone.suffix_mask(), &cfg.zone))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let proximity: Arc<dyn Proximity> = Arc::new(|a: NodeId, b: NodeId| ((a.0 ^ b.0) % 97) as f64 + 1.0);
    let ov = Overlay::build(cfg, ids.clone(), proximity).map_err(|e| e.to_string())?;
    Ok((ov, ids))
}

fn ceil_log(n: usize, b: u32) -> usize {
    let mut k = 0;
    let mut p = 1usize;
    while p < n {
        p <<= b;
        k += 1;
    }
    k
}

/// Routes a random key through an `n`-node overlay with `2^b`-ary digits.
#[wasm_bindgen]
pub fn trace_route(n: usize, b: u32, seed: u64) -> String {
    if !(2..=20_000).contains(&n) {
        return error("n must lie in 2..=20000");
    }
    let run = || -> Result<Value, String> {
        let (ov, ids) = single_zone(n, b, seed)?;
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let key = r.random::<u128>() & ov.config().zone.suffix_mask();
        let src = ids[r.random_range(0..n)];
        let path = ov.route(key, src).map_err(|e| e.to_string())?;
        let hops: Vec<Value> = path
            .hops
            .iter()
            .map(|h| json!({ "id": h.to_hex(), "shared_digits": ov.config().shared_digits(h.0, key) }))
            .collect();
        Ok(json!({
            "key": format!("{key:032x}"),
            "hops": hops,
            "hop_count": path.hop_count(),
            "bound": ceil_log(n, b) + 1,
        }))
    };
    run().map_or_else(error, |v| v.to_string())
}

/// Deepest of `trees` full-membership trees for each size in `sizes`.
#[wasm_bindgen]
pub fn depth_table(sizes: &str, b: u32, trees: usize, seed: u64) -> String {
    let run = || -> Result<Value, String> {
        let mut rows = Vec::new();
        for s in sizes.split_whitespace() {
            let n: usize = s.parse().map_err(|_| format!("not a size: {s}"))?;
            if !(2..=4096).contains(&n) {
                return Err("sizes must lie in 2..=4096".into());
            }
            let (ov, ids) = single_zone(n, b, seed.wrapping_add(n as u64))?;
            let mut f = Forest::new(ov);
            let (mut deepest, mut total) = (0, 0);
            for t in 0..trees {
                let app = app_id(&format!("demo-{t}"), &seed.to_be_bytes(), s.as_bytes());
                let cfg = TreeConfig {
                    scope: TreeScope::Zone(0),
                    ..TreeConfig::default()
                };
                f.create_tree(app, "demo", cfg).map_err(|e| e.to_string())?;
                for &id in &ids {
                    f.subscribe(app, id).map_err(|e| e.to_string())?;
                }
                let d = f.remove_tree(app).map(|t| t.max_depth()).unwrap_or(0);
                deepest = deepest.max(d);
                total += d;
            }
            rows.push(json!({
                "n": n,
                "max_depth": deepest,
                "mean_max_depth": total as f64 / trees.max(1) as f64,
                "bound": ceil_log(n, b) + 1,
            }));
        }
        Ok(Value::Array(rows))
    };
    run().map_or_else(error, |v| v.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn worked_episode() {
        let v = parse(&explore_episode("0.6 0.4; 0.5 0.5; 0.3 0.7; 0.1 0.9", "0.4 0.8", 0.5, 0.5));
        let next: Vec<f64> = serde_json::from_value(v["next"].clone()).unwrap();
        assert!((next[0] - 0.2).abs() < 1e-12 && (next[1] - 0.8).abs() < 1e-12);
        assert_eq!(v["rho"], 3);
    }

    #[test]
    fn bad_input_is_reported() {
        assert!(parse(&explore_episode("0.6 0.4", "0.4", 0.5, 0.5))["error"].is_string());
        assert!(parse(&explore_episode("0.6 x", "0.4 0.1", 0.5, 0.5))["error"].is_string());
        assert!(parse(&trace_route(1, 4, 0))["error"].is_string());
    }

    #[test]
    fn route_stays_within_bound() {
        for seed in 0..20 {
            let v = parse(&trace_route(300, 4, seed));
            assert!(v["hop_count"].as_u64().unwrap() <= v["bound"].as_u64().unwrap());
        }
    }

    #[test]
    fn depth_rows() {
        let v = parse(&depth_table("32 256", 4, 5, 1));
        assert_eq!(v.as_array().unwrap().len(), 2);
        assert!(v[1]["max_depth"].as_u64().unwrap() <= v[1]["bound"].as_u64().unwrap());
    }
}
