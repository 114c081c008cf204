#![allow(dead_code)]

use std::sync::Arc;

use edgeforest::forest::Forest;
use edgeforest::idspace::{closer_to, NodeId};
use edgeforest::overlay::{Overlay, OverlayConfig, Proximity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic pseudo-RTT in 1..=97 ms.
pub fn proximity() -> Arc<dyn Proximity> {
    Arc::new(|a: NodeId, b: NodeId| ((a.0 ^ b.0) % 97) as f64 + 1.0)
}

pub fn random_ids(n: usize, seed: u64) -> Vec<NodeId> {
    let mut r = rng(seed);
    (0..n).map(|_| NodeId(r.random())).collect()
}

pub fn random_overlay(n: usize, cfg: OverlayConfig, seed: u64) -> Overlay {
    Overlay::build(cfg, random_ids(n, seed), proximity()).unwrap()
}

pub fn random_forest(n: usize, cfg: OverlayConfig, seed: u64) -> Forest {
    Forest::new(random_overlay(n, cfg, seed))
}

pub fn brute_closest(overlay: &Overlay, key: u128) -> NodeId {
    overlay.live_nodes().min_by(|a, b| closer_to(key, a.0, b.0)).unwrap()
}

/// `⌈log_{2^b} n⌉`, exact for the small integers used here.
pub fn ceil_log(n: usize, b: u32) -> usize {
    let base = 1usize << b;
    let mut k = 0;
    let mut p = 1usize;
    while p < n {
        p *= base;
        k += 1;
    }
    k
}

/// Ordinary least squares over a design matrix with one row per
/// observation. Returns the coefficients, R² and the residual variance.
pub fn least_squares(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64, f64) {
    let k = x[0].len();
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    for (row, &yi) in x.iter().zip(y) {
        for i in 0..k {
            xty[i] += row[i] * yi;
            for j in 0..k {
                xtx[i][j] += row[i] * row[j];
            }
        }
    }
    let beta = edgeforest::game::solve(&xtx, &xty).expect("design matrix has full rank");
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (row, &yi) in x.iter().zip(y) {
        let fit: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
        ss_res += (yi - fit).powi(2);
        ss_tot += (yi - mean).powi(2);
    }
    let dof = (y.len() - k).max(1) as f64;
    (beta, 1.0 - ss_res / ss_tot, ss_res / dof)
}
