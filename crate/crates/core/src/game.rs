//! Congestion-game next-hop selection with bandit feedback.
//!
//! Each sender keeps a mixed policy over its candidate next hops. Once per
//! episode it draws `τ` hops, observes only its own rewards, estimates the
//! reward gradient by importance weighting, and moves its policy toward the
//! best admissible candidate (a Frank-Wolfe step) while mixing in an
//! exploratory candidate chosen from the policy correlation matrix.
//!
//! The module also holds the comparison baselines (congestion-blind
//! ε-greedy and a centralized optimum) and the Nash-regret oracle, which
//! needs the true reward model and is therefore harness-only.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum pivot magnitude accepted by Gaussian elimination.
pub const PIVOT_EPS: f64 = 1e-12;
/// Default floor on every entry of an admissible policy.
pub const POLICY_FLOOR: f64 = 1e-3;
/// Largest hop count the multicast lifting accepts.
pub const MAX_MULTICAST_HOPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GameError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("ill-conditioned: {0}")]
    Conditioning(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("multicast lifting supports at most {MAX_MULTICAST_HOPS} hops, got {0}")]
    UnsupportedSize(usize),
    #[error("reward model unavailable: regret needs the true model")]
    OracleUnavailable,
}

pub type Matrix = Vec<Vec<f64>>;

/// Probability vector over a node's candidate hops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy(Vec<f64>);

impl Policy {
    pub fn new(p: Vec<f64>) -> Result<Self, GameError> {
        if p.is_empty() {
            return Err(GameError::Schema("empty policy".into()));
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0 + 1e-12) {
            return Err(GameError::Schema(format!("policy entries must lie in [0, 1]: {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(GameError::Schema(format!("policy sums to {s}, not 1")));
        }
        Ok(Self(p))
    }

    pub fn uniform(d: usize) -> Self {
        Self(vec![1.0 / d as f64; d])
    }

    /// All mass on hop `i`.
    pub fn pure(d: usize, i: usize) -> Self {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min_entry(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        self.0.iter().zip(v).map(|(a, b)| a * b).sum()
    }
}

/// The finite admissible set Δ(Pₙ) for one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    policies: Vec<Policy>,
    floor: f64,
}

impl CandidateSet {
    pub fn new(policies: Vec<Policy>, floor: f64) -> Result<Self, GameError> {
        let Some(first) = policies.first() else {
            return Err(GameError::Schema("candidate set is empty".into()));
        };
        let d = first.len();
        for p in &policies {
            if p.len() != d {
                return Err(GameError::Schema("candidate policies differ in length".into()));
            }
            if p.min_entry() < floor {
                return Err(GameError::Schema(format!(
                    "candidate {:?} has an entry below the floor {floor}",
                    p.as_slice()
                )));
            }
        }
        Ok(Self { policies, floor })
    }

    /// Grid of resolution `1/g` over the simplex, mapped affinely so every
    /// entry is at least `floor`, plus the uniform policy.
    pub fn simplex_grid(d: usize, g: usize, floor: f64) -> Result<Self, GameError> {
        if d == 0 || g == 0 {
            return Err(GameError::Config("grid needs d >= 1 and g >= 1".into()));
        }
        if floor * d as f64 >= 1.0 {
            return Err(GameError::Config(format!("floor {floor} too large for {d} hops")));
        }
        let scale = 1.0 - floor * d as f64;
        let mut out = Vec::new();
        let mut comp = vec![0usize; d];
        fn rec(i: usize, left: usize, comp: &mut Vec<usize>, g: usize, f: &mut dyn FnMut(&[usize])) {
            if i + 1 == comp.len() {
                comp[i] = left;
                f(comp);
                return;
            }
            for c in (0..=left).rev() {
                comp[i] = c;
                rec(i + 1, left - c, comp, g, f);
            }
        }
        rec(0, g, &mut comp, g, &mut |c| {
            out.push(Policy(
                c.iter().map(|&k| floor + scale * k as f64 / g as f64).collect(),
            ));
        });
        let uni = Policy::uniform(d);
        let has_uniform = out
            .iter()
            .any(|p| p.0.iter().zip(&uni.0).all(|(a, b)| (a - b).abs() < 1e-15));
        if !has_uniform {
            out.push(uni);
        }
        Self::new(out, floor)
    }

    pub fn policies(&self) -> &[Policy] {
        &self.policies
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.policies[0].len()
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }
}

/// Selection rule for the exploratory candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationRule {
    /// Smallest determinant of the correlation matrix.
    #[default]
    MinDet,
    /// Largest determinant, the usual optimal-design choice.
    MaxDet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GameConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: usize,
    /// Tolerance for reporting an approximate equilibrium.
    pub epsilon: f64,
    pub exploration: ExplorationRule,
    /// Entries of the current policy below this are rejected by the estimator.
    pub policy_floor: f64,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            tau: 10,
            epsilon: 0.01,
            exploration: ExplorationRule::MinDet,
            policy_floor: POLICY_FLOOR,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), GameError> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(GameError::Config(format!(
                "alpha and beta must lie in [0, 1], got {} and {}",
                self.alpha, self.beta
            )));
        }
        if self.tau == 0 {
            return Err(GameError::Config("tau must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.policy_floor) {
            return Err(GameError::Config("policy floor must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Parameter schedule from the regret analysis: `1 - α = 1/(N K)`,
    /// `β = 1/(N √K)`, `τ = K²` for `N` nodes and `K` episodes.
    pub fn theory(nodes: usize, episodes: usize) -> Self {
        let n = nodes.max(1) as f64;
        let k = episodes.max(1) as f64;
        Self {
            alpha: 1.0 - 1.0 / (n * k),
            beta: 1.0 / (n * k.sqrt()),
            tau: episodes.max(1).pow(2),
            ..Self::default()
        }
    }
}

/// One observed reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSample {
    pub hop: usize,
    pub reward: f64,
    pub t: usize,
    pub episode: u64,
}

/// How a path's mean reward falls with the number of concurrent users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Congestion {
    /// `min(1, B_p / (k · rate_max))`: bandwidth shared among `k` users.
    Capacity { bandwidth: Vec<f64>, rate_max: f64 },
    /// `1 / k`.
    Inverse,
}

/// Per-path success rates plus the congestion curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub theta: Vec<f64>,
    pub congestion: Congestion,
}

impl RewardModel {
    pub fn new(theta: Vec<f64>, congestion: Congestion) -> Result<Self, GameError> {
        if theta.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(GameError::Config("success rates must lie in [0, 1]".into()));
        }
        if let Congestion::Capacity { bandwidth, rate_max } = &congestion {
            if bandwidth.len() != theta.len() {
                return Err(GameError::Schema("one bandwidth per path is required".into()));
            }
            if *rate_max <= 0.0 || bandwidth.iter().any(|b| *b <= 0.0) {
                return Err(GameError::Config("bandwidths and rate_max must be positive".into()));
            }
        }
        Ok(Self { theta, congestion })
    }

    pub fn paths(&self) -> usize {
        self.theta.len()
    }

    /// Congestion factor in `[0, 1]` for `k >= 1` users.
    pub fn factor(&self, p: usize, k: usize) -> f64 {
        let k = k.max(1) as f64;
        match &self.congestion {
            Congestion::Capacity { bandwidth, rate_max } => (bandwidth[p] / (k * rate_max)).min(1.0),
            Congestion::Inverse => 1.0 / k,
        }
    }

    /// Mean reward `r^p(k, θ_p)`.
    pub fn mean(&self, p: usize, k: usize) -> f64 {
        self.theta[p] * self.factor(p, k)
    }

    /// Bernoulli(θ_p) success scaled by the congestion factor.
    pub fn sample<R: Rng + ?Sized>(&self, p: usize, k: usize, rng: &mut R) -> f64 {
        if rng.random::<f64>() < self.theta[p] {
            self.factor(p, k)
        } else {
            0.0
        }
    }
}

/// `M(λ) = Σ_p λ(p) ψ(p) ψ(p)ᵀ` for arbitrary feature vectors.
pub fn correlation_matrix_features(lambda: &Policy, features: &[Vec<f64>]) -> Result<Matrix, GameError> {
    if features.len() != lambda.len() {
        return Err(GameError::Schema("one feature vector per action is required".into()));
    }
    let dim = features.first().map_or(0, Vec::len);
    let mut m = vec![vec![0.0; dim]; dim];
    for (w, psi) in lambda.as_slice().iter().zip(features) {
        if psi.len() != dim {
            return Err(GameError::Schema("feature vectors differ in length".into()));
        }
        for i in 0..dim {
            for j in 0..dim {
                m[i][j] += w * psi[i] * psi[j];
            }
        }
    }
    Ok(m)
}

/// One-hot features make the correlation matrix `diag(λ)`.
pub fn correlation_matrix(lambda: &Policy) -> Matrix {
    correlation_matrix_features(lambda, &one_hot(lambda.len())).expect("one-hot features match")
}

pub fn one_hot(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| {
            let mut v = vec![0.0; d];
            v[i] = 1.0;
            v
        })
        .collect()
}

/// Row-reduces `a` with partial pivoting; returns the determinant and
/// applies the same operations to the columns of `rhs`.
fn eliminate(mut a: Matrix, mut rhs: Matrix) -> Result<(f64, Matrix), GameError> {
    let n = a.len();
    if a.iter().any(|r| r.len() != n) {
        return Err(GameError::Schema("matrix is not square".into()));
    }
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[piv][col].abs() < PIVOT_EPS {
            return Err(GameError::Conditioning(format!(
                "pivot {:.3e} in column {col} below {PIVOT_EPS:e}",
                a[piv][col]
            )));
        }
        if piv != col {
            a.swap(piv, col);
            rhs.swap(piv, col);
            det = -det;
        }
        let p = a[col][col];
        det *= p;
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = a[row][col] / p;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            for k in 0..rhs[row].len() {
                rhs[row][k] -= f * rhs[col][k];
            }
        }
    }
    for row in 0..n {
        let p = a[row][row];
        for v in rhs[row].iter_mut() {
            *v /= p;
        }
    }
    Ok((det, rhs))
}

/// Determinant by Gaussian elimination; a vanishing pivot means zero.
pub fn determinant(m: &Matrix) -> f64 {
    match eliminate(m.clone(), vec![Vec::new(); m.len()]) {
        Ok((d, _)) => d,
        Err(_) => 0.0,
    }
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(m: &Matrix) -> Result<Matrix, GameError> {
    let n = m.len();
    let id: Matrix = one_hot(n);
    eliminate(m.clone(), id).map(|(_, inv)| inv)
}

/// Solves `m x = b`.
pub fn solve(m: &Matrix, b: &[f64]) -> Result<Vec<f64>, GameError> {
    let rhs = b.iter().map(|v| vec![*v]).collect();
    eliminate(m.clone(), rhs).map(|(_, x)| x.into_iter().map(|r| r[0]).collect())
}

/// Determinant of `M(λ)` under one-hot features: `Π λ(p)`.
pub fn correlation_det(lambda: &Policy) -> f64 {
    lambda.as_slice().iter().product()
}

fn pick_first<F: Fn(&Policy) -> f64>(cands: &CandidateSet, score: F, better: fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    let mut best_score = score(&cands.policies[0]);
    for (i, p) in cands.policies.iter().enumerate().skip(1) {
        let s = score(p);
        if better(s, best_score) {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Index of the exploratory candidate ρ; ties go to the first candidate.
pub fn exploratory_index(cands: &CandidateSet, rule: ExplorationRule) -> usize {
    match rule {
        ExplorationRule::MinDet => pick_first(cands, correlation_det, |a, b| a < b),
        ExplorationRule::MaxDet => pick_first(cands, correlation_det, |a, b| a > b),
    }
}

pub fn exploratory_policy(cands: &CandidateSet, rule: ExplorationRule) -> &Policy {
    &cands.policies[exploratory_index(cands, rule)]
}

/// Same choice through the dense matrix and elimination-based determinant.
pub fn exploratory_policy_general<'a>(
    cands: &'a CandidateSet,
    features: &[Vec<f64>],
    rule: ExplorationRule,
) -> Result<&'a Policy, GameError> {
    let mut dets = Vec::with_capacity(cands.len());
    for p in &cands.policies {
        dets.push(determinant(&correlation_matrix_features(p, features)?));
    }
    let mut best = 0;
    for i in 1..dets.len() {
        let better = match rule {
            ExplorationRule::MinDet => dets[i] < dets[best],
            ExplorationRule::MaxDet => dets[i] > dets[best],
        };
        if better {
            best = i;
        }
    }
    Ok(&cands.policies[best])
}

fn check_samples(pi: &Policy, samples: &[RewardSample], tau: usize, floor: f64) -> Result<(), GameError> {
    if tau == 0 {
        return Err(GameError::Config("tau must be at least 1".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.hop >= pi.len()) {
        return Err(GameError::Schema(format!("sample hop {} outside a {}-hop policy", s.hop, pi.len())));
    }
    if pi.min_entry() < floor.max(f64::MIN_POSITIVE) {
        return Err(GameError::Conditioning(format!(
            "policy entry {} below the floor {floor}; floor and renormalize first",
            pi.min_entry()
        )));
    }
    Ok(())
}

/// Importance-weighted gradient: `ĝ(p) = (1/τ) Σ_{t: hop=p} r_t / π(p)`.
pub fn estimate_gradient(pi: &Policy, samples: &[RewardSample], tau: usize, floor: f64) -> Result<Vec<f64>, GameError> {
    check_samples(pi, samples, tau, floor)?;
    let mut g = vec![0.0; pi.len()];
    for s in samples {
        g[s.hop] += s.reward / pi.0[s.hop];
    }
    for v in &mut g {
        *v /= tau as f64;
    }
    Ok(g)
}

/// The same estimator through `M(π)⁻¹`:
/// `ĝ(p) = (1/τ) Σ_t ψ(p)ᵀ M(π)⁻¹ ψ(p_t) r_t`.
pub fn estimate_gradient_general(
    pi: &Policy,
    samples: &[RewardSample],
    tau: usize,
    floor: f64,
    features: &[Vec<f64>],
) -> Result<Vec<f64>, GameError> {
    check_samples(pi, samples, tau, floor)?;
    let m = correlation_matrix_features(pi, features)?;
    let dim = m.len();
    let mut acc = vec![0.0; dim];
    for s in samples {
        for (a, f) in acc.iter_mut().zip(&features[s.hop]) {
            *a += f * s.reward;
        }
    }
    let theta = solve(&m, &acc)?;
    Ok(features
        .iter()
        .map(|psi| psi.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>() / tau as f64)
        .collect())
}

/// Index of `argmax ⟨λ, g⟩`; ties go to the first candidate.
pub fn best_candidate_index(gradient: &[f64], cands: &CandidateSet) -> Result<usize, GameError> {
    if gradient.len() != cands.dim() {
        return Err(GameError::Schema(format!(
            "gradient length {} != policy length {}",
            gradient.len(),
            cands.dim()
        )));
    }
    Ok(pick_first(cands, |p| p.dot(gradient), |a, b| a > b))
}

pub fn best_candidate_policy<'a>(gradient: &[f64], cands: &'a CandidateSet) -> Result<&'a Policy, GameError> {
    best_candidate_index(gradient, cands).map(|i| &cands.policies[i])
}

/// `α [π + β (π̃ − π)] + (1 − α) ρ`.
pub fn update_policy(pi: &Policy, tilde: &Policy, rho: &Policy, alpha: f64, beta: f64) -> Result<Policy, GameError> {
    if pi.len() != tilde.len() || pi.len() != rho.len() {
        return Err(GameError::Schema("policies differ in length".into()));
    }
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
        return Err(GameError::Config("alpha and beta must lie in [0, 1]".into()));
    }
    let v = pi
        .0
        .iter()
        .zip(&tilde.0)
        .zip(&rho.0)
        .map(|((p, t), r)| alpha * (p + beta * (t - p)) + (1.0 - alpha) * r)
        .collect();
    Policy::new(v)
}

/// Categorical draw from `π`.
pub fn select_hop<R: Rng + ?Sized>(pi: &Policy, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in pi.0.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the total: take the last hop with mass.
    pi.0.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Everything one episode produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub next: Policy,
    /// Index of π̃ in the candidate set, `None` for a partial episode.
    pub tilde: Option<usize>,
    pub rho: Option<usize>,
    pub gradient: Vec<f64>,
    pub mean_reward: f64,
    pub samples: usize,
    pub partial: bool,
}

/// Per-node learner state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub policy: Policy,
    pub candidates: CandidateSet,
    samples: Vec<RewardSample>,
    episode: u64,
}

impl Learner {
    pub fn new(candidates: CandidateSet) -> Self {
        let d = candidates.dim();
        Self::with_policy(Policy::uniform(d), candidates)
    }

    pub fn with_policy(policy: Policy, candidates: CandidateSet) -> Self {
        Self {
            policy,
            candidates,
            samples: Vec::new(),
            episode: 0,
        }
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn pending(&self) -> &[RewardSample] {
        &self.samples
    }

    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        select_hop(&self.policy, rng)
    }

    pub fn observe(&mut self, hop: usize, reward: f64) -> Result<(), GameError> {
        if hop >= self.policy.len() {
            return Err(GameError::Schema(format!("hop {hop} out of range")));
        }
        if !(0.0..=1.0).contains(&reward) {
            return Err(GameError::Schema(format!("reward {reward} outside [0, 1]")));
        }
        let t = self.samples.len();
        self.samples.push(RewardSample {
            hop,
            reward,
            t,
            episode: self.episode,
        });
        Ok(())
    }

    /// Closes an episode without updating, for nodes whose update period has
    /// not elapsed. Pending samples are dropped.
    pub fn skip_episode(&mut self) {
        self.samples.clear();
        self.episode += 1;
    }

    /// Exploration, gradient estimate, best candidate and the mixed update.
    /// With fewer than `τ` samples the policy is carried over unchanged.
    pub fn end_episode(&mut self, cfg: &GameConfig) -> Result<EpisodeOutcome, GameError> {
        cfg.validate()?;
        let samples = std::mem::take(&mut self.samples);
        self.episode += 1;
        let mean_reward = if samples.is_empty() {
            0.0
        } else {
            samples.iter().map(|s| s.reward).sum::<f64>() / samples.len() as f64
        };
        if samples.len() < cfg.tau {
            return Ok(EpisodeOutcome {
                next: self.policy.clone(),
                tilde: None,
                rho: None,
                gradient: vec![0.0; self.policy.len()],
                mean_reward,
                samples: samples.len(),
                partial: true,
            });
        }
        let used = &samples[..cfg.tau];
        let rho = exploratory_index(&self.candidates, cfg.exploration);
        let gradient = estimate_gradient(&self.policy, used, cfg.tau, cfg.policy_floor)?;
        let tilde = best_candidate_index(&gradient, &self.candidates)?;
        let next = update_policy(
            &self.policy,
            &self.candidates.policies[tilde],
            &self.candidates.policies[rho],
            cfg.alpha,
            cfg.beta,
        )?;
        self.policy = next.clone();
        Ok(EpisodeOutcome {
            next,
            tilde: Some(tilde),
            rho: Some(rho),
            gradient,
            mean_reward,
            samples: used.len(),
            partial: false,
        })
    }
}

/// Runs one episode of a single node against an environment that returns
/// the reward of the chosen hop, or `None` if the node dropped out.
pub fn run_episode<R: Rng + ?Sized>(
    learner: &mut Learner,
    cfg: &GameConfig,
    rng: &mut R,
    env: &mut dyn FnMut(usize, usize) -> Option<f64>,
) -> Result<EpisodeOutcome, GameError> {
    for t in 0..cfg.tau {
        let hop = learner.choose(rng);
        match env(hop, t) {
            Some(r) => learner.observe(hop, r)?,
            None => break,
        }
    }
    learner.end_episode(cfg)
}

/// Congestion game: a shared reward model over global paths and, for each
/// node, the global path behind each of its local hops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameModel {
    pub rewards: RewardModel,
    pub node_paths: Vec<Vec<usize>>,
}

impl GameModel {
    pub fn new(rewards: RewardModel, node_paths: Vec<Vec<usize>>) -> Result<Self, GameError> {
        for (n, ps) in node_paths.iter().enumerate() {
            if ps.is_empty() {
                return Err(GameError::Schema(format!("node {n} has no candidate hop")));
            }
            if ps.iter().any(|&p| p >= rewards.paths()) {
                return Err(GameError::Schema(format!("node {n} references an unknown path")));
            }
            let mut s = ps.clone();
            s.sort_unstable();
            s.dedup();
            if s.len() != ps.len() {
                return Err(GameError::Schema(format!("node {n} lists a path twice")));
            }
        }
        Ok(Self { rewards, node_paths })
    }

    pub fn nodes(&self) -> usize {
        self.node_paths.len()
    }

    /// Probability that node `m` uses global path `p` under `policy`.
    fn usage(&self, m: usize, p: usize, policy: &Policy) -> f64 {
        self.node_paths[m]
            .iter()
            .position(|&q| q == p)
            .map_or(0.0, |i| policy.0[i])
    }

    /// `q_n(a) = E[r^p(1 + X)]` for every local hop `a` of node `n`, where
    /// `X` counts the other nodes on the same path (Poisson-binomial,
    /// computed exactly).
    pub fn hop_values(&self, n: usize, joint: &[Policy]) -> Vec<f64> {
        self.node_paths[n]
            .iter()
            .map(|&p| {
                let mut dist = vec![1.0];
                for (m, pol) in joint.iter().enumerate() {
                    if m == n {
                        continue;
                    }
                    let u = self.usage(m, p, pol);
                    if u == 0.0 {
                        continue;
                    }
                    let mut next = vec![0.0; dist.len() + 1];
                    for (k, w) in dist.iter().enumerate() {
                        next[k] += w * (1.0 - u);
                        next[k + 1] += w * u;
                    }
                    dist = next;
                }
                dist.iter()
                    .enumerate()
                    .map(|(k, w)| w * self.rewards.mean(p, k + 1))
                    .sum()
            })
            .collect()
    }

    /// `V_n(π)`: node `n`'s expected per-packet reward.
    pub fn value(&self, n: usize, joint: &[Policy]) -> f64 {
        joint[n].dot(&self.hop_values(n, joint))
    }

    fn check_joint(&self, joint: &[Policy]) -> Result<(), GameError> {
        if joint.len() != self.nodes() {
            return Err(GameError::Schema(format!("{} policies for {} nodes", joint.len(), self.nodes())));
        }
        for (n, p) in joint.iter().enumerate() {
            if p.len() != self.node_paths[n].len() {
                return Err(GameError::Schema(format!("node {n}: policy length mismatch")));
            }
        }
        Ok(())
    }

    /// Best response of node `n` within its candidate set: (index, value).
    pub fn best_response(&self, n: usize, joint: &[Policy], cands: &CandidateSet) -> (usize, f64) {
        let q = self.hop_values(n, joint);
        let i = pick_first(cands, |p| p.dot(&q), |a, b| a > b);
        (i, cands.policies[i].dot(&q))
    }

    /// Instantaneous Nash regret: the largest gain any single node gets by
    /// switching to its best admissible candidate.
    pub fn regret(&self, joint: &[Policy], cands: &[CandidateSet]) -> Result<f64, GameError> {
        self.check_joint(joint)?;
        if cands.len() != self.nodes() {
            return Err(GameError::Schema("one candidate set per node is required".into()));
        }
        let mut worst = 0.0f64;
        for n in 0..self.nodes() {
            let q = self.hop_values(n, joint);
            let v = joint[n].dot(&q);
            let best = cands[n].policies.iter().map(|p| p.dot(&q)).fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max(best - v);
        }
        Ok(worst)
    }

    /// Monte Carlo estimate of `V_n` with its standard error.
    pub fn value_monte_carlo<R: Rng + ?Sized>(&self, n: usize, joint: &[Policy], draws: usize, rng: &mut R) -> (f64, f64) {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut counts = vec![0usize; self.rewards.paths()];
        for _ in 0..draws {
            counts.iter_mut().for_each(|c| *c = 0);
            let mut mine = 0;
            for (m, pol) in joint.iter().enumerate() {
                let p = self.node_paths[m][select_hop(pol, rng)];
                counts[p] += 1;
                if m == n {
                    mine = p;
                }
            }
            let r = self.rewards.mean(mine, counts[mine]);
            sum += r;
            sq += r * r;
        }
        let d = draws as f64;
        let mean = sum / d;
        let var = (sq / d - mean * mean).max(0.0);
        (mean, (var / d).sqrt())
    }
}

/// Cumulative Nash-regret series over a history of joint policies.
pub fn nash_regret(
    history: &[Vec<Policy>],
    model: Option<&GameModel>,
    cands: &[CandidateSet],
) -> Result<Vec<f64>, GameError> {
    let model = model.ok_or(GameError::OracleUnavailable)?;
    let mut cum = 0.0;
    history
        .iter()
        .map(|joint| {
            cum += model.regret(joint, cands)?;
            Ok(cum)
        })
        .collect()
}

/// Congestion-blind ε-greedy baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditLearner {
    pub counts: Vec<u64>,
    pub sums: Vec<f64>,
    pub epsilon: f64,
}

impl BanditLearner {
    pub fn new(hops: usize, epsilon: f64) -> Self {
        Self {
            counts: vec![0; hops],
            sums: vec![0.0; hops],
            epsilon,
        }
    }

    pub fn observe(&mut self, hop: usize, reward: f64) {
        self.counts[hop] += 1;
        self.sums[hop] += reward;
    }

    /// Exploration rate at episode `k` (1-based): `ε / √k`.
    pub fn epsilon_at(&self, k: u64) -> f64 {
        self.epsilon / (k.max(1) as f64).sqrt()
    }

    /// Hop with the best empirical mean; ties go to the lowest index.
    pub fn greedy(&self) -> usize {
        bandit_baseline_step(&self.counts, &self.sums)
    }

    /// Round-robin until every hop has a sample, then ε-greedy.
    pub fn choose<R: Rng + ?Sized>(&self, k: u64, rng: &mut R) -> usize {
        if let Some(h) = self.counts.iter().position(|&c| c == 0) {
            return h;
        }
        if rng.random::<f64>() < self.epsilon_at(k) {
            rng.random_range(0..self.counts.len())
        } else {
            self.greedy()
        }
    }

    /// The mixed policy the chooser follows at episode `k`.
    pub fn policy(&self, k: u64) -> Policy {
        let d = self.counts.len();
        if let Some(h) = self.counts.iter().position(|&c| c == 0) {
            return Policy::pure(d, h);
        }
        let e = self.epsilon_at(k);
        let mut v = vec![e / d as f64; d];
        v[self.greedy()] += 1.0 - e;
        Policy(v)
    }
}

/// Greedy hop from per-hop sample counts and reward sums.
pub fn bandit_baseline_step(counts: &[u64], sums: &[f64]) -> usize {
    let mut best = 0;
    let mut best_mean = f64::NEG_INFINITY;
    for (i, (&c, &s)) in counts.iter().zip(sums).enumerate() {
        let m = if c == 0 { f64::NEG_INFINITY } else { s / c as f64 };
        if m > best_mean {
            best = i;
            best_mean = m;
        }
    }
    best
}

/// Expected total reward of a deterministic joint assignment.
pub fn assignment_value(model: &GameModel, assignment: &[usize]) -> f64 {
    let mut load = vec![0usize; model.rewards.paths()];
    for (n, &a) in assignment.iter().enumerate() {
        load[model.node_paths[n][a]] += 1;
    }
    load.iter()
        .enumerate()
        .filter(|(_, k)| **k > 0)
        .map(|(p, &k)| k as f64 * model.rewards.mean(p, k))
        .sum()
}

/// Joint action count above which the optimum switches to greedy.
pub const OPT_EXHAUSTIVE_LIMIT: u128 = 10_000;

/// Centralized assignment maximizing total expected reward. Exhaustive when
/// the joint action space is small, otherwise greedy by marginal gain.
pub fn opt_assignment(model: &GameModel) -> Vec<usize> {
    let joint: u128 = model
        .node_paths
        .iter()
        .try_fold(1u128, |acc, p| acc.checked_mul(p.len() as u128).filter(|v| *v <= OPT_EXHAUSTIVE_LIMIT))
        .unwrap_or(u128::MAX);
    if joint <= OPT_EXHAUSTIVE_LIMIT {
        opt_exhaustive(model)
    } else {
        opt_greedy(model)
    }
}

pub fn opt_greedy(model: &GameModel) -> Vec<usize> {
    let mut load = vec![0usize; model.rewards.paths()];
    let mut out = Vec::with_capacity(model.nodes());
    for paths in &model.node_paths {
        let gain = |p: usize, k: usize| {
            (k + 1) as f64 * model.rewards.mean(p, k + 1) - if k == 0 { 0.0 } else { k as f64 * model.rewards.mean(p, k) }
        };
        let mut best = 0;
        for (i, &p) in paths.iter().enumerate().skip(1) {
            if gain(p, load[p]) > gain(paths[best], load[paths[best]]) {
                best = i;
            }
        }
        load[paths[best]] += 1;
        out.push(best);
    }
    out
}

pub fn opt_exhaustive(model: &GameModel) -> Vec<usize> {
    let n = model.nodes();
    let mut cur = vec![0usize; n];
    let mut best = cur.clone();
    let mut best_v = assignment_value(model, &cur);
    loop {
        // Odometer increment, last node fastest.
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            cur[i] += 1;
            if cur[i] < model.node_paths[i].len() {
                break;
            }
            cur[i] = 0;
        }
        let v = assignment_value(model, &cur);
        if v > best_v + 1e-15 {
            best_v = v;
            best = cur.clone();
        }
    }
}

/// Multicast action space: the non-empty subsets of a node's hops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MulticastSpace {
    pub hops: usize,
    /// Bitmask of hops per action; singletons come first in hop order.
    pub actions: Vec<u32>,
}

impl MulticastSpace {
    pub fn new(hops: usize) -> Result<Self, GameError> {
        if hops == 0 || hops > MAX_MULTICAST_HOPS {
            return Err(GameError::UnsupportedSize(hops));
        }
        let mut actions: Vec<u32> = (0..hops).map(|i| 1u32 << i).collect();
        let mut rest: Vec<u32> = (1u32..(1 << hops)).filter(|m| m.count_ones() > 1).collect();
        rest.sort_by_key(|m| (m.count_ones(), *m));
        actions.extend(rest);
        Ok(Self { hops, actions })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn members(&self, action: usize) -> impl Iterator<Item = usize> + '_ {
        let m = self.actions[action];
        (0..self.hops).filter(move |i| m & (1 << i) != 0)
    }

    /// Reward of a subset action normalized by `F = hops` into `[0, 1]`.
    pub fn normalize(&self, total: f64) -> f64 {
        (total / self.hops as f64).clamp(0.0, 1.0)
    }
}

/// Lifts a candidate set over hops to one over non-empty hop subsets.
/// Original candidates embed onto the singleton actions; when
/// `singletons_only` is false they are mixed with a little uniform mass and
/// a near-vertex candidate is added for every multi-hop subset.
pub fn lift_to_multicast(
    cands: &CandidateSet,
    singletons_only: bool,
) -> Result<(MulticastSpace, CandidateSet), GameError> {
    let hops = cands.dim();
    let full = MulticastSpace::new(hops)?;
    if singletons_only {
        let space = MulticastSpace {
            hops,
            actions: full.actions[..hops].to_vec(),
        };
        return Ok((space, cands.clone()));
    }
    let d = full.len();
    let floor = cands.floor().max(POLICY_FLOOR);
    let eta = floor * d as f64;
    let mut out = Vec::new();
    for p in cands.policies() {
        let mut v = vec![eta / d as f64; d];
        for (i, x) in p.as_slice().iter().enumerate() {
            v[i] += (1.0 - eta) * x;
        }
        out.push(Policy::new(v)?);
    }
    for a in hops..d {
        let mut v = vec![floor; d];
        v[a] = 1.0 - floor * (d - 1) as f64;
        out.push(Policy::new(v)?);
    }
    Ok((full, CandidateSet::new(out, floor)?))
}
