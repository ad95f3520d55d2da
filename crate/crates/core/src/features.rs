//! Feature matrices and the covariance-domination certificate.
//!
//! `kappa = min_pi lambda_min(Sigma_b - gamma^2 Sigma_pi)` over deterministic
//! policies `pi` lower-bounds the same quantity over every stochastic policy:
//! `Sigma_pi` is affine in each state's action distribution and `lambda_max` is
//! convex, so the worst case sits at a vertex of the policy polytope.

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::mdp::{ChainKernel, Dmdp, Policy};
use crate::parallel::Parallelism;

const ROW_NORM_TOL: f64 = 1e-12;
const RESAMPLE_ATTEMPTS: usize = 10;

/// Largest action-space size for which exact enumeration is allowed.
pub const EXACT_ENUMERATION_LIMIT: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureDoc", into = "FeatureDoc")]
pub struct FeatureMap {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    /// Row-major `(S*A) x d`; row `s * A + a` is `phi(s, a)`.
    rows: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureDoc {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TryFrom<FeatureDoc> for FeatureMap {
    type Error = Error;
    fn try_from(d: FeatureDoc) -> Result<Self> {
        FeatureMap::new(d.n_states, d.n_actions, d.dim, d.data)
    }
}

impl From<FeatureMap> for FeatureDoc {
    fn from(f: FeatureMap) -> Self {
        FeatureDoc { n_states: f.n_states, n_actions: f.n_actions, dim: f.dim, data: f.rows }
    }
}

impl FeatureMap {
    /// Validates row norms (`<= 1`) and full column rank.
    pub fn new(n_states: usize, n_actions: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        let f = Self::unchecked(n_states, n_actions, dim, rows)?;
        if let Some(r) = (0..f.n_pairs()).find(|&r| linalg::norm(f.row_at(r)) > 1.0 + ROW_NORM_TOL) {
            return Err(Error::invalid(format!("feature row {r} has norm above 1")));
        }
        if !f.has_full_rank() {
            return Err(Error::RankDeficient(format!("feature matrix has rank below {dim}")));
        }
        Ok(f)
    }

    fn unchecked(n_states: usize, n_actions: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 || rows.len() != n_states * n_actions * dim {
            return Err(Error::invalid("feature matrix has the wrong size"));
        }
        Ok(FeatureMap { n_states, n_actions, dim, rows })
    }

    /// Test and experiment helper: skips the norm and rank checks.
    pub fn new_unchecked(n_states: usize, n_actions: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        Self::unchecked(n_states, n_actions, dim, rows)
    }

    fn has_full_rank(&self) -> bool {
        self.dim <= self.n_pairs() && linalg::rank(&self.matrix(), 1e-10) == self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        self.row_at(s * self.n_actions + a)
    }

    #[inline]
    pub fn row_at(&self, pair: usize) -> &[f64] {
        &self.rows[pair * self.dim..(pair + 1) * self.dim]
    }

    pub fn matrix(&self) -> Mat {
        DMatrix::from_row_slice(self.n_pairs(), self.dim, &self.rows)
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.n_pairs()).map(|r| linalg::norm(self.row_at(r))).fold(0.0, f64::max)
    }

    pub fn matches(&self, mdp: &Dmdp) -> bool {
        self.n_states == mdp.n_states() && self.n_actions == mdp.n_actions()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Tabular,
    RandomProjection,
}

/// Tabular: one-hot rows, `d = S*A`. Random projection: Gaussian rows
/// normalized to unit length, resampled until the rank is full.
pub fn build_features(kind: FeatureKind, mdp: &Dmdp, dim: usize, seed: u64) -> Result<FeatureMap> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let pairs = ns * na;
    match kind {
        FeatureKind::Tabular => {
            if dim != pairs {
                return Err(Error::invalid(format!("tabular features need d = {pairs}, got {dim}")));
            }
            let mut rows = vec![0.0; pairs * pairs];
            for i in 0..pairs {
                rows[i * pairs + i] = 1.0;
            }
            FeatureMap::new(ns, na, dim, rows)
        }
        FeatureKind::RandomProjection => {
            if dim == 0 || dim > pairs {
                return Err(Error::invalid(format!("random projection needs 1 <= d <= {pairs}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..RESAMPLE_ATTEMPTS {
                let mut rows: Vec<f64> = (0..pairs * dim).map(|_| rng.sample(StandardNormal)).collect();
                for row in rows.chunks_mut(dim) {
                    let n = linalg::norm(row);
                    row.iter_mut().for_each(|v| *v /= n);
                }
                let f = FeatureMap::unchecked(ns, na, dim, rows)?;
                if f.has_full_rank() {
                    return Ok(f);
                }
            }
            Err(Error::GenerationFailure(format!("no full-rank feature matrix after {RESAMPLE_ATTEMPTS} attempts")))
        }
    }
}

/// `sum_{s,a} w(s,a) phi(s,a) phi(s,a)^T`.
fn weighted_gram(features: &FeatureMap, weights: &[f64]) -> Mat {
    let d = features.dim();
    let mut out = Mat::zeros(d, d);
    for (pair, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let phi = features.row_at(pair);
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] += w * phi[i] * phi[j];
            }
        }
    }
    out
}

/// `E_mu[phi phi^T]` under the `(s, a)` marginal of the stationary triple law.
pub fn covariance_behavior(features: &FeatureMap, chain: &ChainKernel) -> Mat {
    weighted_gram(features, &chain.pair_marginal())
}

/// `E[phi phi^T]` with `s ~ state_dist`, `a ~ policy(. | s)`.
pub fn covariance_policy(features: &FeatureMap, state_dist: &[f64], policy: &Policy) -> Mat {
    let na = features.n_actions();
    let weights: Vec<f64> = (0..features.n_pairs()).map(|p| state_dist[p / na] * policy.prob(p / na, p % na)).collect();
    weighted_gram(features, &weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaMethod {
    ExactEnumeration,
    HeuristicAscent,
    GammaZero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaCertificate {
    pub kappa: f64,
    pub method: KappaMethod,
    /// Exact method with `kappa > 0`.
    pub certified: bool,
    /// Deterministic policy (one action per state) attaining the binding value.
    pub witness: Option<Vec<usize>>,
}

impl KappaCertificate {
    /// Domination fails on the witness policy.
    pub fn violated(&self) -> bool {
        self.kappa <= 0.0
    }
}

/// Evaluates `lambda_min(Sigma_b - gamma^2 Sigma_pi)` for deterministic policies.
struct DominationProblem {
    behavior: Mat,
    /// `gamma^2 mu(s) phi(s,a) phi(s,a)^T` per pair.
    pair_terms: Vec<Mat>,
    n_states: usize,
    n_actions: usize,
}

impl DominationProblem {
    fn new(features: &FeatureMap, mdp: &Dmdp, chain: &ChainKernel) -> Self {
        let g2 = mdp.discount().powi(2);
        let states = chain.state_marginal();
        let na = features.n_actions();
        let pair_terms = (0..features.n_pairs())
            .map(|p| {
                let mut w = vec![0.0; features.n_pairs()];
                w[p] = g2 * states[p / na];
                weighted_gram(features, &w)
            })
            .collect();
        DominationProblem {
            behavior: covariance_behavior(features, chain),
            pair_terms,
            n_states: features.n_states(),
            n_actions: na,
        }
    }

    fn margin(&self, actions: &[usize]) -> f64 {
        let mut m = self.behavior.clone();
        for (s, &a) in actions.iter().enumerate() {
            m -= &self.pair_terms[s * self.n_actions + a];
        }
        linalg::min_eigenvalue(&m)
    }

    fn decode(&self, mut index: u128) -> Vec<usize> {
        let na = self.n_actions as u128;
        (0..self.n_states)
            .map(|_| {
                let a = (index % na) as usize;
                index /= na;
                a
            })
            .collect()
    }
}

/// Certify the domination margin. `restarts` and `seed` drive the heuristic.
pub fn certify_kappa(
    features: &FeatureMap,
    mdp: &Dmdp,
    chain: &ChainKernel,
    method: KappaMethod,
    restarts: usize,
    seed: u64,
    par: Parallelism,
) -> Result<KappaCertificate> {
    if !features.matches(mdp) {
        return Err(Error::invalid("features do not match the MDP"));
    }
    match method {
        KappaMethod::GammaZero => {
            // Only meaningful when the discounted term vanishes.
            if mdp.discount() > 0.0 {
                return Err(Error::invalid("gamma-zero method requires a zero discount"));
            }
            Ok(gamma_zero_certificate(features, chain))
        }
        KappaMethod::ExactEnumeration => {
            let count = (mdp.n_actions() as u128)
                .checked_pow(mdp.n_states() as u32)
                .filter(|c| *c <= EXACT_ENUMERATION_LIMIT)
                .ok_or_else(|| Error::invalid("A^S exceeds the exact-enumeration limit"))?;
            let problem = DominationProblem::new(features, mdp, chain);
            let (kappa, idx) = par.min_by_index(count as usize, |i| problem.margin(&problem.decode(i as u128)));
            Ok(KappaCertificate { kappa, method, certified: kappa > 0.0, witness: Some(problem.decode(idx as u128)) })
        }
        KappaMethod::HeuristicAscent => {
            let problem = DominationProblem::new(features, mdp, chain);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let actions: Vec<usize> = (0..mdp.n_actions()).collect();
            let mut best: Option<(f64, Vec<usize>)> = None;
            for _ in 0..restarts.max(1) {
                let mut pol: Vec<usize> = (0..mdp.n_states()).map(|_| *actions.choose(&mut rng).unwrap()).collect();
                let local = descend(&problem, &mut pol);
                if best.as_ref().is_none_or(|(b, _)| local < *b) {
                    best = Some((local, pol));
                }
            }
            let (kappa, witness) = best.unwrap();
            Ok(KappaCertificate { kappa, method, certified: false, witness: Some(witness) })
        }
    }
}

/// `lambda_min(Sigma_b)`; the exact certificate when `gamma = 0`.
pub fn gamma_zero_certificate(features: &FeatureMap, chain: &ChainKernel) -> KappaCertificate {
    let kappa = linalg::min_eigenvalue(&covariance_behavior(features, chain));
    KappaCertificate { kappa, method: KappaMethod::GammaZero, certified: kappa > 0.0, witness: None }
}

/// Per-state swaps lowering the margin until none improves.
fn descend(problem: &DominationProblem, pol: &mut [usize]) -> f64 {
    let mut current = problem.margin(pol);
    loop {
        let mut improved = false;
        for s in 0..problem.n_states {
            let keep = pol[s];
            let mut best_a = keep;
            for a in 0..problem.n_actions {
                if a == keep {
                    continue;
                }
                pol[s] = a;
                let m = problem.margin(pol);
                if m < current - 1e-15 {
                    current = m;
                    best_a = a;
                    improved = true;
                }
            }
            pol[s] = best_a;
        }
        if !improved {
            return current;
        }
    }
}

/// `lambda_min(Sigma_b - gamma^2 Sigma_pi)` for an arbitrary stochastic policy.
pub fn domination_margin(features: &FeatureMap, mdp: &Dmdp, chain: &ChainKernel, policy: &Policy) -> f64 {
    let sb = covariance_behavior(features, chain);
    let sp = covariance_policy(features, &chain.state_marginal(), policy);
    linalg::min_eigenvalue(&(sb - sp * mdp.discount().powi(2)))
}
