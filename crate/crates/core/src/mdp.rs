//! Finite discounted MDPs and the observation chain `z_t = (s_t, a_t, s_{t+1})`
//! induced by a behavior policy.
//!
//! Triples are enumerated over the full product `S x A x S`, so a triple's
//! kernel index is `(s * A + a) * S + next`. Triples with zero probability are
//! transient: nothing enters them, and they carry zero stationary mass.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Dense systems are used up to this many triples; power iteration above.
pub const DENSE_LIMIT: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DmdpDoc", into = "DmdpDoc")]
pub struct Dmdp {
    n_states: usize,
    n_actions: usize,
    /// Row `(s * A + a)` holds `P(. | s, a)`.
    transition: Vec<f64>,
    /// Indexed by `s * A + a`.
    reward: Vec<f64>,
    discount: f64,
}

/// On-disk layout: `reward[s][a]`, `transition[s * A + a][s']`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DmdpDoc {
    n_states: usize,
    n_actions: usize,
    discount: f64,
    reward: Vec<Vec<f64>>,
    transition: Vec<Vec<f64>>,
}

impl TryFrom<DmdpDoc> for Dmdp {
    type Error = Error;

    fn try_from(doc: DmdpDoc) -> Result<Self> {
        if doc.reward.len() != doc.n_states || doc.transition.len() != doc.n_states * doc.n_actions {
            return Err(Error::invalid("table sizes disagree with n_states/n_actions"));
        }
        let reward = doc.reward.into_iter().flatten().collect();
        let transition = doc.transition.into_iter().flatten().collect();
        Dmdp::new(doc.n_states, doc.n_actions, transition, reward, doc.discount)
    }
}

impl From<Dmdp> for DmdpDoc {
    fn from(m: Dmdp) -> Self {
        DmdpDoc {
            n_states: m.n_states,
            n_actions: m.n_actions,
            discount: m.discount,
            reward: m.reward.chunks(m.n_actions).map(<[f64]>::to_vec).collect(),
            transition: m.transition.chunks(m.n_states).map(<[f64]>::to_vec).collect(),
        }
    }
}

impl Dmdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("state and action counts must be positive"));
        }
        let pairs = n_states * n_actions;
        if transition.len() != pairs * n_states || reward.len() != pairs {
            return Err(Error::invalid("transition/reward table has the wrong size"));
        }
        // Zero is admitted as the degenerate regression case.
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::invalid(format!("discount {discount} outside [0, 1)")));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            check_distribution(row).map_err(|e| Error::invalid(format!("transition row {i}: {e}")))?;
        }
        if let Some(r) = reward.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::invalid(format!("reward {r} outside [0, 1]")));
        }
        Ok(Dmdp { n_states, n_actions, transition, reward, discount })
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

    pub fn n_triples(&self) -> usize {
        self.n_pairs() * self.n_states
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[self.pair(s, a)]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// `P(. | s, a)`.
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let row = self.pair(s, a);
        &self.transition[row * self.n_states..(row + 1) * self.n_states]
    }

    /// The `SA x S` transition matrix.
    pub fn transition_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_pairs(), self.n_states, &self.transition)
    }

    /// Same model with another discount factor.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Dmdp::new(self.n_states, self.n_actions, self.transition.clone(), self.reward.clone(), discount)
    }

    pub fn triple_index(&self, z: Triple) -> usize {
        (z.s * self.n_actions + z.a) * self.n_states + z.next
    }

    pub fn triple(&self, index: usize) -> Triple {
        let next = index % self.n_states;
        let pair = index / self.n_states;
        Triple { s: pair / self.n_actions, a: pair % self.n_actions, next }
    }
}

fn check_distribution(row: &[f64]) -> std::result::Result<(), String> {
    if let Some(p) = row.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(format!("entry {p} is not a probability"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(format!("sums to {sum}"));
    }
    Ok(())
}

/// Garnet-style generator: every `(s, a)` row has exactly `branching`
/// successors with weights uniform on the simplex; rewards uniform on [0, 1].
pub fn random_mdp(n_states: usize, n_actions: usize, branching: usize, discount: f64, seed: u64) -> Result<Dmdp> {
    if branching == 0 || branching > n_states {
        return Err(Error::invalid(format!("branching {branching} must lie in 1..={n_states}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = n_states * n_actions;
    let mut transition = vec![0.0; pairs * n_states];
    for row in transition.chunks_mut(n_states) {
        let support = index::sample(&mut rng, n_states, branching);
        let weights: Vec<f64> = (0..branching).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = weights.iter().sum();
        for (s, w) in support.iter().zip(&weights) {
            row[s] = w / total;
        }
        // Absorb the normalization roundoff into the largest entry.
        let err = 1.0 - row.iter().sum::<f64>();
        let imax = (0..n_states).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
        row[imax] += err;
    }
    let reward = (0..pairs).map(|_| rng.random::<f64>()).collect();
    Dmdp::new(n_states, n_actions, transition, reward, discount)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    /// Row `s` holds `pi(. | s)`.
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::invalid("policy table has the wrong size"));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_distribution(row).map_err(|e| Error::invalid(format!("policy row {s}: {e}")))?;
        }
        Ok(Policy { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy { n_states, n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Policy { n_states: actions.len(), n_actions, probs }
    }

    /// Build without validation; rows must already be stochastic.
    pub(crate) fn from_rows_unchecked(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Self {
        Policy { n_states, n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// `P^pi((s,a),(s',a')) = P(s'|s,a) pi(a'|s')`.
    pub fn pair_transition(&self, mdp: &Dmdp) -> DMatrix<f64> {
        let n = mdp.n_pairs();
        let na = mdp.n_actions();
        DMatrix::from_fn(n, n, |i, j| {
            let (s, a) = (i / na, i % na);
            let (s2, a2) = (j / na, j % na);
            mdp.next_dist(s, a)[s2] * self.prob(s2, a2)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub s: usize,
    pub a: usize,
    pub next: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status", content = "value")]
pub enum MixingTime {
    Certified(usize),
    NotCertified { horizon: usize },
}

impl MixingTime {
    pub fn certified(self) -> Option<usize> {
        match self {
            MixingTime::Certified(t) => Some(t),
            MixingTime::NotCertified { .. } => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChainKernel {
    n_states: usize,
    n_actions: usize,
    behavior: Policy,
    kernel: DMatrix<f64>,
    stationary: DVector<f64>,
    mixing_time: MixingTime,
}

impl ChainKernel {
    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn stationary(&self) -> &DVector<f64> {
        &self.stationary
    }

    pub fn mixing_time(&self) -> MixingTime {
        self.mixing_time
    }

    pub fn behavior(&self) -> &Policy {
        &self.behavior
    }

    pub fn n_triples(&self) -> usize {
        self.kernel.nrows()
    }

    /// Marginal of the triple law on `(s, a)`, indexed by `s * A + a`.
    pub fn pair_marginal(&self) -> Vec<f64> {
        let ns = self.n_states;
        self.stationary.as_slice().chunks(ns).map(|c| c.iter().sum()).collect()
    }

    /// Marginal of the triple law on the current state.
    pub fn state_marginal(&self) -> Vec<f64> {
        self.pair_marginal().chunks(self.n_actions).map(|c| c.iter().sum()).collect()
    }

    /// Stable identifier of the kernel entries (FNV-1a over the bits).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.kernel.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Observation-chain kernel
/// `P((s2,a2,s2') | (s1,a1,s1')) = 1{s2 = s1'} pi_b(a2|s2) P(s2'|s2,a2)`,
/// with its stationary law and mixing time (default horizon `10 |Z|`).
pub fn chain_kernel(mdp: &Dmdp, behavior: &Policy) -> Result<ChainKernel> {
    chain_kernel_with_horizon(mdp, behavior, 10 * mdp.n_triples())
}

pub fn chain_kernel_with_horizon(mdp: &Dmdp, behavior: &Policy, horizon: usize) -> Result<ChainKernel> {
    if behavior.n_states() != mdp.n_states() || behavior.n_actions() != mdp.n_actions() {
        return Err(Error::invalid("behavior policy does not match the MDP"));
    }
    let kernel = kernel_matrix(mdp, behavior);
    certify_single_aperiodic_class(&kernel)?;
    let stationary = stationary_distribution(&kernel, 1e-12)?;
    let mixing_time = mixing_time(&kernel, &stationary, horizon)?;
    Ok(ChainKernel {
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        behavior: behavior.clone(),
        kernel,
        stationary,
        mixing_time,
    })
}

fn kernel_matrix(mdp: &Dmdp, behavior: &Policy) -> DMatrix<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let n = mdp.n_triples();
    let mut k = DMatrix::zeros(n, n);
    for from in 0..n {
        let s2 = from % ns;
        for a2 in 0..na {
            let pa = behavior.prob(s2, a2);
            if pa == 0.0 {
                continue;
            }
            for (s3, &p) in mdp.next_dist(s2, a2).iter().enumerate() {
                let to = (s2 * na + a2) * ns + s3;
                k[(from, to)] = pa * p;
            }
        }
    }
    k
}

/// Requires exactly one closed communicating class, and that class aperiodic.
/// Transient triples are allowed.
pub fn certify_single_aperiodic_class(kernel: &DMatrix<f64>) -> Result<()> {
    let n = kernel.nrows();
    let mut g = DiGraph::<(), ()>::with_capacity(n, n);
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for i in 0..n {
        for j in 0..n {
            if kernel[(i, j)] > 0.0 {
                g.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let sccs = tarjan_scc(&g);
    let mut comp = vec![0usize; n];
    for (c, members) in sccs.iter().enumerate() {
        for v in members {
            comp[v.index()] = c;
        }
    }
    let mut closed: Vec<Vec<usize>> = sccs
        .iter()
        .enumerate()
        .filter(|(c, members)| members.iter().all(|v| (0..n).all(|j| kernel[(v.index(), j)] == 0.0 || comp[j] == *c)))
        .map(|(_, members)| {
            let mut m: Vec<usize> = members.iter().map(|v| v.index()).collect();
            m.sort_unstable();
            m
        })
        .collect();
    closed.sort();
    if closed.len() != 1 {
        return Err(Error::ErgodicityNotCertified {
            reason: format!("{} closed classes", closed.len()),
            classes: closed,
        });
    }
    let period = class_period(kernel, &closed[0]);
    if period != 1 {
        return Err(Error::ErgodicityNotCertified {
            reason: format!("closed class has period {period}"),
            classes: closed,
        });
    }
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Period via BFS levels: gcd over in-class edges of `level(u) + 1 - level(v)`.
fn class_period(kernel: &DMatrix<f64>, class: &[usize]) -> usize {
    let n = kernel.nrows();
    let mut in_class = vec![false; n];
    for &v in class {
        in_class[v] = true;
    }
    let mut level = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::from([class[0]]);
    level[class[0]] = 0;
    let mut g = 0;
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if !in_class[v] || kernel[(u, v)] == 0.0 {
                continue;
            }
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            } else {
                g = gcd(g, (level[u] + 1).abs_diff(level[v]));
            }
        }
    }
    g.max(1)
}

/// Stationary law of a row-stochastic kernel with `||mu^T P - mu^T||_1 <= tol`.
///
/// Dense solve of `(P^T - I) mu = 0` with one equation replaced by the
/// normalization for up to [`DENSE_LIMIT`] states, power iteration above.
pub fn stationary_distribution(kernel: &DMatrix<f64>, tol: f64) -> Result<DVector<f64>> {
    let n = kernel.nrows();
    if n == 0 || kernel.ncols() != n {
        return Err(Error::invalid("kernel must be a non-empty square matrix"));
    }
    let mu = if n <= DENSE_LIMIT {
        let mut a = kernel.transpose() - DMatrix::identity(n, n);
        a.row_mut(n - 1).fill(1.0);
        let mut rhs = DVector::zeros(n);
        rhs[n - 1] = 1.0;
        let mut mu = a.lu().solve(&rhs).ok_or_else(|| Error::IllConditioned {
            what: "stationary distribution",
            detail: "balance system is singular (stationary law not unique)".into(),
        })?;
        for v in mu.iter_mut() {
            if *v < 0.0 && *v > -1e-12 {
                *v = 0.0;
            }
        }
        let total = mu.sum();
        mu /= total;
        mu
    } else {
        power_iteration(kernel, tol, 1_000_000)?
    };
    let residual = balance_residual(kernel, &mu);
    if residual > tol || mu.iter().any(|v| *v < 0.0) {
        return Err(Error::NonConvergence {
            what: "stationary distribution",
            iterations: 1,
            residual,
            history: vec![residual],
        });
    }
    Ok(mu)
}

fn power_iteration(kernel: &DMatrix<f64>, tol: f64, budget: usize) -> Result<DVector<f64>> {
    let n = kernel.nrows();
    let kt = kernel.transpose();
    let mut mu = DVector::from_element(n, 1.0 / n as f64);
    let mut residual = f64::INFINITY;
    for _ in 0..budget {
        let next = &kt * &mu;
        residual = (&next - &mu).lp_norm(1);
        mu = next;
        if residual <= tol * 0.5 {
            return Ok(mu);
        }
    }
    Err(Error::NonConvergence {
        what: "stationary distribution (power iteration)",
        iterations: budget,
        residual,
        history: vec![residual],
    })
}

/// `||mu^T P - mu^T||_1`.
pub fn balance_residual(kernel: &DMatrix<f64>, mu: &DVector<f64>) -> f64 {
    (kernel.tr_mul(mu) - mu).lp_norm(1)
}

/// `d_tv(P^t(.|z), mu)` maximized over `z`, for `t = 0..=horizon`.
///
/// Rows of `P^t` depend on `z` only through the row `P(z, .)`, so identical
/// rows are propagated once.
pub fn tv_profile(kernel: &DMatrix<f64>, mu: &DVector<f64>, horizon: usize) -> Vec<f64> {
    let n = kernel.nrows();
    let mut distinct: Vec<usize> = Vec::new();
    for i in 0..n {
        if !distinct.iter().any(|&j| kernel.row(j) == kernel.row(i)) {
            distinct.push(i);
        }
    }
    let mut rows = kernel.select_rows(distinct.iter());
    let mut profile = Vec::with_capacity(horizon + 1);
    // At t = 0 the law is a point mass.
    profile.push(mu.iter().map(|m| 1.0 - m).fold(0.0, f64::max));
    for t in 1..=horizon {
        let worst = rows
            .row_iter()
            .map(|r| 0.5 * r.iter().zip(mu.iter()).map(|(p, m)| (p - m).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        profile.push(worst);
        if t < horizon {
            rows = &rows * kernel;
        }
    }
    profile
}

/// Smallest `T` with `max_z d_tv(P^t(.|z), mu) <= (1/4)^floor(t / T)` for all
/// `t <= horizon`, checked on explicit matrix powers.
pub fn mixing_time(kernel: &DMatrix<f64>, mu: &DVector<f64>, horizon: usize) -> Result<MixingTime> {
    if horizon < 1 {
        return Err(Error::invalid("mixing-time horizon must be at least 1"));
    }
    let profile = tv_profile(kernel, mu, horizon);
    Ok(first_mixing_time(&profile))
}

/// Scan of a TV profile (index = t) for the smallest admissible `T`.
pub fn first_mixing_time(profile: &[f64]) -> MixingTime {
    let horizon = profile.len() - 1;
    for cand in 1..=horizon {
        let ok = profile.iter().enumerate().all(|(t, &d)| d <= 0.25f64.powi((t / cand) as i32));
        if ok {
            return MixingTime::Certified(cand);
        }
    }
    MixingTime::NotCertified { horizon }
}

/// Where a sampled trajectory starts.
#[derive(Clone, Copy, Debug)]
pub enum Start<'a> {
    /// `z_0 ~ mu`.
    Stationary(&'a ChainKernel),
    /// `s_0` fixed, then `a_0 ~ pi_b`, `s_1 ~ P`.
    State(usize),
}

/// Inverse-CDF tables over the nonzero entries of each row.
#[derive(Clone, Debug)]
struct CdfTable {
    rows: Vec<Vec<(usize, f64)>>,
}

impl CdfTable {
    fn new<'r>(rows: impl Iterator<Item = &'r [f64]>) -> Self {
        let rows = rows
            .map(|row| {
                let mut acc = 0.0;
                row.iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(i, p)| {
                        acc += p;
                        (i, acc)
                    })
                    .collect()
            })
            .collect();
        CdfTable { rows }
    }

    #[inline]
    fn sample<R: Rng>(&self, row: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let cdf = &self.rows[row];
        cdf.iter().find(|(_, c)| u < *c).unwrap_or(cdf.last().unwrap()).0
    }
}

/// Online sampler of the observation chain; never materializes the path.
#[derive(Clone, Debug)]
pub struct TrajectorySampler {
    n_states: usize,
    n_actions: usize,
    actions: CdfTable,
    successors: CdfTable,
    pending: Option<Triple>,
    state: usize,
    rng: ChaCha8Rng,
}

impl TrajectorySampler {
    pub fn new(mdp: &Dmdp, behavior: &Policy, start: Start<'_>, rng: ChaCha8Rng) -> Result<Self> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let actions = CdfTable::new((0..ns).map(|s| behavior.row(s)));
        let successors = CdfTable::new((0..mdp.n_pairs()).map(|p| mdp.next_dist(p / na, p % na)));
        let mut sampler =
            TrajectorySampler { n_states: ns, n_actions: na, actions, successors, pending: None, state: 0, rng };
        match start {
            Start::State(s) if s < ns => sampler.state = s,
            Start::State(s) => return Err(Error::invalid(format!("start state {s} out of range"))),
            Start::Stationary(chain) => {
                if chain.n_triples() != mdp.n_triples() {
                    return Err(Error::invalid("chain does not match the MDP"));
                }
                let law = CdfTable::new(std::iter::once(chain.stationary().as_slice()));
                let idx = law.sample(0, &mut sampler.rng);
                let z = mdp.triple(idx);
                sampler.pending = Some(z);
                sampler.state = z.next;
            }
        }
        Ok(sampler)
    }

    #[inline]
    pub fn next_triple(&mut self) -> Triple {
        if let Some(z) = self.pending.take() {
            return z;
        }
        let s = self.state;
        let a = self.actions.sample(s, &mut self.rng);
        let next = self.successors.sample(s * self.n_actions + a, &mut self.rng);
        debug_assert!(next < self.n_states);
        self.state = next;
        Triple { s, a, next }
    }
}

impl Iterator for TrajectorySampler {
    type Item = Triple;

    fn next(&mut self) -> Option<Triple> {
        Some(self.next_triple())
    }
}

/// `n` consecutive triples; deterministic given `seed`.
pub fn sample_trajectory(mdp: &Dmdp, behavior: &Policy, n: usize, seed: u64, start: Start<'_>) -> Result<Vec<Triple>> {
    let rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(TrajectorySampler::new(mdp, behavior, start, rng)?.take(n).collect())
}
