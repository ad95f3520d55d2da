//! Exact finite-instance quantities: soft values, the mean field and its
//! root, the Jacobian `G`, Poisson solutions on the observation chain, and the
//! noise and limiting covariances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg::{self, Mat, Vector};
use crate::mdp::{ChainKernel, Dmdp, Policy, Triple};

/// Condition number above which `G` is treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Entropy temperature `lambda > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda > 0.0 && lambda.is_finite() {
            Ok(Temperature(lambda))
        } else {
            Err(Error::invalid(format!("temperature {lambda} must be positive")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Temperature::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// `Q_theta(s, .)` written into `out`.
#[inline]
fn q_row_into(theta: &[f64], features: &FeatureMap, s: usize, out: &mut [f64]) {
    for (a, q) in out.iter_mut().enumerate() {
        *q = linalg::dot(features.row(s, a), theta);
    }
}

#[inline]
fn log_sum_exp_scaled(q: &[f64], lambda: f64) -> f64 {
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = q.iter().map(|v| ((v - m) / lambda).exp()).sum();
    m + lambda * sum.ln()
}

/// `V(s) = lambda log sum_a exp(Q(s,a)/lambda)` at a single state.
#[inline]
pub fn soft_value_at(theta: &[f64], features: &FeatureMap, s: usize, lambda: Temperature) -> f64 {
    let na = features.n_actions();
    let mut buf = [0.0f64; 16];
    if na <= buf.len() {
        q_row_into(theta, features, s, &mut buf[..na]);
        log_sum_exp_scaled(&buf[..na], lambda.get())
    } else {
        let mut q = vec![0.0; na];
        q_row_into(theta, features, s, &mut q);
        log_sum_exp_scaled(&q, lambda.get())
    }
}

pub fn q_values(theta: &[f64], features: &FeatureMap) -> Vec<f64> {
    (0..features.n_pairs()).map(|p| linalg::dot(features.row_at(p), theta)).collect()
}

pub fn soft_value(theta: &[f64], features: &FeatureMap, lambda: Temperature) -> Vec<f64> {
    (0..features.n_states()).map(|s| soft_value_at(theta, features, s, lambda)).collect()
}

/// Softmax of `Q(s, .)/lambda` with max-shift.
pub fn soft_policy(theta: &[f64], features: &FeatureMap, lambda: Temperature) -> Policy {
    let na = features.n_actions();
    let mut probs = Vec::with_capacity(features.n_pairs());
    let mut q = vec![0.0; na];
    for s in 0..features.n_states() {
        q_row_into(theta, features, s, &mut q);
        let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = q.iter().map(|v| ((v - m) / lambda.get()).exp()).collect();
        let total: f64 = w.iter().sum();
        probs.extend(w.into_iter().map(|x| x / total));
    }
    Policy::from_rows_unchecked(features.n_states(), na, probs)
}

/// Temporal-difference error `r(s,a) + gamma V(s') - Q(s,a)`.
#[inline]
pub fn td_error(theta: &[f64], z: Triple, features: &FeatureMap, mdp: &Dmdp, lambda: Temperature) -> f64 {
    mdp.reward(z.s, z.a) + mdp.discount() * soft_value_at(theta, features, z.next, lambda)
        - linalg::dot(features.row(z.s, z.a), theta)
}

/// Sampled operator `F(theta, z) = phi(s,a) * td_error`.
pub fn drift(theta: &[f64], z: Triple, features: &FeatureMap, mdp: &Dmdp, lambda: Temperature) -> Vec<f64> {
    let delta = td_error(theta, z, features, mdp, lambda);
    features.row(z.s, z.a).iter().map(|p| p * delta).collect()
}

/// `E_{a' ~ pi_theta(.|s)} phi(s, a')`.
fn expected_feature(theta: &[f64], features: &FeatureMap, pi: &Policy, s: usize) -> Vec<f64> {
    let _ = theta;
    let mut out = vec![0.0; features.dim()];
    for a in 0..features.n_actions() {
        let p = pi.prob(s, a);
        for (o, v) in out.iter_mut().zip(features.row(s, a)) {
            *o += p * v;
        }
    }
    out
}

/// `grad F(theta, z) = -phi(s,a) (phi(s,a) - gamma E_{pi_theta(.|s')} phi(s',.))^T`.
pub fn drift_jacobian(theta: &[f64], z: Triple, features: &FeatureMap, mdp: &Dmdp, lambda: Temperature) -> Mat {
    let pi = soft_policy(theta, features, lambda);
    let next = expected_feature(theta, features, &pi, z.next);
    let phi = features.row(z.s, z.a);
    let d = features.dim();
    DMatrix::from_fn(d, d, |i, j| -phi[i] * (phi[j] - mdp.discount() * next[j]))
}

/// `F_bar(theta) = Phi^T D_mu (r + gamma P V_theta - Phi theta)`.
pub fn mean_field(
    theta: &[f64],
    features: &FeatureMap,
    mdp: &Dmdp,
    chain: &ChainKernel,
    lambda: Temperature,
) -> Vector {
    let v = soft_value(theta, features, lambda);
    let weights = chain.pair_marginal();
    let na = mdp.n_actions();
    let mut out = Vector::zeros(features.dim());
    for (pair, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let (s, a) = (pair / na, pair % na);
        let pv: f64 = mdp.next_dist(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
        let phi = features.row_at(pair);
        let resid = mdp.reward(s, a) + mdp.discount() * pv - linalg::dot(phi, theta);
        for (o, f) in out.iter_mut().zip(phi) {
            *o += w * f * resid;
        }
    }
    out
}

fn pair_weight_matrix(chain: &ChainKernel) -> Mat {
    Mat::from_diagonal(&Vector::from_vec(chain.pair_marginal()))
}

/// `grad F_bar(theta) = -Phi^T D_mu (I - gamma P^{pi_theta}) Phi`.
pub fn mean_field_jacobian(
    theta: &[f64],
    features: &FeatureMap,
    mdp: &Dmdp,
    chain: &ChainKernel,
    lambda: Temperature,
) -> Mat {
    let phi = features.matrix();
    let pi = soft_policy(theta, features, lambda);
    let n = mdp.n_pairs();
    let inner = Mat::identity(n, n) - pi.pair_transition(mdp) * mdp.discount();
    -(phi.transpose() * pair_weight_matrix(chain) * inner * &phi)
}

/// `G = -grad F_bar(theta_star)`.
pub fn jacobian_g(
    theta_star: &[f64],
    features: &FeatureMap,
    mdp: &Dmdp,
    chain: &ChainKernel,
    lambda: Temperature,
) -> Mat {
    -mean_field_jacobian(theta_star, features, mdp, chain, lambda)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointSolution {
    pub theta: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Damped iterations before switching to Newton steps.
const NEWTON_AFTER: usize = 200;

/// Root of the mean field, via the normal-equation map
/// `T(theta) = (Phi^T D_mu Phi)^{-1} Phi^T D_mu (r + gamma P V_theta)`.
///
/// Damped steps `theta <- (1 - beta) theta + beta T(theta)` start at
/// `beta = 0.5`; a step that raises the residual is rejected and `beta`
/// halved. After [`NEWTON_AFTER`] iterations without convergence the solver
/// switches to backtracking Newton steps on the mean field.
pub fn solve_theta_star(
    features: &FeatureMap,
    mdp: &Dmdp,
    chain: &ChainKernel,
    lambda: Temperature,
    tol: f64,
    max_iters: usize,
) -> Result<FixedPointSolution> {
    solve_theta_star_from(&vec![0.0; features.dim()], features, mdp, chain, lambda, tol, max_iters)
}

pub fn solve_theta_star_from(
    init: &[f64],
    features: &FeatureMap,
    mdp: &Dmdp,
    chain: &ChainKernel,
    lambda: Temperature,
    tol: f64,
    max_iters: usize,
) -> Result<FixedPointSolution> {
    let phi = features.matrix();
    let gram = phi.transpose() * pair_weight_matrix(chain) * &phi;
    if linalg::condition_number(&gram) > CONDITION_LIMIT {
        return Err(Error::RankDeficient(
            "Phi^T D_mu Phi is singular (rank-deficient features or unvisited pairs)".into(),
        ));
    }
    let gram_lu = gram.clone().lu();
    let residual_of = |t: &[f64]| mean_field(t, features, mdp, chain, lambda).norm();

    let mut theta = init.to_vec();
    let mut residual = residual_of(&theta);
    let mut history = vec![residual];
    let mut beta = 0.5;
    let mut iters = 0;
    while residual > tol && iters < max_iters {
        iters += 1;
        let candidate: Vec<f64> = if iters <= NEWTON_AFTER && beta > 1e-8 {
            // F_bar = gram (T(theta) - theta), so T(theta) = theta + gram^{-1} F_bar.
            let fbar = mean_field(&theta, features, mdp, chain, lambda);
            let step = gram_lu.solve(&fbar).ok_or_else(|| Error::RankDeficient("singular Gram matrix".into()))?;
            theta.iter().zip(step.iter()).map(|(t, s)| t + beta * s).collect()
        } else {
            newton_step(&theta, residual, features, mdp, chain, lambda)?
        };
        let r = residual_of(&candidate);
        if r < residual {
            theta = candidate;
            residual = r;
        } else if iters <= NEWTON_AFTER {
            beta *= 0.5;
        } else {
            break;
        }
        history.push(residual);
    }
    if residual > tol {
        return Err(Error::NonConvergence {
            what: "projected soft Bellman solve",
            iterations: iters,
            residual,
            history,
        });
    }
    Ok(FixedPointSolution { theta, residual, iterations: iters })
}

fn newton_step(
    theta: &[f64],
    residual: f64,
    features: &FeatureMap,
    mdp: &Dmdp,
    chain: &ChainKernel,
    lambda: Temperature,
) -> Result<Vec<f64>> {
    let fbar = mean_field(theta, features, mdp, chain, lambda);
    let jac = mean_field_jacobian(theta, features, mdp, chain, lambda);
    let dir = jac
        .lu()
        .solve(&(-fbar))
        .ok_or_else(|| Error::IllConditioned { what: "Newton step", detail: "singular mean-field Jacobian".into() })?;
    let mut t = 1.0;
    loop {
        let cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
        if mean_field(&cand, features, mdp, chain, lambda).norm() < residual || t < 1e-6 {
            return Ok(cand);
        }
        t *= 0.5;
    }
}

/// Solution of `g - P g = f - mu(f)` with `mu(g) = 0`, one column per
/// component of `f`.
#[derive(Clone, Debug)]
pub struct PoissonSolution {
    pub values: Mat,
    /// Fingerprint of the kernel the solution belongs to.
    pub kernel_ref: u64,
}

impl PoissonSolution {
    pub fn value(&self, z: usize) -> Vector {
        self.values.row(z).transpose()
    }
}

/// Solves the Poisson equation on a chain.
pub fn poisson_solve(f: &Mat, chain: &ChainKernel) -> Result<PoissonSolution> {
    let values = poisson_solve_kernel(f, chain.kernel(), chain.stationary())?;
    Ok(PoissonSolution { values, kernel_ref: chain.fingerprint() })
}

/// The augmented system `[(I - P); mu^T] g = [f - mu(f); 0]`, folded into the
/// square nonsingular form `(I - P + 1 mu^T) g = f - mu(f)`.
pub fn poisson_solve_kernel(f: &Mat, kernel: &Mat, mu: &Vector) -> Result<Mat> {
    let n = kernel.nrows();
    if f.nrows() != n {
        return Err(Error::invalid("function rows must match the kernel size"));
    }
    let ones = Vector::from_element(n, 1.0);
    let centered = f - &ones * (mu.transpose() * f);
    let system = Mat::identity(n, n) - kernel + &ones * mu.transpose();
    let lu = system.clone().lu();
    let mut g = lu.solve(&centered).ok_or_else(|| Error::IllConditioned {
        what: "Poisson equation",
        detail: "fundamental matrix is singular".into(),
    })?;
    let scale = centered.amax().max(1.0);
    for _ in 0..3 {
        let r = &centered - &system * &g;
        if r.amax() <= 1e-14 * scale {
            break;
        }
        g += lu.solve(&r).unwrap();
    }
    let resid = poisson_residual(&g, f, kernel, mu);
    if resid > 1e-10 * scale || !resid.is_finite() {
        return Err(Error::IllConditioned {
            what: "Poisson equation",
            detail: format!("residual {resid:e} after refinement"),
        });
    }
    Ok(g)
}

/// `||(g - P g) - (f - mu(f))||_inf`.
pub fn poisson_residual(g: &Mat, f: &Mat, kernel: &Mat, mu: &Vector) -> f64 {
    let n = kernel.nrows();
    let ones = Vector::from_element(n, 1.0);
    let centered = f - &ones * (mu.transpose() * f);
    ((g - kernel * g) - centered).amax()
}

/// `F(theta, z)` for every triple, one row per triple.
pub fn drift_table(theta: &[f64], features: &FeatureMap, mdp: &Dmdp, lambda: Temperature) -> Mat {
    let rows: Vec<f64> =
        (0..mdp.n_triples()).flat_map(|z| drift(theta, mdp.triple(z), features, mdp, lambda)).collect();
    Mat::from_row_slice(mdp.n_triples(), features.dim(), &rows)
}

/// Stationary covariance of the martingale increments `g(z') - (P g)(z)`
/// where `g` solves the Poisson equation for a function table `f`.
pub fn martingale_covariance(f: &Mat, chain: &ChainKernel) -> Result<Mat> {
    let g = poisson_solve(f, chain)?.values;
    let pg = chain.kernel() * &g;
    let mu = chain.stationary();
    let k = chain.kernel();
    let d = f.ncols();
    let mut cov = Mat::zeros(d, d);
    let mut inc = Vector::zeros(d);
    for z in 0..k.nrows() {
        if mu[z] == 0.0 {
            continue;
        }
        for z2 in 0..k.ncols() {
            let p = k[(z, z2)];
            if p == 0.0 {
                continue;
            }
            for i in 0..d {
                inc[i] = g[(z2, i)] - pg[(z, i)];
            }
            cov.ger(mu[z] * p, &inc, &inc, 1.0);
        }
    }
    Ok(linalg::symmetrize(&cov))
}

/// `Sigma_eps`: exact double sum over the chain with `eps(z) = F(theta_star, z)`.
pub fn noise_covariance(
    theta_star: &[f64],
    features: &FeatureMap,
    mdp: &Dmdp,
    chain: &ChainKernel,
    lambda: Temperature,
) -> Result<Mat> {
    martingale_covariance(&drift_table(theta_star, features, mdp, lambda), chain)
}

/// `Sigma_inf = G^{-1} Sigma_eps G^{-T}`, symmetrized.
pub fn limiting_covariance(g: &Mat, sigma_eps: &Mat) -> Result<Mat> {
    let cond = linalg::condition_number(g);
    if cond > CONDITION_LIMIT {
        return Err(Error::IllConditioned { what: "limiting covariance", detail: format!("cond(G) = {cond:e}") });
    }
    let lu = g.clone().lu();
    let left = lu
        .solve(sigma_eps)
        .ok_or_else(|| Error::IllConditioned { what: "limiting covariance", detail: "G is singular".into() })?;
    let full = lu.solve(&left.transpose()).unwrap();
    Ok(linalg::symmetrize(&full))
}

/// Everything the CLT diagnostics need about the target of the recursion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "FixedPointDoc", try_from = "FixedPointDoc")]
pub struct SoftFixedPoint {
    pub theta_star: Vec<f64>,
    pub residual: f64,
    pub g: Mat,
    pub sigma_eps: Mat,
    pub sigma_inf: Mat,
    pub solver_iters: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixedPointDoc {
    theta_star: Vec<f64>,
    residual: f64,
    solver_iters: usize,
    g: Vec<Vec<f64>>,
    sigma_eps: Vec<Vec<f64>>,
    sigma_inf: Vec<Vec<f64>>,
}

fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> Result<Mat> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::invalid("ragged matrix"));
    }
    Ok(DMatrix::from_row_iterator(n, m, rows.into_iter().flatten()))
}

impl From<SoftFixedPoint> for FixedPointDoc {
    fn from(f: SoftFixedPoint) -> Self {
        FixedPointDoc {
            theta_star: f.theta_star,
            residual: f.residual,
            solver_iters: f.solver_iters,
            g: to_rows(&f.g),
            sigma_eps: to_rows(&f.sigma_eps),
            sigma_inf: to_rows(&f.sigma_inf),
        }
    }
}

impl TryFrom<FixedPointDoc> for SoftFixedPoint {
    type Error = Error;
    fn try_from(d: FixedPointDoc) -> Result<Self> {
        Ok(SoftFixedPoint {
            theta_star: d.theta_star,
            residual: d.residual,
            solver_iters: d.solver_iters,
            g: from_rows(d.g)?,
            sigma_eps: from_rows(d.sigma_eps)?,
            sigma_inf: from_rows(d.sigma_inf)?,
        })
    }
}

impl SoftFixedPoint {
    pub fn compute(
        features: &FeatureMap,
        mdp: &Dmdp,
        chain: &ChainKernel,
        lambda: Temperature,
        tol: f64,
        max_iters: usize,
    ) -> Result<Self> {
        let sol = solve_theta_star(features, mdp, chain, lambda, tol, max_iters)?;
        let g = jacobian_g(&sol.theta, features, mdp, chain, lambda);
        let sigma_eps = noise_covariance(&sol.theta, features, mdp, chain, lambda)?;
        let sigma_inf = limiting_covariance(&g, &sigma_eps)?;
        Ok(SoftFixedPoint {
            theta_star: sol.theta,
            residual: sol.residual,
            g,
            sigma_eps,
            sigma_inf,
            solver_iters: sol.iterations,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn theta_star_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_star)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_features, FeatureKind};
    use crate::mdp::{chain_kernel, random_mdp};
    use approx::assert_relative_eq;

    fn lam(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    fn setup(gamma: f64, kind: FeatureKind, d: usize, seed: u64) -> (Dmdp, ChainKernel, FeatureMap) {
        let m = random_mdp(4, 2, 2, gamma.max(0.5), seed).unwrap().with_discount(gamma).unwrap();
        let c = chain_kernel(&m, &Policy::uniform(4, 2)).unwrap();
        let f = build_features(kind, &m, d, seed).unwrap();
        (m, c, f)
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(serde_json::from_str::<Temperature>("0.0").is_err());
    }

    #[test]
    fn soft_value_at_zero_is_lambda_log_a() {
        let (_, _, f) = setup(0.5, FeatureKind::RandomProjection, 3, 1);
        for v in soft_value(&[0.0; 3], &f, lam(0.7)) {
            assert_relative_eq!(v, 0.7 * 2f64.ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn soft_value_single_action_is_q() {
        let f = FeatureMap::new(2, 1, 2, vec![0.6, 0.8, 1.0, 0.0]).unwrap();
        let theta = [0.3, -1.2];
        let v = soft_value(&theta, &f, lam(0.4));
        assert_relative_eq!(v[0], 0.6 * 0.3 - 0.8 * 1.2, epsilon = 1e-15);
        assert_relative_eq!(v[1], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn soft_value_and_policy_logistic_example() {
        // Q-row (0, 1) at lambda = 1.
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let theta = [0.0, 1.0];
        assert_relative_eq!(soft_value(&theta, &f, lam(1.0))[0], 1.3132616875182228, epsilon = 1e-12);
        let p = soft_policy(&theta, &f, lam(1.0));
        assert_relative_eq!(p.prob(0, 0), 0.2689414213699951, epsilon = 1e-12);
        assert_relative_eq!(p.prob(0, 1), 0.7310585786300049, epsilon = 1e-12);
    }

    #[test]
    fn soft_value_is_stable_for_large_q() {
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = soft_value(&[1e6, 1e6], &f, lam(0.01))[0];
        assert_relative_eq!(v, 1e6 + 0.01 * 2f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn soft_policy_rows_are_stochastic() {
        let (_, _, f) = setup(0.5, FeatureKind::RandomProjection, 3, 2);
        let p = soft_policy(&[3.0, -7.0, 11.0], &f, lam(0.05));
        for s in 0..4 {
            assert!((p.row(s).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let u = soft_policy(&[0.0; 3], &f, lam(0.5));
        assert!(u.row(2).iter().all(|&x| x == 0.5));
    }

    #[test]
    fn drift_vanishes_at_reward_for_myopic_tabular() {
        let (m, _, f) = setup(0.0, FeatureKind::Tabular, 8, 3);
        let theta = m.rewards().to_vec();
        for z in 0..m.n_triples() {
            assert!(drift(&theta, m.triple(z), &f, &m, lam(0.5)).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn drift_vanishes_on_zero_feature_row() {
        let m = Dmdp::new(2, 1, vec![0.5, 0.5, 0.5, 0.5], vec![0.3, 0.9], 0.9).unwrap();
        let f = FeatureMap::new_unchecked(2, 1, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let z = Triple { s: 0, a: 0, next: 1 };
        assert_eq!(drift(&[0.4, 0.2], z, &f, &m, lam(0.5)), vec![0.0, 0.0]);
    }

    #[test]
    fn drift_on_hand_instance() {
        // Two states, one action, phi(0) = (1, 0), phi(1) = (0.6, 0.8).
        let m = Dmdp::new(2, 1, vec![0.5, 0.5, 0.5, 0.5], vec![0.3, 0.9], 0.9).unwrap();
        let f = FeatureMap::new(2, 1, 2, vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        let theta = [0.1, -0.2];
        let z = Triple { s: 0, a: 0, next: 1 };
        // V(1) = Q(1) = 0.06 - 0.16 = -0.1; delta = 0.3 + 0.9 * -0.1 - 0.1 = 0.11.
        let out = drift(&theta, z, &f, &m, lam(0.5));
        assert_relative_eq!(out[0], 0.11, epsilon = 1e-15);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn mean_field_is_stationary_average_of_drift() {
        let (m, c, f) = setup(0.5, FeatureKind::RandomProjection, 3, 4);
        let theta = [0.2, -0.4, 0.9];
        let table = drift_table(&theta, &f, &m, lam(0.5));
        let avg = table.transpose() * c.stationary();
        let mf = mean_field(&theta, &f, &m, &c, lam(0.5));
        assert!((avg - mf).amax() < 1e-14);
    }

    #[test]
    fn myopic_mean_field_is_weighted_regression() {
        let (m, c, f) = setup(0.0, FeatureKind::RandomProjection, 3, 5);
        let phi = f.matrix();
        let w = Mat::from_diagonal(&Vector::from_vec(c.pair_marginal()));
        let r = Vector::from_column_slice(m.rewards());
        let wls = (phi.transpose() * &w * &phi).lu().solve(&(phi.transpose() * &w * r)).unwrap();
        let mf = mean_field(wls.as_slice(), &f, &m, &c, lam(0.5));
        assert!(mf.amax() < 1e-14);
        let sol = solve_theta_star(&f, &m, &c, lam(0.5), 1e-12, 1000).unwrap();
        assert!((Vector::from_vec(sol.theta) - wls).amax() < 1e-10);
    }

    #[test]
    fn solver_meets_tolerance() {
        let (m, c, f) = setup(0.5, FeatureKind::RandomProjection, 4, 6);
        let sol = solve_theta_star(&f, &m, &c, lam(0.5), 1e-10, 10_000).unwrap();
        assert!(sol.residual <= 1e-10);
        assert!(mean_field(&sol.theta, &f, &m, &c, lam(0.5)).norm() <= 1e-10);
    }

    #[test]
    fn solver_reports_nonconvergence() {
        let (m, c, f) = setup(0.5, FeatureKind::RandomProjection, 4, 6);
        match solve_theta_star(&f, &m, &c, lam(0.5), 1e-30, 3) {
            Err(Error::NonConvergence { history, .. }) => assert!(!history.is_empty()),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn solver_rejects_singular_gram() {
        let (m, c, _) = setup(0.5, FeatureKind::RandomProjection, 4, 6);
        let f = FeatureMap::new_unchecked(4, 2, 2, [0.5, 0.5].repeat(8)).unwrap();
        assert!(matches!(solve_theta_star(&f, &m, &c, lam(0.5), 1e-10, 100), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn myopic_jacobian_is_gram() {
        let (m, c, f) = setup(0.0, FeatureKind::RandomProjection, 3, 7);
        let g = jacobian_g(&[0.3, 0.1, -0.2], &f, &m, &c, lam(0.5));
        let phi = f.matrix();
        let gram = phi.transpose() * Mat::from_diagonal(&Vector::from_vec(c.pair_marginal())) * &phi;
        assert!((g - gram).amax() < 1e-15);
    }

    #[test]
    fn drift_jacobian_averages_to_mean_field_jacobian() {
        let (m, c, f) = setup(0.5, FeatureKind::RandomProjection, 3, 8);
        let theta = [0.5, -0.1, 0.3];
        let mut avg = Mat::zeros(3, 3);
        for z in 0..m.n_triples() {
            avg += drift_jacobian(&theta, m.triple(z), &f, &m, lam(0.5)) * c.stationary()[z];
        }
        assert!((avg - mean_field_jacobian(&theta, &f, &m, &c, lam(0.5))).amax() < 1e-14);
    }

    #[test]
    fn poisson_of_constant_is_zero() {
        let (_, c, _) = setup(0.5, FeatureKind::Tabular, 8, 1);
        let f = Mat::from_element(c.n_triples(), 2, 3.5);
        assert!(poisson_solve(&f, &c).unwrap().values.amax() < 1e-12);
    }

    #[test]
    fn poisson_on_iid_kernel_is_centering() {
        let mu = Vector::from_vec(vec![0.2, 0.3, 0.5]);
        let k = Mat::from_fn(3, 3, |_, j| mu[j]);
        let f = Mat::from_column_slice(3, 1, &[1.0, -2.0, 4.0]);
        let g = poisson_solve_kernel(&f, &k, &mu).unwrap();
        let mean = 0.2 - 0.6 + 2.0;
        for i in 0..3 {
            assert_relative_eq!(g[(i, 0)], f[(i, 0)] - mean, epsilon = 1e-14);
        }
    }

    #[test]
    fn poisson_solution_is_centered_and_tagged() {
        let (_, c, _) = setup(0.5, FeatureKind::Tabular, 8, 2);
        let n = c.n_triples();
        let f = Mat::from_fn(n, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.0);
        let sol = poisson_solve(&f, &c).unwrap();
        assert!((c.stationary().transpose() * &sol.values).amax() < 1e-10);
        assert!(poisson_residual(&sol.values, &f, c.kernel(), c.stationary()) <= 1e-10);
        assert_eq!(sol.kernel_ref, c.fingerprint());
    }

    #[test]
    fn limiting_covariance_examples() {
        let s = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(limiting_covariance(&Mat::identity(2, 2), &s).unwrap(), s);
        let g = Mat::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.8]);
        assert_eq!(limiting_covariance(&g, &Mat::zeros(2, 2)).unwrap(), Mat::zeros(2, 2));
        let scalar = limiting_covariance(&Mat::from_element(1, 1, 0.5), &Mat::from_element(1, 1, 3.0)).unwrap();
        assert_relative_eq!(scalar[(0, 0)], 12.0, epsilon = 1e-14);
        assert!(limiting_covariance(&Mat::zeros(2, 2), &s).is_err());
    }

    #[test]
    fn fixed_point_json_keeps_full_precision() {
        let (m, c, f) = setup(0.5, FeatureKind::RandomProjection, 3, 9);
        let fp = SoftFixedPoint::compute(&f, &m, &c, lam(0.5), 1e-10, 10_000).unwrap();
        let text = serde_json::to_string(&fp).unwrap();
        assert_eq!(serde_json::from_str::<SoftFixedPoint>(&text).unwrap(), fp);
    }
}
