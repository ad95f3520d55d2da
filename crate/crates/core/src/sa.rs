//! Online entropy-regularized linear Q-learning with polynomial step sizes
//! and streaming Polyak-Ruppert averaging.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::mdp::{ChainKernel, Dmdp, Start, TrajectorySampler, Triple};
use crate::oracle::{self, Temperature};

/// `alpha_t = c0 / (t + k0)^omega`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub c0: f64,
    pub k0: f64,
    pub omega: f64,
}

impl StepSchedule {
    pub fn new(c0: f64, k0: f64, omega: f64) -> Result<Self> {
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(Error::invalid(format!("c0 = {c0} must be positive")));
        }
        if !(k0 > 0.0 && k0.is_finite()) {
            return Err(Error::invalid(format!("k0 = {k0} must be positive so that alpha_0 is finite")));
        }
        if !(omega > 0.5 && omega < 1.0) {
            return Err(Error::invalid(format!("omega = {omega} outside the open interval (1/2, 1)")));
        }
        Ok(StepSchedule { c0, k0, omega })
    }

    #[inline]
    pub fn step_size(&self, t: u64) -> f64 {
        step_size(self, t)
    }
}

#[inline]
pub fn step_size(schedule: &StepSchedule, t: u64) -> f64 {
    schedule.c0 / (t as f64 + schedule.k0).powf(schedule.omega)
}

/// Smallest integer `k0` with `k0^(1 - omega) >= 32 / (kappa c0)`.
pub fn minimal_k0(c0: f64, omega: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::Assumption(format!("kappa = {kappa} is not positive")));
    }
    if !(omega > 0.5 && omega < 1.0) {
        return Err(Error::invalid(format!("omega = {omega} outside the open interval (1/2, 1)")));
    }
    let rhs = 32.0 / (kappa * c0);
    let mut k0 = rhs.powf(1.0 / (1.0 - omega)).ceil().max(1.0);
    while k0 > 1.0 && (k0 - 1.0).powf(1.0 - omega) >= rhs {
        k0 -= 1.0;
    }
    while k0.powf(1.0 - omega) < rhs {
        k0 += 1.0;
    }
    Ok(k0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub passed: bool,
    pub lhs: f64,
    pub rhs: f64,
    /// Advisory only; does not gate a run.
    pub heuristic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub schedule: StepSchedule,
    pub kappa: f64,
    pub p: f64,
    pub slack: f64,
    pub conditions: Vec<Condition>,
}

impl ScheduleReport {
    /// All non-heuristic conditions hold.
    pub fn passed(&self) -> bool {
        self.conditions.iter().filter(|c| !c.heuristic).all(|c| c.passed)
    }

    pub fn heuristic_passed(&self) -> bool {
        self.conditions.iter().filter(|c| c.heuristic).all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Condition> {
        self.conditions.iter().filter(|c| !c.passed).collect()
    }
}

pub const DEFAULT_SLACK: f64 = 0.01;

/// Checks `omega` in `(1/2, 1)`, `k0^(1-omega) >= 32/(kappa c0)` and the
/// advisory `alpha_0 <= slack kappa / p^2`.
pub fn validate_schedule(schedule: &StepSchedule, kappa: f64, p: f64, slack: f64) -> ScheduleReport {
    let s = schedule;
    let omega_ok = s.omega > 0.5 && s.omega < 1.0;
    let lhs = s.k0.powf(1.0 - s.omega);
    let rhs = 32.0 / (kappa * s.c0);
    let alpha0 = step_size(s, 0);
    let alpha_bound = slack * kappa / (p * p);
    ScheduleReport {
        schedule: *s,
        kappa,
        p,
        slack,
        conditions: vec![
            Condition { name: "omega in (1/2, 1)".into(), passed: omega_ok, lhs: s.omega, rhs: 0.5, heuristic: false },
            Condition {
                name: "k0^(1-omega) >= 32/(kappa c0)".into(),
                passed: kappa > 0.0 && lhs >= rhs,
                lhs,
                rhs,
                heuristic: false,
            },
            Condition {
                name: "alpha0 <= slack kappa / p^2".into(),
                passed: alpha0 <= alpha_bound,
                lhs: alpha0,
                rhs: alpha_bound,
                heuristic: true,
            },
        ],
    }
}

/// `theta + alpha * F(theta, z)`, arithmetic shared with [`oracle::drift`].
pub fn q_update(
    theta: &[f64],
    z: Triple,
    alpha: f64,
    features: &FeatureMap,
    mdp: &Dmdp,
    lambda: Temperature,
) -> Vec<f64> {
    let mut out = theta.to_vec();
    q_update_in_place(&mut out, z, alpha, features, mdp, lambda);
    out
}

#[inline]
pub fn q_update_in_place(
    theta: &mut [f64],
    z: Triple,
    alpha: f64,
    features: &FeatureMap,
    mdp: &Dmdp,
    lambda: Temperature,
) {
    let delta = oracle::td_error(theta, z, features, mdp, lambda);
    for (t, p) in theta.iter_mut().zip(features.row(z.s, z.a)) {
        *t += alpha * (p * delta);
    }
}

/// `count` roughly log-spaced integers from `lo` to `hi` inclusive, deduplicated.
pub fn geometric_grid(lo: u64, hi: u64, count: usize) -> Vec<u64> {
    if hi == 0 || count == 0 {
        return Vec::new();
    }
    let lo = lo.clamp(1, hi);
    if count == 1 || lo == hi {
        return vec![hi];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut grid: Vec<u64> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as u64)
        .map(|t| t.clamp(lo, hi))
        .collect();
    grid.dedup();
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_steps: u64,
    pub seed: u64,
    pub replication_id: u64,
    pub lambda: Temperature,
    pub schedule: StepSchedule,
    pub checkpoints: Vec<u64>,
    /// `None` means the zero vector.
    pub init_theta: Option<Vec<f64>>,
    /// Keep every iterate (testing only).
    pub retain_iterates: bool,
}

impl RunConfig {
    pub fn new(n_steps: u64, seed: u64, lambda: Temperature, schedule: StepSchedule) -> Self {
        RunConfig {
            n_steps,
            seed,
            replication_id: 0,
            lambda,
            schedule,
            checkpoints: geometric_grid(10, n_steps, 32),
            init_theta: None,
            retain_iterates: false,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("checkpoints must be strictly increasing"));
        }
        if self.checkpoints.first() == Some(&0) || self.checkpoints.last().is_some_and(|&t| t > self.n_steps) {
            return Err(Error::invalid("checkpoints must lie in 1..=n_steps"));
        }
        if let Some(init) = &self.init_theta {
            if init.len() != dim {
                return Err(Error::invalid(format!("init_theta has length {}, expected {dim}", init.len())));
            }
        }
        Ok(())
    }
}

/// Whether the schedule was validated before the run.
#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleCheck {
    Validated(ScheduleReport),
    Override,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub t: u64,
    pub theta: Vec<f64>,
    pub average: Vec<f64>,
    /// `alpha_{t-1}`, the step that produced `theta_t`.
    pub step_size: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub replication_id: u64,
    pub seed: u64,
    pub final_theta: Vec<f64>,
    /// `(1/n) sum_{t=1}^n theta_t`; `None` when no step was taken.
    pub pr_average: Option<Vec<f64>>,
    pub checkpoints: Vec<Checkpoint>,
    pub schedule_override: bool,
    pub wall_time: f64,
    /// `theta_1..theta_n` when retention was requested.
    pub iterates: Option<Vec<Vec<f64>>>,
}

impl PartialEq for RunResult {
    /// Ignores wall time.
    fn eq(&self, other: &Self) -> bool {
        self.replication_id == other.replication_id
            && self.seed == other.seed
            && self.final_theta == other.final_theta
            && self.pr_average == other.pr_average
            && self.checkpoints == other.checkpoints
            && self.schedule_override == other.schedule_override
            && self.iterates == other.iterates
    }
}

impl RunResult {
    pub fn checkpoint(&self, t: u64) -> Option<&Checkpoint> {
        self.checkpoints.binary_search_by_key(&t, |c| c.t).ok().map(|i| &self.checkpoints[i])
    }
}

/// The trajectory stream for `(seed, replication_id)`.
pub fn replication_rng(seed: u64, replication_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication_id);
    rng
}

/// Runs the recursion from a stationary draw of the observation chain.
pub fn run(
    mdp: &Dmdp,
    chain: &ChainKernel,
    features: &FeatureMap,
    config: &RunConfig,
    check: &ScheduleCheck,
) -> Result<RunResult> {
    let schedule_override = match check {
        ScheduleCheck::Override => true,
        ScheduleCheck::Validated(report) => {
            if report.schedule != config.schedule {
                return Err(Error::invalid("validation report belongs to a different schedule"));
            }
            if !report.passed() {
                let names: Vec<_> = report.failures().iter().filter(|c| !c.heuristic).map(|c| c.name.clone()).collect();
                return Err(Error::Assumption(format!("step-size assumption violated: {}", names.join(", "))));
            }
            false
        }
    };
    if !features.matches(mdp) {
        return Err(Error::invalid("feature map does not match the MDP"));
    }
    let d = features.dim();
    config.validate(d)?;
    let started = Instant::now();
    let rng = replication_rng(config.seed, config.replication_id);
    let mut sampler = TrajectorySampler::new(mdp, chain.behavior(), Start::Stationary(chain), rng)?;

    let mut theta = config.init_theta.clone().unwrap_or_else(|| vec![0.0; d]);
    let mut avg = vec![0.0; d];
    let mut checkpoints = Vec::with_capacity(config.checkpoints.len());
    let mut next_cp = config.checkpoints.iter().peekable();
    let mut iterates = config.retain_iterates.then(Vec::new);
    let mut last_finite = theta.clone();

    for t in 0..config.n_steps {
        let z = sampler.next_triple();
        let alpha = config.schedule.step_size(t);
        q_update_in_place(&mut theta, z, alpha, features, mdp, config.lambda);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: t + 1, last_finite });
        }
        last_finite.copy_from_slice(&theta);
        let n = (t + 1) as f64;
        for (a, v) in avg.iter_mut().zip(&theta) {
            *a += (v - *a) / n;
        }
        if let Some(store) = iterates.as_mut() {
            store.push(theta.clone());
        }
        if next_cp.peek() == Some(&&(t + 1)) {
            next_cp.next();
            checkpoints.push(Checkpoint { t: t + 1, theta: theta.clone(), average: avg.clone(), step_size: alpha });
        }
    }

    Ok(RunResult {
        replication_id: config.replication_id,
        seed: config.seed,
        final_theta: theta,
        pr_average: (config.n_steps > 0).then_some(avg),
        checkpoints,
        schedule_override,
        wall_time: started.elapsed().as_secs_f64(),
        iterates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_features, FeatureKind};
    use crate::mdp::{chain_kernel, random_mdp, Policy};
    use approx::assert_relative_eq;

    fn lam() -> Temperature {
        Temperature::new(0.5).unwrap()
    }

    #[test]
    fn step_size_examples() {
        let s = StepSchedule::new(1.0, 1.0, 0.75).unwrap();
        assert_eq!(s.step_size(0), 1.0);
        assert_eq!(s.step_size(15), 0.125);
        let mut prev = s.step_size(0);
        for t in 1..1_000_000 {
            let a = s.step_size(t);
            assert!(a <= prev && a > 0.0);
            prev = a;
        }
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(StepSchedule::new(0.0, 1.0, 0.75).is_err());
        assert!(StepSchedule::new(1.0, 0.0, 0.75).is_err());
        assert!(StepSchedule::new(1.0, 1.0, 0.5).is_err());
        assert!(StepSchedule::new(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn validation_k0_threshold() {
        let s = StepSchedule::new(1.0, 1e10, 0.75).unwrap();
        let r = validate_schedule(&s, 0.1, 2.0, DEFAULT_SLACK);
        assert!(!r.passed());
        assert_relative_eq!(r.conditions[1].rhs, 320.0, epsilon = 1e-12);
        let ok = StepSchedule { k0: 1.048576e10, ..s };
        assert!(validate_schedule(&ok, 0.1, 2.0, DEFAULT_SLACK).passed());
        assert_eq!(minimal_k0(1.0, 0.75, 0.1).unwrap(), 1.048576e10);
    }

    #[test]
    fn validation_flags_omega_boundaries() {
        for omega in [0.5, 0.99 + 0.01, 0.4] {
            let s = StepSchedule { c0: 1.0, k0: 1e12, omega };
            let r = validate_schedule(&s, 0.1, 2.0, DEFAULT_SLACK);
            assert!(!r.conditions[0].passed, "omega {omega}");
            assert!(!r.passed());
        }
    }

    #[test]
    fn minimal_k0_is_minimal() {
        for (c0, omega, kappa) in [(1.0, 0.75, 0.03), (0.3, 0.6, 0.01), (2.0, 0.9, 0.5)] {
            let k0 = minimal_k0(c0, omega, kappa).unwrap();
            let rhs = 32.0 / (kappa * c0);
            assert!(k0.powf(1.0 - omega) >= rhs);
            assert!(k0 == 1.0 || (k0 - 1.0).powf(1.0 - omega) < rhs);
        }
        assert!(minimal_k0(1.0, 0.75, 0.0).is_err());
    }

    #[test]
    fn heuristic_condition_is_advisory() {
        let s = StepSchedule::new(100.0, minimal_k0(100.0, 0.75, 0.05).unwrap(), 0.75).unwrap();
        let r = validate_schedule(&s, 0.05, 2.0, DEFAULT_SLACK);
        assert!(r.passed());
        assert!(!r.heuristic_passed());
    }

    fn hand_instance() -> (Dmdp, FeatureMap) {
        let m = Dmdp::new(2, 1, vec![0.5, 0.5, 0.5, 0.5], vec![0.3, 0.9], 0.9).unwrap();
        let f = FeatureMap::new(2, 1, 2, vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        (m, f)
    }

    #[test]
    fn q_update_examples() {
        let (m, f) = hand_instance();
        let theta = [0.1, -0.2];
        let z = Triple { s: 0, a: 0, next: 1 };
        assert_eq!(q_update(&theta, z, 0.0, &f, &m, lam()), theta.to_vec());
        let out = q_update(&theta, z, 0.1, &f, &m, lam());
        assert_relative_eq!(out[0], 0.1 + 0.1 * 0.11, epsilon = 1e-15);
        assert_eq!(out[1], -0.2);
        let dr = oracle::drift(&theta, z, &f, &m, lam());
        assert_eq!(out[0], theta[0] + 0.1 * dr[0]);
    }

    #[test]
    fn q_update_fixed_for_myopic_tabular_reward() {
        let m = random_mdp(3, 2, 2, 0.5, 1).unwrap().with_discount(0.0).unwrap();
        let f = build_features(FeatureKind::Tabular, &m, 6, 0).unwrap();
        let theta = m.rewards().to_vec();
        for z in 0..m.n_triples() {
            assert_eq!(q_update(&theta, m.triple(z), 0.7, &f, &m, lam()), theta);
        }
    }

    fn small() -> (Dmdp, ChainKernel, FeatureMap) {
        let m = random_mdp(4, 2, 2, 0.5, 11).unwrap();
        let c = chain_kernel(&m, &Policy::uniform(4, 2)).unwrap();
        let f = build_features(FeatureKind::RandomProjection, &m, 3, 11).unwrap();
        (m, c, f)
    }

    fn cfg(n: u64) -> RunConfig {
        RunConfig::new(n, 5, lam(), StepSchedule::new(1.0, 10.0, 0.75).unwrap())
    }

    #[test]
    fn zero_steps_returns_init() {
        let (m, c, f) = small();
        let mut config = cfg(0);
        config.init_theta = Some(vec![1.0, 2.0, 3.0]);
        let r = run(&m, &c, &f, &config, &ScheduleCheck::Override).unwrap();
        assert_eq!(r.final_theta, vec![1.0, 2.0, 3.0]);
        assert!(r.pr_average.is_none() && r.checkpoints.is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let (m, c, f) = small();
        let a = run(&m, &c, &f, &cfg(5000), &ScheduleCheck::Override).unwrap();
        let b = run(&m, &c, &f, &cfg(5000), &ScheduleCheck::Override).unwrap();
        assert_eq!(a, b);
        let mut other = cfg(5000);
        other.replication_id = 1;
        assert_ne!(run(&m, &c, &f, &other, &ScheduleCheck::Override).unwrap().final_theta, a.final_theta);
    }

    #[test]
    fn streaming_average_matches_offline_mean() {
        let (m, c, f) = small();
        let mut config = cfg(20_000);
        config.retain_iterates = true;
        let r = run(&m, &c, &f, &config, &ScheduleCheck::Override).unwrap();
        let its = r.iterates.as_ref().unwrap();
        for cp in &r.checkpoints {
            for i in 0..3 {
                let mean = its[..cp.t as usize].iter().map(|v| v[i]).sum::<f64>() / cp.t as f64;
                assert!((mean - cp.average[i]).abs() <= 1e-12);
            }
            assert_eq!(cp.theta, its[cp.t as usize - 1]);
        }
        assert_eq!(r.checkpoints.last().unwrap().t, 20_000);
    }

    #[test]
    fn replayed_trajectory_reproduces_run() {
        let (m, c, f) = small();
        let config = cfg(300);
        let r = run(&m, &c, &f, &config, &ScheduleCheck::Override).unwrap();
        let mut sampler =
            TrajectorySampler::new(&m, c.behavior(), Start::Stationary(&c), replication_rng(5, 0)).unwrap();
        let mut theta = vec![0.0; 3];
        for t in 0..300 {
            theta = q_update(&theta, sampler.next_triple(), config.schedule.step_size(t), &f, &m, lam());
        }
        assert_eq!(theta, r.final_theta);
    }

    #[test]
    fn divergence_reports_step() {
        let (m, c, f) = small();
        let mut config = cfg(1000);
        config.schedule = StepSchedule::new(1e300, 1.0, 0.75).unwrap();
        config.init_theta = Some(vec![1e300; 3]);
        match run(&m, &c, &f, &config, &ScheduleCheck::Override) {
            Err(Error::Divergence { step, last_finite }) => {
                assert!(step >= 1);
                assert!(last_finite.iter().all(|v| v.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn failed_validation_blocks_run() {
        let (m, c, f) = small();
        let config = cfg(10);
        let report = validate_schedule(&config.schedule, 0.01, 2.0, DEFAULT_SLACK);
        assert!(matches!(run(&m, &c, &f, &config, &ScheduleCheck::Validated(report)), Err(Error::Assumption(_))));
    }

    #[test]
    fn checkpoint_validation() {
        let (m, c, f) = small();
        let mut config = cfg(100);
        config.checkpoints = vec![5, 5];
        assert!(run(&m, &c, &f, &config, &ScheduleCheck::Override).is_err());
        config.checkpoints = vec![101];
        assert!(run(&m, &c, &f, &config, &ScheduleCheck::Override).is_err());
    }

    #[test]
    fn geometric_grid_shape() {
        let g = geometric_grid(10, 100_000, 32);
        assert_eq!(g.first(), Some(&10));
        assert_eq!(g.last(), Some(&100_000));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(geometric_grid(10, 5, 32), vec![5]);
        assert!(geometric_grid(10, 0, 32).is_empty());
    }
}
