//! Monte-Carlo harness: replications, moment curves, standardized errors,
//! the convex-distance surrogate, coverage and rate fits.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg::{self, Mat};
use crate::mdp::{ChainKernel, Dmdp};
use crate::oracle::SoftFixedPoint;
use crate::parallel::Parallelism;
use crate::sa::{self, RunConfig, RunResult, ScheduleCheck};

/// Independent runs sharing one configuration, stored by replication id.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicationBatch {
    results: Vec<RunResult>,
    pub config: RunConfig,
    pub master_seed: u64,
}

impl ReplicationBatch {
    /// Sorts by replication id so every statistic is order independent.
    pub fn new(mut results: Vec<RunResult>, config: RunConfig, master_seed: u64) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::invalid("a batch needs at least one replication"));
        }
        results.sort_by_key(|r| r.replication_id);
        if results.windows(2).any(|w| w[0].replication_id == w[1].replication_id) {
            return Err(Error::invalid("duplicate replication id"));
        }
        Ok(ReplicationBatch { results, config, master_seed })
    }

    pub fn results(&self) -> &[RunResult] {
        &self.results
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    /// The first `n` replications by id.
    pub fn truncated(&self, n: usize) -> Self {
        ReplicationBatch {
            results: self.results[..n.clamp(1, self.results.len())].to_vec(),
            config: self.config.clone(),
            master_seed: self.master_seed,
        }
    }
}

/// Runs `n_reps` replications with streams `(master_seed, 0..n_reps)`.
#[allow(clippy::too_many_arguments)]
pub fn replicate(
    mdp: &Dmdp,
    chain: &ChainKernel,
    features: &FeatureMap,
    config: &RunConfig,
    check: &ScheduleCheck,
    n_reps: usize,
    master_seed: u64,
    par: Parallelism,
) -> Result<ReplicationBatch> {
    if n_reps == 0 {
        return Err(Error::invalid("at least one replication is required"));
    }
    let outcomes = par.map_collect(n_reps, |i| {
        let mut c = config.clone();
        c.seed = master_seed;
        c.replication_id = i as u64;
        sa::run(mdp, chain, features, &c, check)
    });
    let mut results = Vec::with_capacity(n_reps);
    let mut failed = Vec::new();
    for (i, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(r) => results.push(r),
            Err(Error::Divergence { .. }) => failed.push(i as u64),
            Err(e) => return Err(e),
        }
    }
    if !failed.is_empty() {
        return Err(Error::BatchDivergence { failed });
    }
    let mut echo = config.clone();
    echo.seed = master_seed;
    echo.replication_id = 0;
    ReplicationBatch::new(results, echo, master_seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentCurve {
    pub p: f64,
    pub checkpoints: Vec<u64>,
    /// `(mean ||theta_t - theta_star||^{2p})^{1/(2p)}` per checkpoint.
    pub values: Vec<f64>,
    pub fit_range: (u64, u64),
    pub fitted_slope: f64,
    pub slope_stderr: f64,
    /// Fewer than `100 * 2p` replications.
    pub underpowered: bool,
}

/// Empirical `L^{2p}` norm of the last-iterate error at every checkpoint and
/// its log-log slope over `t_min <= t <= t_max`.
pub fn moment_curve(
    batch: &ReplicationBatch,
    theta_star: &[f64],
    p: f64,
    t_min: u64,
    t_max: u64,
) -> Result<MomentCurve> {
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("moment order p = {p} must be at least 1")));
    }
    let first = &batch.results()[0];
    let ts: Vec<u64> = first.checkpoints.iter().map(|c| c.t).collect();
    if batch.results().iter().any(|r| r.checkpoints.iter().map(|c| c.t).ne(ts.iter().cloned())) {
        return Err(Error::invalid("replications disagree on the checkpoint grid"));
    }
    let n = batch.len() as f64;
    let values: Vec<f64> = (0..ts.len())
        .map(|k| {
            let total: f64 = batch
                .results()
                .iter()
                .map(|r| {
                    let theta = &r.checkpoints[k].theta;
                    let sq: f64 = theta.iter().zip(theta_star).map(|(a, b)| (a - b) * (a - b)).sum();
                    sq.powf(p)
                })
                .sum();
            (total / n).powf(1.0 / (2.0 * p))
        })
        .collect();
    let (x, y): (Vec<f64>, Vec<f64>) = ts
        .iter()
        .zip(&values)
        .filter(|(t, v)| **t >= t_min && **t <= t_max && **v > 0.0)
        .map(|(t, v)| ((*t as f64).ln(), v.ln()))
        .unzip();
    if x.len() < 2 {
        return Err(Error::invalid(format!("fewer than two checkpoints in [{t_min}, {t_max}]")));
    }
    let (slope, stderr) = linalg::ols_slope(&x, &y);
    Ok(MomentCurve {
        p,
        checkpoints: ts,
        values,
        fit_range: (t_min, t_max),
        fitted_slope: slope,
        slope_stderr: stderr,
        underpowered: n < 200.0 * p,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StandardizedErrors {
    /// One row per replication: `sqrt(n) Sigma^{-1/2} (theta_bar_n - theta_star)`.
    pub w: Mat,
    /// Raw scaled errors `sqrt(n) (theta_bar_n - theta_star)`.
    pub scaled: Mat,
    /// `Sigma_inf` had eigenvalues below the floor.
    pub floored: bool,
}

pub const EIGEN_FLOOR: f64 = 1e-14;

/// Averages at horizon `n`, read from each run's checkpoint at `t = n`.
pub fn averaged_errors(batch: &ReplicationBatch, theta_star: &[f64], n: u64) -> Result<Mat> {
    let d = theta_star.len();
    let mut out = Mat::zeros(batch.len(), d);
    for (i, r) in batch.results().iter().enumerate() {
        let cp = r
            .checkpoint(n)
            .ok_or_else(|| Error::invalid(format!("replication {} has no checkpoint at n = {n}", r.replication_id)))?;
        for j in 0..d {
            out[(i, j)] = cp.average[j] - theta_star[j];
        }
    }
    Ok(out)
}

pub fn standardized_errors(
    batch: &ReplicationBatch,
    fixed_point: &SoftFixedPoint,
    n: u64,
) -> Result<StandardizedErrors> {
    let scaled = averaged_errors(batch, &fixed_point.theta_star, n)? * (n as f64).sqrt();
    Ok(standardize(scaled, &fixed_point.sigma_inf))
}

/// Applies `Sigma^{-1/2}` to each row of `scaled`.
pub fn standardize(scaled: Mat, sigma: &Mat) -> StandardizedErrors {
    let (root, floored) = linalg::inverse_sqrt(sigma, EIGEN_FLOOR);
    StandardizedErrors { w: &scaled * root, scaled, floored }
}

/// `(1/N) sum x x^T`, centered at zero.
pub fn second_moment(x: &Mat) -> Mat {
    linalg::symmetrize(&(x.transpose() * x / x.nrows() as f64))
}

/// `||S - Sigma||_F / ||Sigma||_F` with `S` the second moment of the rows of `scaled`.
pub fn cov_rel_error(scaled: &Mat, sigma: &Mat) -> f64 {
    linalg::frobenius(&(second_moment(scaled) - sigma)) / linalg::frobenius(sigma)
}

const REFERENCE_DRAWS: usize = 1_000_000;
const REFERENCE_SEED: u64 = 0x5eed_c0de;

static REFERENCE: Lazy<Mutex<HashMap<usize, Arc<Vec<f64>>>>> = Lazy::new(|| Mutex::new(HashMap::new()));

/// Row-major `REFERENCE_DRAWS x d` standard Gaussian sample, cached per dimension.
fn reference_sample(d: usize) -> Arc<Vec<f64>> {
    let mut cache = REFERENCE.lock().unwrap_or_else(|e| e.into_inner());
    cache
        .entry(d)
        .or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(REFERENCE_SEED);
            Arc::new((0..REFERENCE_DRAWS * d).map(|_| rng.sample(StandardNormal)).collect())
        })
        .clone()
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = linalg::norm(&u);
        if n > 1e-12 {
            return u.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Kolmogorov distance between the empirical law of `sample` and a
/// continuous CDF, i.e. the sup over all thresholds.
fn ks_against<F: Fn(f64) -> f64>(mut sample: Vec<f64>, cdf: F) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    let mut worst: f64 = 0.0;
    let mut i = 0;
    while i < sample.len() {
        let mut j = i;
        while j + 1 < sample.len() && sample[j + 1] == sample[i] {
            j += 1;
        }
        let f = cdf(sample[i]);
        worst = worst.max((f - i as f64 / n).abs()).max(((j + 1) as f64 / n - f).abs());
        i = j + 1;
    }
    worst
}

/// Kolmogorov distance between two empirical laws; `reference` must be sorted.
fn ks_against_sorted(sample: Vec<f64>, reference: &[f64]) -> f64 {
    let m = reference.len() as f64;
    ks_against(sample, |x| reference.partition_point(|r| *r <= x) as f64 / m)
}

/// Lower bound on the convex distance between the empirical law of the rows
/// of `w` and the standard Gaussian.
///
/// The family holds `m` half-spaces `{u^T x <= c}` with `u` uniform on the
/// sphere (every threshold `c` is scanned) and `ceil(m/16)` centered
/// ellipsoids `{x^T Q x <= r}` with `Q = B^T B`, `B` Gaussian (every radius is
/// scanned). Directions and ellipsoids come from separate streams of `seed`,
/// so a larger `m` only adds sets. Ellipsoid probabilities use 10^6 reference
/// Gaussian draws from a fixed internal seed.
pub fn convex_distance_surrogate(w: &Mat, m: usize, seed: u64, par: Parallelism) -> f64 {
    let (n, d) = (w.nrows(), w.ncols());
    if m == 0 || n == 0 || d == 0 {
        return 0.0;
    }
    let mut dir_rng = sa::replication_rng(seed, 0);
    let dirs: Vec<Vec<f64>> = (0..m).map(|_| unit_direction(&mut dir_rng, d)).collect();
    let mut ell_rng = sa::replication_rng(seed, 1);
    let forms: Vec<Mat> = (0..m.div_ceil(16))
        .map(|_| {
            let b = Mat::from_fn(d, d, |_, _| ell_rng.sample(StandardNormal));
            b.transpose() * b
        })
        .collect();

    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let half_spaces = par.map_collect(dirs.len(), |k| {
        let u = &dirs[k];
        let proj: Vec<f64> = (0..n).map(|i| (0..d).map(|j| w[(i, j)] * u[j]).sum()).collect();
        ks_against(proj, |x| normal.cdf(x))
    });
    let reference = if forms.is_empty() { None } else { Some(reference_sample(d)) };
    let ellipsoids = par.map_collect(forms.len(), |k| {
        let q = &forms[k];
        let quad = |x: &[f64]| -> f64 {
            let mut acc = 0.0;
            for a in 0..d {
                let mut row = 0.0;
                for b in 0..d {
                    row += q[(a, b)] * x[b];
                }
                acc += x[a] * row;
            }
            acc
        };
        let refs = reference.as_ref().expect("reference sample");
        let mut radii: Vec<f64> = refs.chunks_exact(d).map(quad).collect();
        radii.sort_by(f64::total_cmp);
        let sample: Vec<f64> = (0..n)
            .map(|i| {
                let row: Vec<f64> = (0..d).map(|j| w[(i, j)]).collect();
                quad(&row)
            })
            .collect();
        ks_against_sorted(sample, &radii)
    });
    half_spaces.into_iter().chain(ellipsoids).fold(0.0, f64::max).min(1.0)
}

/// Fraction of rows with `||w||^2` below the chi-square quantile at each level.
pub fn coverage_test(w: &Mat, levels: &[f64]) -> Result<Vec<(f64, f64)>> {
    let d = w.ncols();
    let chi = ChiSquared::new(d as f64).map_err(|e| Error::invalid(format!("chi-square with {d} dof: {e}")))?;
    levels
        .iter()
        .map(|&q| {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::invalid(format!("coverage level {q} outside (0, 1]")));
            }
            let radius = if q == 1.0 { f64::INFINITY } else { chi.inverse_cdf(q) };
            let inside = w.row_iter().filter(|r| r.norm_squared() <= radius).count();
            Ok((q, inside as f64 / w.nrows().max(1) as f64))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub stderr: f64,
    /// Horizons dropped because their distance was zero.
    pub excluded: Vec<u64>,
}

/// Log-log slope of distance against horizon.
pub fn rate_fit(points: &[(u64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::invalid("rate fit needs at least three points"));
    }
    if points.windows(2).any(|w| w[0].0 >= w[1].0) || points[0].0 == 0 {
        return Err(Error::invalid("horizons must be positive and strictly increasing"));
    }
    let excluded: Vec<u64> = points.iter().filter(|p| p.1 <= 0.0).map(|p| p.0).collect();
    let (x, y): (Vec<f64>, Vec<f64>) =
        points.iter().filter(|p| p.1 > 0.0).map(|&(n, v)| ((n as f64).ln(), v.ln())).unzip();
    if x.len() < 2 {
        return Err(Error::invalid("fewer than two positive distances"));
    }
    let (slope, stderr) = linalg::ols_slope(&x, &y);
    Ok(RateFit { slope, stderr, excluded })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub n: u64,
    pub replications: usize,
    #[serde(skip)]
    pub w_samples: Mat,
    pub cov_rel_error: f64,
    pub dc_hat: f64,
    pub coverage: Vec<(f64, f64)>,
    pub direction_count: usize,
    pub sigma_floored: bool,
}

pub fn normality_report(
    batch: &ReplicationBatch,
    fixed_point: &SoftFixedPoint,
    n: u64,
    directions: usize,
    levels: &[f64],
    seed: u64,
    par: Parallelism,
) -> Result<NormalityReport> {
    let se = standardized_errors(batch, fixed_point, n)?;
    Ok(NormalityReport {
        n,
        replications: batch.len(),
        cov_rel_error: cov_rel_error(&se.scaled, &fixed_point.sigma_inf),
        dc_hat: convex_distance_surrogate(&se.w, directions, seed, par),
        coverage: coverage_test(&se.w, levels)?,
        direction_count: directions,
        sigma_floored: se.floored,
        w_samples: se.w,
    })
}
