//! Experiment configuration: a TOML document with documented defaults.

use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, KappaMethod};
use crate::parallel::Parallelism;

/// A numeric parameter that may be left for the pipeline to resolve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Auto {
    Auto,
    Value(f64),
}

impl Serialize for Auto {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Auto::Auto => s.serialize_str("auto"),
            Auto::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Auto {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Auto::Value(v)),
            Raw::Int(v) => Ok(Auto::Value(v as f64)),
            Raw::Str(s) if s == "auto" => Ok(Auto::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"auto\", got \"{s}\""))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    /// Load the MDP from a JSON file instead of generating it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_states: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_actions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branching: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum BehaviorSpec {
    Uniform,
    /// Row-major `pi(a|s)`.
    Table {
        probs: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    /// Defaults to `S*A` for tabular features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub omega: f64,
    pub c0: Auto,
    pub k0: Auto,
    /// With `c0 = "auto"`, the step size at `t = 0` once `k0` is minimal.
    pub alpha0_target: f64,
    /// Stand-in for the unknown constant in the advisory `alpha_0` bound.
    pub slack: f64,
    /// Moment order used by the advisory `alpha_0` bound.
    pub p: f64,
    /// Run even if the schedule fails validation.
    pub allow_override: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KappaSpec {
    pub method: KappaMethod,
    pub restarts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub tol: f64,
    pub max_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Averaging horizons; the longest one is the run length.
    pub n_grid: Vec<u64>,
    pub replications: usize,
    /// Size of the geometric checkpoint grid.
    pub checkpoints: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_theta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentSpec {
    pub p: Vec<f64>,
    /// Replications used for moment curves.
    pub replications: usize,
    pub t_min: u64,
    /// Defaults to the run length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<u64>,
    /// When set, moment curves come from a separate batch whose schedule
    /// is resolved from this target; otherwise they use the leading
    /// replications of the main run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha0_target: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltSpec {
    pub directions: usize,
    pub levels: Vec<f64>,
}

/// Pass/fail bands used by the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub moment_slope: [f64; 2],
    pub cov_rel_error: f64,
    pub rate_slope: [f64; 2],
    pub coverage_level: f64,
    pub coverage_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub gamma: f64,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub mdp: MdpSpec,
    pub behavior: BehaviorSpec,
    pub features: FeatureSpec,
    pub schedule: ScheduleSpec,
    pub kappa: KappaSpec,
    pub solver: SolverSpec,
    pub run: RunSpec,
    pub moments: MomentSpec,
    pub clt: CltSpec,
    pub tolerances: Tolerances,
}

impl ExperimentConfig {
    pub fn parallelism(&self) -> Parallelism {
        Parallelism::from_hint(self.threads)
    }

    pub fn n_max(&self) -> u64 {
        self.run.n_grid.iter().cloned().max().unwrap_or(0)
    }

    pub fn moment_t_max(&self) -> u64 {
        self.moments.t_max.unwrap_or_else(|| self.n_max())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

// Partial documents: every key optional, so missing keys can be listed together.

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    master_seed: Option<u64>,
    gamma: Option<f64>,
    lambda: Option<f64>,
    output_dir: Option<PathBuf>,
    threads: Option<usize>,
    mdp: Option<MdpSpec>,
    behavior: Option<BehaviorSpec>,
    features: Option<RawFeatures>,
    schedule: Option<RawSchedule>,
    kappa: Option<RawKappa>,
    solver: Option<RawSolver>,
    run: Option<RawRun>,
    moments: Option<RawMoments>,
    clt: Option<RawClt>,
    tolerances: Option<RawTolerances>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawFeatures {
    kind: Option<FeatureKind>,
    dim: Option<usize>,
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    omega: Option<f64>,
    c0: Option<Auto>,
    k0: Option<Auto>,
    alpha0_target: Option<f64>,
    slack: Option<f64>,
    p: Option<f64>,
    allow_override: Option<bool>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawKappa {
    method: Option<KappaMethod>,
    restarts: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    tol: Option<f64>,
    max_iters: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawRun {
    n_grid: Option<Vec<u64>>,
    replications: Option<usize>,
    checkpoints: Option<usize>,
    init_theta: Option<Vec<f64>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawMoments {
    p: Option<Vec<f64>>,
    replications: Option<usize>,
    t_min: Option<u64>,
    t_max: Option<u64>,
    alpha0_target: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawClt {
    directions: Option<usize>,
    levels: Option<Vec<f64>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTolerances {
    moment_slope: Option<[f64; 2]>,
    cov_rel_error: Option<f64>,
    rate_slope: Option<[f64; 2]>,
    coverage_level: Option<f64>,
    coverage_tol: Option<f64>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses, fills defaults and validates.
///
/// Required: `master_seed`, and under `[mdp]` either `path` or both
/// `n_states` and `n_actions`. Defaults: `gamma = 0.5`, `lambda = 0.5`,
/// uniform behavior, tabular features, `omega = 0.75`, `c0 = 1`,
/// `k0 = "auto"`.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;

    let mut missing = Vec::new();
    if raw.master_seed.is_none() {
        missing.push("master_seed");
    }
    let mdp = raw.mdp.unwrap_or(MdpSpec { path: None, n_states: None, n_actions: None, branching: None, seed: None });
    if mdp.path.is_none() {
        if mdp.n_states.is_none() {
            missing.push("mdp.n_states");
        }
        if mdp.n_actions.is_none() {
            missing.push("mdp.n_actions");
        }
    }
    if !missing.is_empty() {
        return Err(config_err(format!("missing required keys: {}", missing.join(", "))));
    }
    let master_seed = raw.master_seed.unwrap();

    let mdp = if mdp.path.is_some() {
        if mdp.n_states.is_some() || mdp.n_actions.is_some() || mdp.branching.is_some() || mdp.seed.is_some() {
            return Err(config_err("mdp.path excludes generator keys"));
        }
        mdp
    } else {
        let ns = mdp.n_states.unwrap();
        MdpSpec {
            path: None,
            n_states: Some(ns),
            n_actions: mdp.n_actions,
            branching: Some(mdp.branching.unwrap_or(ns.min(2))),
            seed: Some(mdp.seed.unwrap_or(master_seed)),
        }
    };

    let f = raw.features.unwrap_or_default();
    let features =
        FeatureSpec { kind: f.kind.unwrap_or(FeatureKind::Tabular), dim: f.dim, seed: f.seed.unwrap_or(master_seed) };

    let s = raw.schedule.unwrap_or_default();
    let schedule = ScheduleSpec {
        omega: s.omega.unwrap_or(0.75),
        c0: s.c0.unwrap_or(Auto::Value(1.0)),
        k0: s.k0.unwrap_or(Auto::Auto),
        alpha0_target: s.alpha0_target.unwrap_or(1.0),
        slack: s.slack.unwrap_or(crate::sa::DEFAULT_SLACK),
        p: s.p.unwrap_or(2.0),
        allow_override: s.allow_override.unwrap_or(false),
    };

    let k = raw.kappa.unwrap_or_default();
    let kappa =
        KappaSpec { method: k.method.unwrap_or(KappaMethod::ExactEnumeration), restarts: k.restarts.unwrap_or(32) };

    let sv = raw.solver.unwrap_or_default();
    let solver = SolverSpec { tol: sv.tol.unwrap_or(1e-10), max_iters: sv.max_iters.unwrap_or(10_000) };

    let r = raw.run.unwrap_or_default();
    let run = RunSpec {
        n_grid: r.n_grid.unwrap_or_else(|| vec![1_000, 10_000, 100_000]),
        replications: r.replications.unwrap_or(200),
        checkpoints: r.checkpoints.unwrap_or(32),
        init_theta: r.init_theta,
    };

    let m = raw.moments.unwrap_or_default();
    let moments = MomentSpec {
        p: m.p.unwrap_or_else(|| vec![1.0]),
        replications: m.replications.unwrap_or(run.replications),
        t_min: m.t_min.unwrap_or(1_000),
        t_max: m.t_max,
        alpha0_target: m.alpha0_target,
    };

    let c = raw.clt.unwrap_or_default();
    let clt = CltSpec {
        directions: c.directions.unwrap_or(512),
        levels: c.levels.unwrap_or_else(|| vec![0.5, 0.8, 0.9, 0.95]),
    };

    let t = raw.tolerances.unwrap_or_default();
    let tolerances = Tolerances {
        moment_slope: t.moment_slope.unwrap_or([-0.55, -0.25]),
        cov_rel_error: t.cov_rel_error.unwrap_or(0.20),
        rate_slope: t.rate_slope.unwrap_or([-0.45, -0.10]),
        coverage_level: t.coverage_level.unwrap_or(0.90),
        coverage_tol: t.coverage_tol.unwrap_or(0.03),
    };

    let config = ExperimentConfig {
        master_seed,
        gamma: raw.gamma.unwrap_or(0.5),
        lambda: raw.lambda.unwrap_or(0.5),
        output_dir: raw.output_dir,
        threads: raw.threads,
        mdp,
        behavior: raw.behavior.unwrap_or(BehaviorSpec::Uniform),
        features,
        schedule,
        kappa,
        solver,
        run,
        moments,
        clt,
        tolerances,
    };
    validate(&config)?;
    Ok(config)
}

fn validate(c: &ExperimentConfig) -> Result<()> {
    let s = &c.schedule;
    if !(s.omega > 0.5 && s.omega < 1.0) {
        return Err(config_err(format!(
            "schedule.omega = {} violates the step-size assumption: omega must lie in the open interval (1/2, 1)",
            s.omega
        )));
    }
    if !(c.lambda > 0.0 && c.lambda.is_finite()) {
        return Err(config_err(format!("lambda = {} must be positive", c.lambda)));
    }
    if !(c.gamma > 0.0 && c.gamma < 1.0) {
        return Err(config_err(format!("gamma = {} must lie in (0, 1)", c.gamma)));
    }
    match (s.c0, s.k0) {
        (Auto::Value(v), _) if !(v > 0.0 && v.is_finite()) => {
            return Err(config_err(format!("schedule.c0 = {v} must be positive")));
        }
        (_, Auto::Value(v)) if !(v > 0.0 && v.is_finite()) => {
            return Err(config_err(format!("schedule.k0 = {v} must be positive")));
        }
        (Auto::Auto, Auto::Value(_)) => {
            return Err(config_err("schedule.c0 = \"auto\" requires schedule.k0 = \"auto\""));
        }
        _ => {}
    }
    if !(s.alpha0_target > 0.0) || !(s.slack > 0.0) || !(s.p >= 1.0) {
        return Err(config_err("schedule.alpha0_target and schedule.slack must be positive, schedule.p at least 1"));
    }
    if let Some(ns) = c.mdp.n_states {
        let na = c.mdp.n_actions.unwrap_or(0);
        if ns == 0 || na == 0 {
            return Err(config_err("mdp.n_states and mdp.n_actions must be positive"));
        }
        let b = c.mdp.branching.unwrap_or(1);
        if b == 0 || b > ns {
            return Err(config_err(format!("mdp.branching = {b} must lie in 1..={ns}")));
        }
    }
    if c.features.dim == Some(0) {
        return Err(config_err("features.dim must be positive"));
    }
    if c.kappa.method == KappaMethod::GammaZero {
        return Err(config_err("kappa.method = \"gamma-zero\" needs gamma = 0, which experiments exclude"));
    }
    if !(c.solver.tol > 0.0) || c.solver.max_iters == 0 {
        return Err(config_err("solver.tol and solver.max_iters must be positive"));
    }
    let grid = &c.run.n_grid;
    if grid.is_empty() || grid[0] == 0 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_err("run.n_grid must be positive and strictly increasing"));
    }
    if c.run.replications == 0 {
        return Err(config_err("run.replications must be positive"));
    }
    match c.moments.alpha0_target {
        None => {
            if c.moments.replications == 0 || c.moments.replications > c.run.replications {
                return Err(config_err("moments.replications must lie in 1..=run.replications"));
            }
            if c.moment_t_max() > c.n_max() {
                return Err(config_err("moments.t_max must not exceed max(run.n_grid)"));
            }
        }
        Some(a) => {
            if !(a > 0.0 && a.is_finite()) {
                return Err(config_err("moments.alpha0_target must be positive"));
            }
            if s.c0 != Auto::Auto {
                return Err(config_err("moments.alpha0_target requires schedule.c0 = \"auto\""));
            }
            if c.moments.replications == 0 {
                return Err(config_err("moments.replications must be positive"));
            }
        }
    }
    if c.moments.p.is_empty() || c.moments.p.iter().any(|p| !(*p >= 1.0)) {
        return Err(config_err("moments.p must be a nonempty list of orders >= 1"));
    }
    if c.moments.t_min == 0 || c.moments.t_min > c.moment_t_max() {
        return Err(config_err("moments window must satisfy 1 <= t_min <= t_max"));
    }
    if c.clt.levels.iter().any(|q| !(*q > 0.0 && *q <= 1.0)) {
        return Err(config_err("clt.levels must lie in (0, 1]"));
    }
    if c.threads == Some(0) {
        return Err(config_err("threads must be positive when given"));
    }
    Ok(())
}
