//! Stage orchestration: gen, certify, solve, run, clt, report.
//!
//! Every stage reads its inputs from the output directory, so stages can be
//! run one at a time from the command line or all together.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Auto, BehaviorSpec, ExperimentConfig};
use super::manifest::{sha256_bytes, FixedPointSummary, Manifest};
use super::{fmt_f64, read_json, write_json};
use crate::clt::{self, MomentCurve, NormalityReport, RateFit, ReplicationBatch};
use crate::error::{Error, Result};
use crate::features::{build_features, certify_kappa, FeatureKind, FeatureMap, KappaCertificate};
use crate::linalg;
use crate::mdp::{chain_kernel, random_mdp, ChainKernel, Dmdp, MixingTime, Policy};
use crate::oracle::{SoftFixedPoint, Temperature};
use crate::parallel::Parallelism;
use crate::sa::{self, Checkpoint, RunConfig, RunResult, ScheduleCheck, ScheduleReport, StepSchedule};

pub const CONFIG_FILE: &str = "config.toml";
pub const MDP_FILE: &str = "mdp.json";
pub const BEHAVIOR_FILE: &str = "behavior.json";
pub const FEATURES_FILE: &str = "features.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";
pub const FIXED_POINT_FILE: &str = "fixed_point.json";
pub const RUNS_FILE: &str = "runs.csv";
pub const MOMENT_RUNS_FILE: &str = "moment_runs.csv";
pub const MOMENTS_FILE: &str = "moments.csv";
pub const MOMENT_CURVES_FILE: &str = "moment_curves.json";
pub const CLT_FILE: &str = "clt.csv";
pub const NORMALITY_FILE: &str = "normality.json";
pub const REPORT_FILE: &str = "report.md";

/// Offset separating the surrogate's random family from trajectory streams.
const SURROGATE_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;
/// Offset separating the moment batch from the main batch.
const MOMENT_SEED_OFFSET: u64 = 0xd1b5_4a32_d192_ed03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Gen,
    Certify,
    Solve,
    Run,
    Clt,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Gen, Stage::Certify, Stage::Solve, Stage::Run, Stage::Clt, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Certify => "certify",
            Stage::Solve => "solve",
            Stage::Run => "run",
            Stage::Clt => "clt",
            Stage::Report => "report",
        }
    }

    fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::Gen => &[],
            Stage::Certify => &[MDP_FILE, BEHAVIOR_FILE, FEATURES_FILE],
            Stage::Solve => &[MDP_FILE, BEHAVIOR_FILE, FEATURES_FILE, CERTIFICATE_FILE],
            Stage::Run => &[MDP_FILE, BEHAVIOR_FILE, FEATURES_FILE, CERTIFICATE_FILE],
            Stage::Clt => &[RUNS_FILE, MOMENT_RUNS_FILE, FIXED_POINT_FILE, CERTIFICATE_FILE],
            Stage::Report => &[],
        }
    }
}

/// Output of the certify stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub kappa: KappaCertificate,
    pub mixing_time: Option<usize>,
    pub mixing_horizon: usize,
    pub schedule: StepSchedule,
    pub schedule_report: ScheduleReport,
    /// Per averaging horizon, with `p = log(d n)`, advisory.
    pub per_n_reports: Vec<(u64, ScheduleReport)>,
    pub schedule_override: bool,
    /// Schedule of the separate moment batch, when configured.
    #[serde(default)]
    pub moment_schedule: Option<(StepSchedule, ScheduleReport)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalitySummary {
    pub reports: Vec<NormalityReport>,
    pub rate_fit: Option<RateFit>,
    pub rate_fit_error: Option<String>,
}

pub struct Pipeline {
    config: ExperimentConfig,
    out: PathBuf,
    par: Parallelism,
}

impl Pipeline {
    /// Creates the output directory if needed.
    pub fn new(config: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        let out = out.into();
        fs::create_dir_all(&out)?;
        let par = config.parallelism();
        Ok(Pipeline { config, out, par })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    /// The config as echoed into data files: runtime-only keys removed.
    fn echo(&self) -> ExperimentConfig {
        let mut c = self.config.clone();
        c.output_dir = None;
        c.threads = None;
        c
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn inputs_hash(&self, stage: Stage) -> String {
        let mut buf = self.echo().to_toml().into_bytes();
        for name in stage.inputs() {
            buf.extend_from_slice(name.as_bytes());
            buf.extend(fs::read(self.path(name)).unwrap_or_default());
        }
        sha256_bytes(&buf)
    }

    /// Runs one stage, records its wall time and refreshes the manifest.
    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        let started = Instant::now();
        let outcome = match stage {
            Stage::Gen => self.gen(),
            Stage::Certify => self.certify().map(|_| ()),
            Stage::Solve => self.solve().map(|_| ()),
            Stage::Run => self.run().map(|_| ()),
            Stage::Clt => self.clt().map(|_| ()),
            Stage::Report => super::emit_report(&self.out).map(|_| ()),
        };
        let elapsed = started.elapsed().as_secs_f64();
        outcome.map_err(|e| Error::Stage {
            stage: stage.name(),
            inputs_hash: self.inputs_hash(stage),
            source: Box::new(e),
        })?;
        let mut manifest = match Manifest::load(&self.out)? {
            Some(m) if m.config == self.echo() => m,
            _ => Manifest::new(self.echo()),
        };
        manifest.stage_wall_times.insert(stage.name().to_string(), elapsed);
        manifest.threads = self.config.threads;
        self.fill_manifest(&mut manifest)?;
        manifest.refresh_inventory(&self.out)?;
        manifest.save(&self.out)
    }

    pub fn run_all(&self) -> Result<Manifest> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        Ok(Manifest::load(&self.out)?.expect("manifest written"))
    }

    fn fill_manifest(&self, m: &mut Manifest) -> Result<()> {
        if let Ok(cert) = read_json::<Certification>(&self.path(CERTIFICATE_FILE)) {
            m.kappa = Some(cert.kappa);
            m.mixing_time = cert.mixing_time;
            m.schedule = Some(cert.schedule);
        }
        if let Ok(fp) = read_json::<SoftFixedPoint>(&self.path(FIXED_POINT_FILE)) {
            m.fixed_point = Some(FixedPointSummary {
                g_condition: linalg::condition_number(&fp.g),
                theta_star: fp.theta_star,
                residual: fp.residual,
                solver_iters: fp.solver_iters,
            });
        }
        Ok(())
    }

    fn lambda(&self) -> Result<Temperature> {
        Temperature::new(self.config.lambda).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the config echo, the MDP, the behavior policy and the features.
    pub fn gen(&self) -> Result<()> {
        let c = &self.config;
        fs::write(self.path(CONFIG_FILE), self.echo().to_toml())?;
        let mdp = match &c.mdp.path {
            Some(p) => read_json::<Dmdp>(p)?.with_discount(c.gamma)?,
            None => random_mdp(
                c.mdp.n_states.unwrap(),
                c.mdp.n_actions.unwrap(),
                c.mdp.branching.unwrap(),
                c.gamma,
                c.mdp.seed.unwrap(),
            )?,
        };
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let behavior = match &c.behavior {
            BehaviorSpec::Uniform => Policy::uniform(ns, na),
            BehaviorSpec::Table { probs } => {
                if probs.len() != ns || probs.iter().any(|r| r.len() != na) {
                    return Err(Error::Config(format!("behavior table must be {ns} x {na}")));
                }
                Policy::new(ns, na, probs.concat())?
            }
        };
        let dim = match (c.features.kind, c.features.dim) {
            (_, Some(d)) => d,
            (FeatureKind::Tabular, None) => ns * na,
            (FeatureKind::RandomProjection, None) => {
                return Err(Error::Config("features.dim is required for random-projection features".into()))
            }
        };
        let features = build_features(c.features.kind, &mdp, dim, c.features.seed)?;
        write_json(&self.path(MDP_FILE), &mdp)?;
        write_json(&self.path(BEHAVIOR_FILE), &behavior)?;
        write_json(&self.path(FEATURES_FILE), &features)?;
        Ok(())
    }

    fn load_instance(&self) -> Result<(Dmdp, ChainKernel, FeatureMap)> {
        let mdp: Dmdp = read_json(&self.path(MDP_FILE))?;
        let behavior: Policy = read_json(&self.path(BEHAVIOR_FILE))?;
        let behavior = Policy::new(behavior.n_states(), behavior.n_actions(), behavior.probs().to_vec())?;
        let features: FeatureMap = read_json(&self.path(FEATURES_FILE))?;
        if !features.matches(&mdp) {
            return Err(Error::invalid("features do not match the MDP"));
        }
        let chain = chain_kernel(&mdp, &behavior)?;
        Ok((mdp, chain, features))
    }

    /// Ergodicity and mixing, the domination margin, and the step schedule.
    pub fn certify(&self) -> Result<Certification> {
        let c = &self.config;
        let (mdp, chain, features) = self.load_instance()?;
        let horizon = 10 * chain.n_triples();
        let mixing_time = match chain.mixing_time() {
            MixingTime::Certified(t) => Some(t),
            MixingTime::NotCertified { horizon } => {
                return Err(Error::Assumption(format!("mixing time not certified within horizon {horizon}")));
            }
        };
        let kappa = certify_kappa(&features, &mdp, &chain, c.kappa.method, c.kappa.restarts, c.master_seed, self.par)?;
        let dim = features.dim() as f64;
        let resolve = |kappa_value: f64, target: f64| -> Result<StepSchedule> {
            let omega = c.schedule.omega;
            let c0 = match c.schedule.c0 {
                Auto::Value(v) => v,
                Auto::Auto => auto_c0(target, omega, kappa_value),
            };
            let k0 = match c.schedule.k0 {
                Auto::Value(v) => v,
                Auto::Auto => sa::minimal_k0(c0, omega, kappa_value)?,
            };
            StepSchedule::new(c0, k0, omega)
        };
        let provisional = if kappa.violated() { None } else { Some(resolve(kappa.kappa, c.schedule.alpha0_target)?) };
        let schedule = provisional.unwrap_or(StepSchedule { c0: 1.0, k0: 1.0, omega: c.schedule.omega });
        let report = sa::validate_schedule(&schedule, kappa.kappa, c.schedule.p, c.schedule.slack);
        let per_n = c
            .run
            .n_grid
            .iter()
            .map(|&n| {
                (n, sa::validate_schedule(&schedule, kappa.kappa, (dim * n as f64).ln().max(1.0), c.schedule.slack))
            })
            .collect();
        let moment_schedule = match c.moments.alpha0_target {
            Some(target) if !kappa.violated() => {
                let sched = resolve(kappa.kappa, target)?;
                let rep = sa::validate_schedule(&sched, kappa.kappa, c.schedule.p, c.schedule.slack);
                Some((sched, rep))
            }
            _ => None,
        };
        let moment_failed = moment_schedule.as_ref().is_some_and(|(_, r)| !r.passed());
        let cert = Certification {
            kappa: kappa.clone(),
            mixing_time,
            mixing_horizon: horizon,
            schedule,
            schedule_override: (!report.passed() || moment_failed) && c.schedule.allow_override,
            schedule_report: report.clone(),
            per_n_reports: per_n,
            moment_schedule: moment_schedule.clone(),
        };
        write_json(&self.path(CERTIFICATE_FILE), &cert)?;
        if kappa.violated() {
            return Err(Error::Assumption(format!(
                "domination margin kappa = {:e} is not positive; witness policy {:?}",
                kappa.kappa,
                kappa.witness.unwrap_or_default()
            )));
        }
        if (!report.passed() || moment_failed) && !c.schedule.allow_override {
            let mut names: Vec<_> = report.failures().iter().filter(|x| !x.heuristic).map(|x| x.name.clone()).collect();
            if let Some((_, r)) = &moment_schedule {
                names.extend(
                    r.failures().iter().filter(|x| !x.heuristic).map(|x| format!("{} (moment schedule)", x.name)),
                );
            }
            return Err(Error::Assumption(format!("step-size assumption violated: {}", names.join(", "))));
        }
        Ok(cert)
    }

    pub fn solve(&self) -> Result<SoftFixedPoint> {
        let (mdp, chain, features) = self.load_instance()?;
        let cert: Certification = read_json(&self.path(CERTIFICATE_FILE))?;
        if cert.kappa.violated() {
            return Err(Error::Assumption("certify stage did not pass".into()));
        }
        let fp = SoftFixedPoint::compute(
            &features,
            &mdp,
            &chain,
            self.lambda()?,
            self.config.solver.tol,
            self.config.solver.max_iters,
        )?;
        write_json(&self.path(FIXED_POINT_FILE), &fp)?;
        Ok(fp)
    }

    pub fn run_config(&self, schedule: StepSchedule) -> Result<RunConfig> {
        let c = &self.config;
        let n_max = c.n_max();
        let mut checkpoints = sa::geometric_grid(10, n_max, c.run.checkpoints);
        checkpoints.extend(&c.run.n_grid);
        checkpoints.push(c.moments.t_min);
        checkpoints.push(c.moment_t_max());
        checkpoints.sort_unstable();
        checkpoints.dedup();
        Ok(RunConfig {
            n_steps: n_max,
            seed: c.master_seed,
            replication_id: 0,
            lambda: self.lambda()?,
            schedule,
            checkpoints,
            init_theta: c.run.init_theta.clone(),
            retain_iterates: false,
        })
    }

    /// Run settings of the separate moment batch.
    pub fn moment_run_config(&self, schedule: StepSchedule) -> Result<RunConfig> {
        let c = &self.config;
        let t_max = c.moment_t_max();
        let mut checkpoints = sa::geometric_grid(10, t_max, c.run.checkpoints);
        checkpoints.push(c.moments.t_min);
        checkpoints.push(t_max);
        checkpoints.sort_unstable();
        checkpoints.dedup();
        Ok(RunConfig {
            n_steps: t_max,
            seed: c.master_seed ^ MOMENT_SEED_OFFSET,
            replication_id: 0,
            lambda: self.lambda()?,
            schedule,
            checkpoints,
            init_theta: c.run.init_theta.clone(),
            retain_iterates: false,
        })
    }

    fn check(cert: &Certification, report: &ScheduleReport) -> ScheduleCheck {
        if cert.schedule_override {
            ScheduleCheck::Override
        } else {
            ScheduleCheck::Validated(report.clone())
        }
    }

    pub fn run(&self) -> Result<ReplicationBatch> {
        let (mdp, chain, features) = self.load_instance()?;
        let cert: Certification = read_json(&self.path(CERTIFICATE_FILE))?;
        let check = Self::check(&cert, &cert.schedule_report);
        let rc = self.run_config(cert.schedule)?;
        let batch = clt::replicate(
            &mdp,
            &chain,
            &features,
            &rc,
            &check,
            self.config.run.replications,
            self.config.master_seed,
            self.par,
        )?;
        write_runs_csv(&self.path(RUNS_FILE), &batch, features.dim())?;
        if let Some((schedule, report)) = &cert.moment_schedule {
            let rc = self.moment_run_config(*schedule)?;
            let moments = clt::replicate(
                &mdp,
                &chain,
                &features,
                &rc,
                &Self::check(&cert, report),
                self.config.moments.replications,
                rc.seed,
                self.par,
            )?;
            write_runs_csv(&self.path(MOMENT_RUNS_FILE), &moments, features.dim())?;
        }
        Ok(batch)
    }

    pub fn clt(&self) -> Result<NormalitySummary> {
        let c = &self.config;
        let fp: SoftFixedPoint = read_json(&self.path(FIXED_POINT_FILE))?;
        let cert: Certification = read_json(&self.path(CERTIFICATE_FILE))?;
        let batch = read_runs_csv(&self.path(RUNS_FILE), fp.dim(), self.run_config(cert.schedule)?, c.master_seed)?;
        if batch.len() != c.run.replications {
            return Err(Error::invalid(format!(
                "{} holds {} replications, config asks for {}",
                RUNS_FILE,
                batch.len(),
                c.run.replications
            )));
        }

        let leading = match &cert.moment_schedule {
            Some((schedule, _)) => {
                let rc = self.moment_run_config(*schedule)?;
                let seed = rc.seed;
                read_runs_csv(&self.path(MOMENT_RUNS_FILE), fp.dim(), rc, seed)?
            }
            None => batch.truncated(c.moments.replications),
        };
        let curves: Vec<MomentCurve> = c
            .moments
            .p
            .iter()
            .map(|&p| clt::moment_curve(&leading, &fp.theta_star, p, c.moments.t_min, c.moment_t_max()))
            .collect::<Result<_>>()?;
        let mut w = csv::Writer::from_path(self.path(MOMENTS_FILE))?;
        w.write_record(["p", "t", "moment_value"])?;
        for curve in &curves {
            for (t, v) in curve.checkpoints.iter().zip(&curve.values) {
                w.write_record([fmt_f64(curve.p), t.to_string(), fmt_f64(*v)])?;
            }
        }
        w.flush()?;
        write_json(&self.path(MOMENT_CURVES_FILE), &curves)?;

        let seed = c.master_seed ^ SURROGATE_SEED_OFFSET;
        let reports: Vec<NormalityReport> = c
            .run
            .n_grid
            .iter()
            .map(|&n| clt::normality_report(&batch, &fp, n, c.clt.directions, &c.clt.levels, seed, self.par))
            .collect::<Result<_>>()?;
        let mut w = csv::Writer::from_path(self.path(CLT_FILE))?;
        let mut header = vec!["n".to_string(), "dc_hat".into(), "cov_rel_error".into()];
        header.extend(c.clt.levels.iter().map(|q| format!("coverage@{}", fmt_f64(*q))));
        w.write_record(&header)?;
        for r in &reports {
            let mut row = vec![r.n.to_string(), fmt_f64(r.dc_hat), fmt_f64(r.cov_rel_error)];
            row.extend(r.coverage.iter().map(|(_, v)| fmt_f64(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;

        let points: Vec<(u64, f64)> = reports.iter().map(|r| (r.n, r.dc_hat)).collect();
        let (rate_fit, rate_fit_error) = match clt::rate_fit(&points) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let summary = NormalitySummary { reports, rate_fit, rate_fit_error };
        write_json(&self.path(NORMALITY_FILE), &summary)?;
        Ok(summary)
    }
}

/// `c0` whose minimal `k0` gives `alpha_0` close to `target`:
/// with `k0 = (32/(kappa c0))^(1/(1-omega))`, `alpha_0 = c0 k0^-omega`.
pub fn auto_c0(target: f64, omega: f64, kappa: f64) -> f64 {
    target.powf(1.0 - omega) * (32.0 / kappa).powf(omega)
}

pub fn write_runs_csv(path: &Path, batch: &ReplicationBatch, dim: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["replication_id".to_string(), "t".into()];
    header.extend((0..dim).map(|i| format!("theta_{i}")));
    header.extend((0..dim).map(|i| format!("avg_{i}")));
    header.push("step_size".into());
    w.write_record(&header)?;
    for r in batch.results() {
        for cp in &r.checkpoints {
            let mut row = vec![r.replication_id.to_string(), cp.t.to_string()];
            row.extend(cp.theta.iter().map(|v| fmt_f64(*v)));
            row.extend(cp.average.iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(cp.step_size));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds a batch from checkpoint rows; the last checkpoint is the final iterate.
pub fn read_runs_csv(path: &Path, dim: usize, config: RunConfig, master_seed: u64) -> Result<ReplicationBatch> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let width = 3 + 2 * dim;
    let mut results: Vec<RunResult> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != width {
            return Err(Error::invalid(format!(
                "{}: expected {width} columns, found {}",
                path.display(),
                record.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            record[i].parse().map_err(|_| Error::invalid(format!("bad number `{}` in {}", &record[i], path.display())))
        };
        let id: u64 = record[0].parse().map_err(|_| Error::invalid("bad replication id"))?;
        let t: u64 = record[1].parse().map_err(|_| Error::invalid("bad step index"))?;
        let theta = (0..dim).map(|i| num(2 + i)).collect::<Result<Vec<_>>>()?;
        let average = (0..dim).map(|i| num(2 + dim + i)).collect::<Result<Vec<_>>>()?;
        let cp = Checkpoint { t, theta, average, step_size: num(2 + 2 * dim)? };
        match results.last_mut() {
            Some(r) if r.replication_id == id => r.checkpoints.push(cp),
            _ => results.push(RunResult {
                replication_id: id,
                seed: master_seed,
                final_theta: Vec::new(),
                pr_average: None,
                checkpoints: vec![cp],
                schedule_override: false,
                wall_time: 0.0,
                iterates: None,
            }),
        }
    }
    for r in &mut results {
        let last = r.checkpoints.last().expect("nonempty");
        r.final_theta = last.theta.clone();
        r.pr_average = Some(last.average.clone());
    }
    ReplicationBatch::new(results, config, master_seed)
}

/// Parses the config, runs every stage into `out` (or the configured output
/// directory) and returns the manifest.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<Manifest> {
    let dir = match (out, &config.output_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => o.clone(),
        (None, None) => return Err(Error::Config("no output directory given".into())),
    };
    Pipeline::new(config.clone(), dir)?.run_all()
}
