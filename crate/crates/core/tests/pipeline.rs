//! End-to-end pipeline behavior on small configurations.

use std::fs;
use std::path::Path;

use softq::experiment::pipeline::{Certification, CERTIFICATE_FILE, CLT_FILE, MOMENTS_FILE, NORMALITY_FILE, RUNS_FILE};
use softq::experiment::{emit_report, parse_config, run_experiment, ExperimentConfig, Pipeline, ReportStatus, Stage};
use softq::oracle::SoftFixedPoint;
use softq::Error;

fn smoke() -> ExperimentConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");
    parse_config(&fs::read_to_string(path).unwrap()).unwrap()
}

fn data_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "manifest.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn smoke_run_is_hash_stable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_experiment(&smoke(), Some(a.path())).unwrap();
    let second = run_experiment(&smoke(), Some(b.path())).unwrap();
    assert_eq!(first.files, second.files);
    assert_eq!(first.inventory_digest(), second.inventory_digest());
    assert_eq!(data_files(a.path()), data_files(b.path()));
    for stage in Stage::ALL {
        assert!(first.stage_wall_times.contains_key(stage.name()));
    }
}

#[test]
fn thread_hint_never_changes_data_bytes() {
    let mut single = smoke();
    single.threads = Some(1);
    let mut many = smoke();
    many.threads = Some(4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&single, Some(a.path())).unwrap();
    run_experiment(&many, Some(b.path())).unwrap();
    assert_eq!(data_files(a.path()), data_files(b.path()));
}

#[test]
fn dominated_features_abort_at_certify_with_a_witness() {
    let text = "master_seed = 3\ngamma = 0.99\n[mdp]\nn_states = 3\nn_actions = 3\nbranching = 3\n";
    let config = parse_config(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&config, Some(dir.path())).unwrap_err();
    match &err {
        Error::Stage { stage, inputs_hash, .. } => {
            assert_eq!(*stage, "certify");
            assert_eq!(inputs_hash.len(), 64);
        }
        other => panic!("unexpected error {other}"),
    }
    assert!(matches!(err.root(), Error::Assumption(msg) if msg.contains("witness")));
    assert_eq!(err.exit_code(), 2);
    let cert: Certification =
        serde_json::from_str(&fs::read_to_string(dir.path().join(CERTIFICATE_FILE)).unwrap()).unwrap();
    assert!(cert.kappa.kappa <= 0.0);
    assert_eq!(cert.kappa.witness.as_ref().map(|w| w.len()), Some(3));
    assert!(!dir.path().join(RUNS_FILE).exists());
}

#[test]
fn out_of_range_step_exponent_is_a_config_error() {
    let err =
        parse_config("master_seed = 1\n[mdp]\nn_states = 2\nn_actions = 2\n[schedule]\nomega = 0.5\n").unwrap_err();
    assert!(err.to_string().contains("open interval (1/2, 1)"));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn report_without_clt_stage_is_partial() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(smoke(), dir.path()).unwrap();
    for stage in [Stage::Gen, Stage::Certify, Stage::Solve, Stage::Run] {
        pipeline.run_stage(stage).unwrap();
    }
    let summary = emit_report(dir.path()).unwrap();
    assert_eq!(summary.status, ReportStatus::Partial);
    assert!(summary.gaps.iter().any(|g| g.contains(CLT_FILE)));
    assert!(summary.gaps.iter().any(|g| g.contains(NORMALITY_FILE)));
    assert!(summary.text.contains("Status: partial"));
    assert!(summary.kappa.is_some());

    pipeline.run_stage(Stage::Clt).unwrap();
    let summary = emit_report(dir.path()).unwrap();
    assert_eq!(summary.status, ReportStatus::Complete);
    for section in ["## Instance", "## Moment decay", "## Gaussian approximation", "## Checks"] {
        assert!(summary.text.contains(section), "{section}");
    }
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(smoke(), dir.path()).unwrap();
    let err = pipeline.run_stage(Stage::Solve).unwrap_err();
    assert!(matches!(err.root(), Error::MissingInput(_)));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

/// Least squares slope, written out longhand.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn report_matches_independent_aggregation_of_the_csvs() {
    let config = smoke();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&config, Some(dir.path())).unwrap();
    let summary = emit_report(dir.path()).unwrap();
    let fp: SoftFixedPoint =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fixed_point.json")).unwrap()).unwrap();
    let d = fp.theta_star.len();

    // Moments: root mean square last-iterate error per checkpoint, from raw runs.
    let runs = csv_rows(&dir.path().join(RUNS_FILE));
    let moments = csv_rows(&dir.path().join(MOMENTS_FILE));
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for row in &moments {
        let t: u64 = row[1].parse().unwrap();
        let reported: f64 = row[2].parse().unwrap();
        let errs: Vec<f64> = runs
            .iter()
            .filter(|r| r[1].parse::<u64>().unwrap() == t)
            .map(|r| (0..d).map(|i| (r[2 + i].parse::<f64>().unwrap() - fp.theta_star[i]).powi(2)).sum::<f64>())
            .collect();
        let rms = (errs.iter().sum::<f64>() / errs.len() as f64).sqrt();
        assert!((rms - reported).abs() <= 1e-12 * rms.max(1.0), "t = {t}");
        if t >= config.moments.t_min && t <= config.moment_t_max() {
            xs.push((t as f64).ln());
            ys.push(rms.ln());
        }
    }
    assert_eq!(moments.len(), runs.iter().filter(|r| r[0] == "0").count());
    let (_, reported_slope, _) = summary.moment_slopes[0];
    assert!((slope(&xs, &ys) - reported_slope).abs() <= 1e-10);

    // Normality rows: the report echoes clt.csv exactly.
    let clt = csv_rows(&dir.path().join(CLT_FILE));
    assert_eq!(clt.len(), summary.clt_rows.len());
    for (raw, row) in clt.iter().zip(&summary.clt_rows) {
        assert_eq!(raw[0].parse::<u64>().unwrap(), row.n);
        assert_eq!(raw[1].parse::<f64>().unwrap(), row.dc_hat);
        assert_eq!(raw[2].parse::<f64>().unwrap(), row.cov_rel_error);
        for (k, (_, cov)) in row.coverage.iter().enumerate() {
            assert_eq!(raw[3 + k].parse::<f64>().unwrap(), *cov);
        }
    }

    // Covariance gap at the largest horizon, from the averaged iterates.
    let n = *config.run.n_grid.last().unwrap();
    let scaled: Vec<Vec<f64>> = runs
        .iter()
        .filter(|r| r[1].parse::<u64>().unwrap() == n)
        .map(|r| {
            (0..d).map(|i| (r[2 + d + i].parse::<f64>().unwrap() - fp.theta_star[i]) * (n as f64).sqrt()).collect()
        })
        .collect();
    let reps = scaled.len() as f64;
    let (mut diff, mut norm) = (0.0, 0.0);
    for i in 0..d {
        for j in 0..d {
            let emp = scaled.iter().map(|v| v[i] * v[j]).sum::<f64>() / reps;
            diff += (emp - fp.sigma_inf[(i, j)]).powi(2);
            norm += fp.sigma_inf[(i, j)].powi(2);
        }
    }
    let gap = (diff / norm).sqrt();
    let last = summary.clt_rows.last().unwrap();
    assert!((gap - last.cov_rel_error).abs() <= 1e-9 * gap.max(1.0));
}

#[test]
fn separate_moment_batch_uses_its_own_schedule() {
    let mut config = smoke();
    config.moments.alpha0_target = Some(2.0);
    config.moments.replications = 5;
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&config, Some(dir.path())).unwrap();
    let cert: Certification =
        serde_json::from_str(&fs::read_to_string(dir.path().join(CERTIFICATE_FILE)).unwrap()).unwrap();
    let (schedule, report) = cert.moment_schedule.expect("moment schedule");
    assert!(report.passed());
    assert!(schedule.k0 < cert.schedule.k0);
    assert!((schedule.step_size(0) - 2.0).abs() < 0.05);
    let rows = csv_rows(&dir.path().join("moment_runs.csv"));
    let ids: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ids.len(), 5);
    // The main batch is untouched by the extra runs.
    let plain = tempfile::tempdir().unwrap();
    run_experiment(&smoke(), Some(plain.path())).unwrap();
    assert_eq!(fs::read(dir.path().join(RUNS_FILE)).unwrap(), fs::read(plain.path().join(RUNS_FILE)).unwrap());
}
