//! Human-readable summary of an experiment directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{parse_config, ExperimentConfig};
use super::pipeline::{
    Certification, NormalitySummary, CERTIFICATE_FILE, CLT_FILE, CONFIG_FILE, FIXED_POINT_FILE, MOMENT_CURVES_FILE,
    NORMALITY_FILE, REPORT_FILE,
};
use super::read_json;
use crate::clt::MomentCurve;
use crate::error::{Error, Result};
use crate::oracle::SoftFixedPoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportStatus {
    Complete,
    Partial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltRow {
    pub n: u64,
    pub dc_hat: f64,
    pub cov_rel_error: f64,
    pub coverage: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub status: ReportStatus,
    pub gaps: Vec<String>,
    pub kappa: Option<f64>,
    pub mixing_time: Option<usize>,
    pub theta_residual: Option<f64>,
    /// `(p, slope, stderr)`.
    pub moment_slopes: Vec<(f64, f64, f64)>,
    pub clt_rows: Vec<CltRow>,
    pub rate_slope: Option<(f64, f64)>,
    pub checks: Vec<Check>,
    pub text: String,
}

fn read_clt_csv(path: &Path) -> Result<Vec<CltRow>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let levels: Vec<f64> = reader
        .headers()?
        .iter()
        .skip(3)
        .map(|h| h.trim_start_matches("coverage@").parse().map_err(|_| Error::invalid(format!("bad header {h}"))))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let num = |i: usize| -> Result<f64> { record[i].parse().map_err(|_| Error::invalid("bad number in clt.csv")) };
        rows.push(CltRow {
            n: record[0].parse().map_err(|_| Error::invalid("bad horizon in clt.csv"))?,
            dc_hat: num(1)?,
            cov_rel_error: num(2)?,
            coverage: levels.iter().enumerate().map(|(i, &q)| Ok((q, num(3 + i)?))).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

fn load<T>(dir: &Path, name: &str, gaps: &mut Vec<String>, loader: impl FnOnce(&Path) -> Result<T>) -> Option<T> {
    match loader(&dir.join(name)) {
        Ok(v) => Some(v),
        Err(Error::MissingInput(_)) => {
            gaps.push(format!("{name} missing"));
            None
        }
        Err(e) => {
            gaps.push(format!("{name} unreadable: {e}"));
            None
        }
    }
}

fn within(v: f64, band: [f64; 2]) -> bool {
    v >= band[0] && v <= band[1]
}

fn checks(config: &ExperimentConfig, curves: &[MomentCurve], rows: &[CltRow], rate: Option<(f64, f64)>) -> Vec<Check> {
    let t = &config.tolerances;
    let mut out = Vec::new();
    if let Some(c) = curves.iter().find(|c| c.p == 1.0).or(curves.first()) {
        out.push(Check {
            name: format!("moment slope (p = {})", c.p),
            passed: within(c.fitted_slope, t.moment_slope),
            detail: format!("{:.4} in [{}, {}]", c.fitted_slope, t.moment_slope[0], t.moment_slope[1]),
        });
    }
    if let Some(last) = rows.last() {
        out.push(Check {
            name: format!("covariance gap at n = {}", last.n),
            passed: last.cov_rel_error <= t.cov_rel_error,
            detail: format!("{:.4} <= {}", last.cov_rel_error, t.cov_rel_error),
        });
        let level = last.coverage.iter().find(|(q, _)| (q - t.coverage_level).abs() < 1e-12);
        out.push(match level {
            Some(&(q, cov)) => Check {
                name: format!("coverage at level {q}, n = {}", last.n),
                passed: (cov - q).abs() <= t.coverage_tol,
                detail: format!("{cov:.4} within {q} +- {}", t.coverage_tol),
            },
            None => Check {
                name: "coverage".into(),
                passed: false,
                detail: format!("level {} not among the configured levels", t.coverage_level),
            },
        });
    }
    if rows.len() >= 2 {
        let decreasing = rows.windows(2).all(|w| w[1].dc_hat < w[0].dc_hat);
        let values: Vec<String> = rows.iter().map(|r| format!("{:.4}", r.dc_hat)).collect();
        out.push(Check {
            name: "distance strictly decreasing in n".into(),
            passed: decreasing,
            detail: values.join(" > "),
        });
    }
    if let Some((slope, _)) = rate {
        out.push(Check {
            name: "distance rate slope".into(),
            passed: within(slope, t.rate_slope),
            detail: format!("{slope:.4} in [{}, {}]", t.rate_slope[0], t.rate_slope[1]),
        });
    }
    out
}

/// Reads whatever stage outputs exist in `dir`, writes `report.md` and
/// returns the same numbers in structured form. Missing outputs make the
/// status partial and are listed as gaps.
pub fn emit_report(dir: &Path) -> Result<ReportSummary> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let mut gaps = Vec::new();
    let config = load(dir, CONFIG_FILE, &mut gaps, |p| {
        if !p.exists() {
            return Err(Error::MissingInput(p.to_path_buf()));
        }
        parse_config(&fs::read_to_string(p)?)
    });
    let cert: Option<Certification> = load(dir, CERTIFICATE_FILE, &mut gaps, read_json);
    let fp: Option<SoftFixedPoint> = load(dir, FIXED_POINT_FILE, &mut gaps, read_json);
    let curves: Option<Vec<MomentCurve>> = load(dir, MOMENT_CURVES_FILE, &mut gaps, read_json);
    let rows = load(dir, CLT_FILE, &mut gaps, read_clt_csv);
    let normality: Option<NormalitySummary> = load(dir, NORMALITY_FILE, &mut gaps, read_json);

    let rate_slope = normality.as_ref().and_then(|n| n.rate_fit.as_ref()).map(|f| (f.slope, f.stderr));
    let moment_slopes: Vec<(f64, f64, f64)> =
        curves.iter().flatten().map(|c| (c.p, c.fitted_slope, c.slope_stderr)).collect();
    let checks = match &config {
        Some(cfg) => checks(cfg, curves.as_deref().unwrap_or(&[]), rows.as_deref().unwrap_or(&[]), rate_slope),
        None => Vec::new(),
    };

    let mut s = String::new();
    let status = if gaps.is_empty() { ReportStatus::Complete } else { ReportStatus::Partial };
    let _ = writeln!(s, "# Experiment report\n");
    let _ = writeln!(s, "Status: {}\n", if status == ReportStatus::Complete { "complete" } else { "partial" });
    if !gaps.is_empty() {
        let _ = writeln!(s, "## Gaps\n");
        for g in &gaps {
            let _ = writeln!(s, "- {g}");
        }
        let _ = writeln!(s);
    }

    let _ = writeln!(s, "## Instance\n");
    match &cert {
        Some(c) => {
            let _ =
                writeln!(s, "- kappa: {:.6e} ({:?}, certified: {})", c.kappa.kappa, c.kappa.method, c.kappa.certified);
            match c.mixing_time {
                Some(t) => {
                    let _ = writeln!(s, "- mixing time: {t}");
                }
                None => {
                    let _ = writeln!(s, "- mixing time: not certified within {}", c.mixing_horizon);
                }
            }
            let mut schedules = vec![("schedule", &c.schedule, &c.schedule_report)];
            if let Some((sc, rep)) = &c.moment_schedule {
                schedules.push(("moment schedule", sc, rep));
            }
            for (label, sc, rep) in schedules {
                let _ = writeln!(
                    s,
                    "- {label}: c0 = {:.6}, k0 = {}, omega = {}, alpha_0 = {:.6}",
                    sc.c0,
                    sc.k0,
                    sc.omega,
                    sc.step_size(0)
                );
                for cond in &rep.conditions {
                    let tag = if cond.heuristic { " (advisory)" } else { "" };
                    let _ = writeln!(
                        s,
                        "  - {}{tag}: {} ({:.6e} vs {:.6e})",
                        cond.name,
                        if cond.passed { "pass" } else { "fail" },
                        cond.lhs,
                        cond.rhs
                    );
                }
            }
        }
        None => {
            let _ = writeln!(s, "_certificate unavailable_");
        }
    }
    if let Some(fp) = &fp {
        let _ = writeln!(s, "- theta_star residual: {:.3e} after {} iterations", fp.residual, fp.solver_iters);
    }
    let _ = writeln!(s);

    let _ = writeln!(s, "## Moment decay\n");
    if moment_slopes.is_empty() {
        let _ = writeln!(s, "_no moment curves_");
    } else {
        let _ = writeln!(s, "| p | slope | stderr |\n|---|---|---|");
        for (p, slope, se) in &moment_slopes {
            let _ = writeln!(s, "| {p} | {slope:.4} | {se:.4} |");
        }
    }
    let _ = writeln!(s);

    let _ = writeln!(s, "## Gaussian approximation\n");
    match &rows {
        Some(rows) if !rows.is_empty() => {
            let levels: Vec<String> = rows[0].coverage.iter().map(|(q, _)| format!("cov@{q}")).collect();
            let _ = writeln!(s, "| n | dC_hat | cov_rel_error | {} |", levels.join(" | "));
            let _ = writeln!(s, "|---|---|---|{}", "---|".repeat(levels.len()));
            for r in rows {
                let cov: Vec<String> = r.coverage.iter().map(|(_, v)| format!("{v:.4}")).collect();
                let _ = writeln!(s, "| {} | {:.4} | {:.4} | {} |", r.n, r.dc_hat, r.cov_rel_error, cov.join(" | "));
            }
        }
        _ => {
            let _ = writeln!(s, "_no normality results_");
        }
    }
    match (rate_slope, normality.as_ref().and_then(|n| n.rate_fit_error.clone())) {
        (Some((slope, se)), _) => {
            let _ = writeln!(s, "\nRate fit slope: {slope:.4} (stderr {se:.4})");
        }
        (None, Some(e)) => {
            let _ = writeln!(s, "\nRate fit unavailable: {e}");
        }
        _ => {}
    }
    let _ = writeln!(s);

    let _ = writeln!(s, "## Checks\n");
    if checks.is_empty() {
        let _ = writeln!(s, "_nothing to check_");
    }
    for c in &checks {
        let _ = writeln!(s, "- [{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }

    fs::write(dir.join(REPORT_FILE), &s)?;
    Ok(ReportSummary {
        status,
        gaps,
        kappa: cert.as_ref().map(|c| c.kappa.kappa),
        mixing_time: cert.as_ref().and_then(|c| c.mixing_time),
        theta_residual: fp.as_ref().map(|f| f.residual),
        moment_slopes,
        clt_rows: rows.unwrap_or_default(),
        rate_slope,
        checks,
        text: s,
    })
}
