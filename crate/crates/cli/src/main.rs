//! Command-line front end for the experiment pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use softq::experiment::{emit_report, parse_config, ExperimentConfig, Pipeline, ReportStatus, Stage};
use softq::Error;

#[derive(Parser)]
#[command(name = "softq", version, about = "Soft Q-learning with linear features: experiments and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the MDP, behavior policy and features.
    Gen(Common),
    /// Certify mixing and the domination margin, and resolve the step schedule.
    Certify(Common),
    /// Solve for the fixed point and its limiting covariance.
    Solve(Common),
    /// Run the replicated trajectories.
    Run(Common),
    /// Compute moment curves and normality diagnostics.
    Clt(Common),
    /// Summarize whatever the output directory holds.
    Report(Common),
    /// Run every stage in order.
    All(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config; defaults to the echo in the output directory.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed; overrides `master_seed` and every seed derived from it.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, value_name = "N", env = "SOFTQ_THREADS")]
    threads: Option<usize>,
}

impl Command {
    fn parts(&self) -> (&Common, Option<Stage>) {
        match self {
            Command::Gen(c) => (c, Some(Stage::Gen)),
            Command::Certify(c) => (c, Some(Stage::Certify)),
            Command::Solve(c) => (c, Some(Stage::Solve)),
            Command::Run(c) => (c, Some(Stage::Run)),
            Command::Clt(c) => (c, Some(Stage::Clt)),
            Command::Report(c) => (c, Some(Stage::Report)),
            Command::All(c) => (c, None),
        }
    }
}

fn load_config(args: &Common) -> softq::Result<(ExperimentConfig, PathBuf)> {
    let path = match (&args.config, &args.out) {
        (Some(p), _) => p.clone(),
        (None, Some(out)) => out.join("config.toml"),
        (None, None) => return Err(Error::Config("either --config or --out is required".into())),
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let text = match args.seed {
        Some(seed) => {
            let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            table.insert("master_seed".into(), toml::Value::Integer(seed as i64));
            table.to_string()
        }
        None => text,
    };
    let mut config = parse_config(&text)?;
    if args.threads.is_some() {
        config.threads = args.threads;
    }
    if config.threads == Some(0) {
        return Err(Error::Config("--threads must be positive".into()));
    }
    let out = match (&args.out, &config.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o.clone(),
        (None, None) => return Err(Error::Config("no output directory: pass --out or set output_dir".into())),
    };
    Ok((config, out))
}

fn report(out: &Path) -> softq::Result<()> {
    let summary = emit_report(out)?;
    let status = match summary.status {
        ReportStatus::Complete => "complete",
        ReportStatus::Partial => "partial",
    };
    println!("report: {} ({status})", out.join("report.md").display());
    for gap in &summary.gaps {
        println!("  gap: {gap}");
    }
    for check in &summary.checks {
        println!("  [{}] {}: {}", if check.passed { "pass" } else { "FAIL" }, check.name, check.detail);
    }
    Ok(())
}

fn execute(command: &Command) -> softq::Result<()> {
    let (args, stage) = command.parts();
    if stage == Some(Stage::Report) && args.config.is_none() {
        let out = args.out.clone().ok_or_else(|| Error::Config("report needs --out".into()))?;
        return report(&out);
    }
    let (config, out) = load_config(args)?;
    let pipeline = Pipeline::new(config, &out)?;
    match stage {
        Some(Stage::Report) => report(&out),
        Some(stage) => {
            pipeline.run_stage(stage)?;
            println!("{}: done ({})", stage.name(), out.display());
            Ok(())
        }
        None => {
            for stage in Stage::ALL {
                pipeline.run_stage(stage)?;
                if stage != Stage::Report {
                    println!("{}: done", stage.name());
                }
            }
            report(&out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors; help and version are not errors.
            return ExitCode::from(if e.use_stderr() { 4 } else { 0 });
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let root = e.root();
            if !std::ptr::eq(root, &e) {
                eprintln!("cause: {root}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
