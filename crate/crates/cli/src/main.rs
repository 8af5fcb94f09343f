use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mango_core::attack::{AttackConfig, Variant};
use mango_core::harness::{self, RunConfig, TaskSpec, VerifyReport};
use mango_core::Error;

#[derive(Parser)]
#[command(name = "mango", version, about = "Quantization-compensation attacks on desk-scale toy models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attack every task instance and write results, traces and a manifest.
    Attack(RunArgs),
    /// Record continuous vs quantized totals at every optimizer step.
    GapTrace(RunArgs),
    /// Check analytic loss gradients against central differences.
    Gradcheck(CheckArgs),
    /// Check the zeroth-order estimator against analytic gradients.
    ZooCheck(CheckArgs),
    /// Paired MANGO vs Naive report on the same task.
    Compare(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config with [task], [attack], [optimizer] and [zoo] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Attack seed (overrides `attack.seed`).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// First seed of the check suite.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of seeded problems.
    #[arg(long)]
    cases: Option<u64>,
    /// Override the relative-error threshold (gradcheck only).
    #[arg(long)]
    tolerance: Option<f64>,
    /// Also write the report as JSON into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Verification,
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Toml(_) => Failure::Config(e),
            other => Failure::Runtime(other),
        }
    }
}

fn load(args: &RunArgs) -> Result<(TaskSpec, AttackConfig), Failure> {
    let mut file = match &args.config {
        Some(path) => RunConfig::load(path).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.variant {
        file.attack.variant = Some(v);
    }
    if let Some(s) = args.seed {
        file.attack.seed = Some(s);
    }
    file.task.validate().map_err(Failure::Config)?;
    let cfg = file.attack_config().map_err(Failure::Config)?;
    Ok((file.task, cfg))
}

fn write_report(report: &VerifyReport, out: Option<&Path>) -> Result<(), Failure> {
    print!("{}", report.render());
    if let Some(dir) = out {
        report.save(dir)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Attack(args) => {
            let (spec, cfg) = load(&args)?;
            let out = harness::run_batch(&spec, &cfg, Some(&args.out))?;
            let m = &out.manifest.metrics;
            println!(
                "{}: {}/{} successful (rate {}), mean final total {}, {} failed",
                cfg.variant,
                m.successes,
                m.completed,
                fmt_opt(m.success_rate),
                fmt_opt(m.mean_final_total),
                m.failures
            );
            println!("wrote {}", args.out.display());
        }
        Command::GapTrace(args) => {
            let (spec, cfg) = load(&args)?;
            let traces = harness::gap_trace(&spec, &cfg, Some(&args.out))?;
            for t in &traces {
                if let Some(last) = t.rows.last() {
                    println!("instance {}: {} rows, final gap {:.6}", t.instance, t.rows.len(), last.gap);
                }
            }
            println!("wrote {}", args.out.display());
        }
        Command::Gradcheck(args) => {
            let cases = args.cases.unwrap_or(24);
            let tolerance = args.tolerance.unwrap_or(harness::GRADCHECK_TOLERANCE);
            let report = harness::run_gradcheck(args.seed..args.seed + cases, tolerance)?;
            write_report(&report, args.out.as_deref())?;
        }
        Command::ZooCheck(args) => {
            let cases = args.cases.unwrap_or(10);
            let report = harness::run_zoocheck(args.seed..args.seed + cases)?;
            write_report(&report, args.out.as_deref())?;
        }
        Command::Compare(args) => {
            let (spec, cfg) = load(&args)?;
            let report = harness::compare(&spec, &cfg, Some(&args.out))?;
            for p in &report.pairs {
                println!("instance {:>3}: mango {:>10.4} naive {:>10.4}", p.instance, p.mango, p.naive);
            }
            println!(
                "mango <= naive on {} of instances; mean total mango {} naive {}; success mango {} naive {}",
                fmt_opt(report.mango_not_worse_fraction),
                fmt_opt(report.mean_mango_total),
                fmt_opt(report.mean_naive_total),
                fmt_opt(report.mango_success_rate),
                fmt_opt(report.naive_success_rate)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
