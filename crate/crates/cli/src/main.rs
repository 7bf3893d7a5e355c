use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddsmooth::commands::{self, CERTIFY_TABLE_FILE, CURVE_FILE};
use ddsmooth::config::RunConfig;
use ddsmooth::report::{fmt6, SigmaMapping};
use ddsmooth::Result;

/// Certify, compare and verify denoised smoothing on Gaussian mixtures.
#[derive(Parser)]
#[command(name = "ddsmooth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML, or JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct WithOutput {
    #[command(flatten)]
    common: Common,
    /// Directory for output files.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Certify every dataset point at every configured noise level.
    Certify(WithOutput),
    /// Smoothed prediction for one dataset point.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Dataset point id.
        #[arg(long)]
        point: u64,
    },
    /// Accuracy of posterior means calibrated for the wrong noise level.
    Ablate(WithOutput),
    /// Accuracy of each denoiser at each noise level.
    CompareSamplers(WithOutput),
    /// Search for label changes inside certified radii using exact probabilities.
    Verify(WithOutput),
    /// Certified-accuracy curves from a saved run record.
    Curve {
        /// Path to a run_record.json written by `certify`.
        #[arg(long)]
        record: PathBuf,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(workers) = common.workers {
        config.workers = workers;
    }
    config.validate()?;
    Ok(config)
}

fn print_mappings<'a>(mappings: impl IntoIterator<Item = &'a SigmaMapping>) {
    for m in mappings {
        println!("{}", m.describe());
    }
}

fn report_file(dir: &Path, name: &str) {
    println!("wrote {}", dir.join(name).display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Certify(args) => {
            let config = load(&args.common)?;
            let record = commands::cmd_certify(&config, &args.out)?;
            print_mappings(record.runs.iter().map(|r| &r.mapping));
            for row in &record.aggregate {
                let certified: Vec<String> = row.certified.iter().map(|v| fmt6(*v)).collect();
                println!(
                    "sigma {}: clean {}%, certified [{}]%",
                    fmt6(row.sigma),
                    fmt6(row.clean),
                    certified.join(", ")
                );
            }
            println!(
                "{} samples in {:.2} s",
                record.timing.samples, record.timing.wall_seconds
            );
            report_file(&args.out, CERTIFY_TABLE_FILE);
        }
        Command::Predict { common, point } => {
            let config = load(&common)?;
            for report in commands::cmd_predict(&config, point)? {
                println!("{}", report.mapping.describe());
                let label = report
                    .outcome
                    .label
                    .map_or_else(|| "abstain".to_string(), |l| l.to_string());
                println!(
                    "point {}: label {label}, counts {:?}, p-value {}",
                    point,
                    report.outcome.counts,
                    fmt6(report.outcome.p_value)
                );
            }
        }
        Command::Ablate(args) => {
            let config = load(&args.common)?;
            let table = commands::cmd_ablate(&config, &args.out)?;
            print!("{}", table.csv());
            report_file(&args.out, commands::ABLATE_FILE);
        }
        Command::CompareSamplers(args) => {
            let config = load(&args.common)?;
            let cells = commands::cmd_compare_samplers(&config, &args.out)?;
            for c in &cells {
                println!(
                    "{} at sigma {}: {}%",
                    c.denoiser,
                    fmt6(c.sigma / ddsmooth::config::SIGMA_SCALE),
                    fmt6(100.0 * c.accuracy)
                );
            }
            report_file(&args.out, commands::COMPARE_FILE);
        }
        Command::Verify(args) => {
            let config = load(&args.common)?;
            let report = commands::run_verify(&config)?;
            commands::write_verify(&report, &args.out)?;
            println!("{}", report.mapping.describe());
            println!(
                "{} certified checks, {} violations; {} of {} inflated radii broken",
                report.checks.len() - report.inflated_checks(),
                report.violations(),
                report.inflated_detected(),
                report.inflated_checks()
            );
            report.check()?;
        }
        Command::Curve { record, out } => {
            let points = commands::cmd_curve(&record, &out)?;
            println!("{} curve points", points.len());
            report_file(&out, CURVE_FILE);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
