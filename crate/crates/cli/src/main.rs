use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use etpart::config::RunConfig;
use etpart::pipeline::{run_pipeline, RunOptions, Stage};
use etpart::report::{emit_report, report_from_json, Format};
use etpart::synth::{generate_synthetic, SyntheticSpec};

/// Partition measured evapotranspiration into evaporation and transpiration.
#[derive(Parser)]
#[command(name = "etpart", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Root seed, replacing `cv.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory, replacing `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Read and resample site data.
    Ingest(RunArgs),
    /// Ingest, then consolidate, derive time features and gap-fill.
    Prep(RunArgs),
    /// Run through the model comparison on the expert and screened sets.
    Compare(RunArgs),
    /// Run through recursive feature elimination.
    Rfe(RunArgs),
    /// Run the whole pipeline and write the partition.
    Partition(RunArgs),
    /// Run the pipeline, optionally stopping after `--stage`.
    Run {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long, value_parser = parse_stage)]
        stage: Option<Stage>,
    },
    /// Write a synthetic site with known E and T as CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "SYN")]
        site: String,
    },
    /// Convert a report.json into csv or json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse()
}

/// A failure with its process exit code.
struct Failure(u8, anyhow::Error);

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure(1, e.into())
}

fn run(args: &RunArgs, stop_after: Option<Stage>) -> Result<(), Failure> {
    let (cfg, text) = RunConfig::load(&args.config).map_err(config_err)?;
    let opts = RunOptions {
        seed: args.seed,
        out_dir: args.out.clone(),
        stop_after,
        jobs: args.jobs,
    };
    let summary = run_pipeline(&cfg, &text, &opts).map_err(|e| Failure(e.exit_code() as u8, e.into()))?;
    println!(
        "wrote {} artifacts to {} (stages: {})",
        summary.artifacts.len() + 1,
        summary.out_dir.display(),
        summary
            .stages_completed
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

fn synth(out: &Path, days: usize, seed: u64, site: &str) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        site_id: site.to_string(),
        n_days: days,
        seed,
        ..Default::default()
    };
    let s = generate_synthetic(&spec).map_err(config_err)?;
    let file = std::fs::File::create(out).map_err(|e| Failure(2, e.into()))?;
    s.dataset.write_csv(std::io::BufWriter::new(file)).map_err(|e| Failure(2, e.into()))?;
    println!("wrote {} records to {}", s.dataset.len(), out.display());
    Ok(())
}

fn convert(input: &Path, format: &str, out: &Path) -> Result<(), Failure> {
    let format: Format = format.parse().map_err(config_err)?;
    let file = std::fs::File::open(input).map_err(config_err)?;
    let report = report_from_json(std::io::BufReader::new(file)).map_err(config_err)?;
    emit_report(&report, format, out).map_err(|e| Failure(2, e.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Ingest(a) => run(a, Some(Stage::Ingest)),
        Command::Prep(a) => run(a, Some(Stage::Prep)),
        Command::Compare(a) => run(a, Some(Stage::Compare)),
        Command::Rfe(a) => run(a, Some(Stage::Rfe)),
        Command::Partition(a) => run(a, None),
        Command::Run { args, stage } => run(args, *stage),
        Command::Synth { out, days, seed, site } => synth(out, *days, *seed, site),
        Command::Report { input, format, out } => convert(input, format, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, e)) => {
            log::error!("{e:#}");
            ExitCode::from(code)
        }
    }
}
