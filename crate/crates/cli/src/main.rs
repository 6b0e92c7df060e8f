use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stanncr_cli::config::SweepParam;
use stanncr_cli::{compare_encoders, run_pipeline, sweep, CliError, PipelineConfig, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "stanncr", version, about = "Spatio-temporal action recognition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config (JSON). Defaults to a small synthetic run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for reusable stage artifacts.
    #[arg(long)]
    stage_cache: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest the dataset.
    Synth(Common),
    /// Run through codebook training.
    Codebook(Common),
    /// Run through histogram, STP and STDV encoding.
    Encode(Common),
    /// Run through ST-GNMF training.
    Train(Common),
    /// Run through test-fold encoding.
    EncodeTest(Common),
    /// Run the full pipeline (same as `pipeline`).
    Classify(Common),
    /// Run the full pipeline.
    Pipeline(Common),
    /// Run the pipeline once per parameter value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of beta, lambda, k_c, g, c.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Compare BoVW, GNMF, ST-GNMF and pseudoinverse encoders.
    Compare(Common),
}

fn load(common: &Common) -> Result<(PipelineConfig, PathBuf), CliError> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default_synth(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("stanncr_out"));
    Ok((cfg, out))
}

fn run_until(common: &Common, until: Stage) -> Result<(), CliError> {
    let (cfg, out) = load(common)?;
    let opts = RunOptions {
        out: out.clone(),
        cache: common.stage_cache.clone(),
        until,
    };
    let report = run_pipeline(&cfg, &opts)?;
    match report.metrics {
        Some(m) => println!(
            "{} fold(s): mean accuracy {:.4}, mean class accuracy {:.4} -> {}",
            m.folds.len(),
            m.mean_accuracy,
            m.mean_macro_accuracy,
            out.display()
        ),
        None => println!("stage `{}` done -> {}", until.name(), out.display()),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => run_until(&c, Stage::Dataset),
        Command::Codebook(c) => run_until(&c, Stage::Codebook),
        Command::Encode(c) => run_until(&c, Stage::Encode),
        Command::Train(c) => run_until(&c, Stage::Train),
        Command::EncodeTest(c) => run_until(&c, Stage::EncodeTest),
        Command::Classify(c) | Command::Pipeline(c) => run_until(&c, Stage::Classify),
        Command::Sweep { common, param, values } => {
            let param = SweepParam::parse(&param)?;
            let (cfg, out) = load(&common)?;
            let report = sweep(&cfg, param, &values, &out, common.stage_cache.clone())?;
            for r in &report.rows {
                println!(
                    "{}={}: mean class accuracy {:.4}",
                    param.name(),
                    r.value,
                    r.mean_macro_accuracy
                );
            }
            println!(
                "best {}={} -> {}",
                param.name(),
                report.best_value,
                out.join("sweep.csv").display()
            );
            Ok(())
        }
        Command::Compare(c) => {
            let (cfg, out) = load(&c)?;
            let report = compare_encoders(&cfg, &out, c.stage_cache.clone())?;
            for (m, acc) in &report.summary {
                println!("{m:?}: mean class accuracy {acc:.4}");
            }
            Ok(())
        }
    }
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
