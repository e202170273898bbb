use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmdrnn::cli::{self, EvalData, Manifest, RunOptions};
use cmdrnn::training::EvalMode;
use cmdrnn::Error;

/// Convolutional mixture density recurrent network: data generation,
/// training, evaluation and model comparison.
#[derive(Parser)]
#[command(name = "cmdrnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Base seed; overrides the manifest's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the manifest's `out_dir` (default `out`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Parallel runs; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic RSSI trajectory as CSV.
    Generate {
        /// Synthetic generator config (`key = value`); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and save its checkpoint and loss trace.
    Train {
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint and append the result to `eval.csv`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on the test split of this manifest's dataset.
        #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
        manifest: Option<PathBuf>,
        /// Evaluate on every window of this CSV.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// mle, mixture-mean or sample.
        #[arg(long, default_value = "mle")]
        mode: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train all model variants over several seeds and tabulate test RMSE.
    Compare {
        manifest: PathBuf,
        /// Runs per variant; overrides the manifest's `runs`.
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the manifest variant over a list of mixture counts.
    Sweep {
        manifest: PathBuf,
        /// Comma-separated mixture counts; overrides `sweep_mixtures`.
        #[arg(long, value_delimiter = ',')]
        mixtures: Option<Vec<usize>>,
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn options(common: &Common, runs: Option<usize>) -> RunOptions {
    RunOptions {
        seed: common.seed,
        out_dir: common.out_dir.clone(),
        runs,
        jobs: common.jobs,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let d = cli::cmd_generate(config.as_deref(), &out, seed)?;
            eprintln!(
                "wrote {} scans of {} access points to {} ({:.1}% undetected)",
                d.len(),
                d.dim(),
                out.display(),
                100.0 * d.sentinel_fraction()
            );
        }
        Command::Train { manifest, common } => {
            let m = Manifest::read(&manifest)?;
            let out = cli::cmd_train(&m, &options(&common, None))?;
            println!("{}", cli::METRICS_HEADER);
            println!("{}", out.record.to_csv_row());
            eprintln!("checkpoint: {}", out.checkpoint.display());
            eprintln!("loss trace: {}", out.trace.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            dataset,
            mode,
            common,
        } => {
            let mode: EvalMode = mode.parse()?;
            let m = manifest.as_deref().map(Manifest::read).transpose()?;
            let data = match (&m, &dataset) {
                (Some(m), _) => EvalData::Manifest(m),
                (None, Some(d)) => EvalData::Csv(d),
                (None, None) => return Err(Error::Config("one of --manifest or --dataset is required".into())),
            };
            let seed = common.seed.or(m.as_ref().map(|m| m.train.seed)).unwrap_or(0);
            let out_dir = common
                .out_dir
                .clone()
                .or_else(|| m.as_ref().and_then(|m| m.out_dir.clone()))
                .unwrap_or_else(|| PathBuf::from("out"));
            let rec = cli::cmd_eval(&checkpoint, data, mode, seed, &out_dir)?;
            println!("{}", cli::METRICS_HEADER);
            println!("{}", rec.to_csv_row());
        }
        Command::Compare { manifest, runs, common } => {
            let m = Manifest::read(&manifest)?;
            let out = cli::cmd_compare(&m, &options(&common, runs))?;
            print!("{}", cli::summary_csv(&out.summary));
        }
        Command::Sweep {
            manifest,
            mixtures,
            runs,
            common,
        } => {
            let m = Manifest::read(&manifest)?;
            let out = cli::cmd_sweep(&m, mixtures.as_deref(), &options(&common, runs))?;
            print!("{}", cli::summary_csv(&out.summary));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
