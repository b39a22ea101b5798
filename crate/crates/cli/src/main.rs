use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recrag::gateway::MockKind;
use recrag::runner::{self, ExperimentConfig, Prepared, RunOptions, RunStatus};
use recrag::Error;

#[derive(Parser)]
#[command(name = "recrag", version, about = "Neighbor-augmented LLM recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split the dataset, sample the cohort and cache neighbors.
    Prepare(Common),
    /// Run or resume the full sweep.
    Run(RunArgs),
    /// Rebuild aggregate.csv and CDF files from an existing results.csv.
    Report {
        /// Run output directory.
        dir: PathBuf,
    },
    /// Train the matrix factorization baseline and save its checkpoint.
    MfTrain(Common),
    /// Write every prompt of the sweep to a directory.
    DumpPrompts {
        #[command(flatten)]
        common: Common,
        /// Destination (default: <output_dir>/prompts).
        #[arg(long)]
        to: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    sample_size: Option<usize>,
    /// Mock backend kind: oracle_leak, popularity, random or echo.
    #[arg(long)]
    mock: Option<MockKind>,
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Allow requests to the configured external API.
    #[arg(long)]
    live: bool,
    /// Use the live smoke preset (reasoning, k=10, f=1.0, 20 cold users). Implies --live.
    #[arg(long)]
    live_smoke: bool,
    /// Stop after this many new trials; the run can be resumed later.
    #[arg(long)]
    max_trials: Option<usize>,
}

impl Common {
    fn resolve(&self, smoke: bool) -> Result<ExperimentConfig, Error> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if smoke {
            let base = config.clone();
            config = ExperimentConfig::live_smoke(base.dataset.path.clone(), base.output_dir.clone(), base.seed.unwrap_or(0));
            config.seed = base.seed;
            config.backend.http = base.backend.http;
            config.gateway = base.gateway;
        }
        if let Some(seed) = self.seed {
            config.seed = Some(seed);
        }
        if let Some(path) = &self.dataset {
            config.dataset.path = path.clone();
        }
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(n) = self.sample_size {
            config.cohort.sample_size = n;
        }
        if let Some(kind) = self.mock {
            config.backend.mock = kind;
        }
        if let Some(n) = self.concurrency {
            config.gateway.concurrency = n;
        }
        config.validate()?;
        Ok(config)
    }
}

fn execute(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Prepare(common) => {
            let config = common.resolve(false)?;
            let prepared = Prepared::load(&config)?;
            runner::prepare_outputs(&config, &prepared)?;
            println!(
                "{} users, {} items, {} ratings; cohort {} hot / {} cold; wrote {}",
                prepared.matrix.n_users(),
                prepared.matrix.n_items(),
                prepared.matrix.len(),
                prepared.cohort.hot_users.len(),
                prepared.cohort.cold_users.len(),
                config.output_dir.display()
            );
            Ok(0)
        }
        Command::Run(args) => {
            let config = args.common.resolve(args.live_smoke)?;
            let options = RunOptions {
                live: args.live || args.live_smoke,
                max_new_trials: args.max_trials,
                backend: None,
            };
            let summary = runner::run(&config, options)?;
            match &summary.status {
                RunStatus::Completed => println!(
                    "completed {} trials ({} new, {} failed, {:.1}% failure rate); config {}",
                    summary.total_trials,
                    summary.new_trials,
                    summary.failed,
                    100.0 * summary.failure_rate(),
                    &summary.config_hash[..12]
                ),
                RunStatus::Aborted(reason) => eprintln!(
                    "run stopped after {} of {} trials: {reason}",
                    summary.records.len(),
                    summary.total_trials
                ),
            }
            Ok(summary.exit_code())
        }
        Command::Report { dir } => {
            let files = runner::report(&dir)?;
            println!("wrote {} and {} CDF files", files.aggregate.display(), files.cdfs.len());
            Ok(0)
        }
        Command::MfTrain(common) => {
            let config = common.resolve(false)?;
            let prepared = Prepared::load(&config)?;
            let model = prepared.train_mf(&config)?;
            std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::Io {
                path: config.output_dir.clone(),
                source: e,
            })?;
            let path = config.output_dir.join("mf_model.bin");
            model.save(&path)?;
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::DumpPrompts { common, to } => {
            let config = common.resolve(false)?;
            let prepared = Prepared::load(&config)?;
            let dir = to.unwrap_or_else(|| config.output_dir.join("prompts"));
            let n = runner::dump_prompts(&config, &prepared, &dir)?;
            println!("wrote {n} prompts to {}", dir.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(Error::Config(problems)) => {
            eprintln!("invalid configuration:");
            for p in problems {
                eprintln!("  - {p}");
            }
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
