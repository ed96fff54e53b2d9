use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ifield::pipeline::{self, PipelineConfig};
use ifield::volume::Dims;

#[derive(Parser, Debug)]
#[command(name = "ifield", version, about = "Implicit-field anomaly localization pipeline")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Shared {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives the bit-stable path.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Synth {
        /// Edge length of the cubic volumes.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        n_healthy: Option<usize>,
        #[arg(long)]
        n_anomalous: Option<usize>,
    },
    /// Fit the intensity codebook on the training split.
    FitCodebook {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Normalize, encode and mode-pool every volume.
    Encode {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Window for all splits.
        #[arg(long)]
        mode_pool: Option<usize>,
    },
    /// Train the network and the training latents.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Points sampled per volume and batch.
        #[arg(long)]
        points: Option<usize>,
    },
    /// Retrieve latents, restore and score validation and test volumes.
    Restore {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Points sampled per optimization step.
        #[arg(long)]
        points: Option<usize>,
    },
    /// Compute metrics on the test split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Restore directory whose validation split sets the threshold.
        #[arg(long)]
        threshold_from: Option<PathBuf>,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn resolve(cli: Cli) -> Result<(PipelineConfig, Command)> {
    let mut config = match &cli.shared.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    set(&mut config.seed, cli.shared.seed);
    set(&mut config.out, cli.shared.out);
    set(&mut config.workers, cli.shared.workers);
    match &cli.command {
        Command::Synth {
            size,
            n_healthy,
            n_anomalous,
        } => {
            set(&mut config.synth.dims, size.map(Dims::cube));
            set(&mut config.synth.n_healthy, *n_healthy);
            set(&mut config.synth.n_anomalous, *n_anomalous);
        }
        Command::FitCodebook { data, k } => {
            set(&mut config.data, data.clone().map(Some));
            set(&mut config.kmeans.k, *k);
        }
        Command::Encode {
            data,
            codebook,
            mode_pool,
        } => {
            set(&mut config.data, data.clone().map(Some));
            set(&mut config.codebook, codebook.clone().map(Some));
            set(&mut config.mode_pool_train, *mode_pool);
            set(&mut config.mode_pool_test, *mode_pool);
        }
        Command::Train { data, epochs, points } => {
            set(&mut config.data, data.clone().map(Some));
            set(&mut config.train.epochs, *epochs);
            set(&mut config.train.points_per_volume, *points);
        }
        Command::Restore {
            data,
            checkpoint,
            steps,
            points,
        } => {
            set(&mut config.data, data.clone().map(Some));
            set(&mut config.checkpoint, checkpoint.clone().map(Some));
            set(&mut config.infer.steps, *steps);
            set(&mut config.infer.points, *points);
        }
        Command::Eval { data, threshold_from } => {
            set(&mut config.data, data.clone().map(Some));
            set(&mut config.threshold_from, threshold_from.clone().map(Some));
        }
    }
    Ok((config, cli.command))
}

fn run(cli: Cli) -> Result<()> {
    let (config, command) = resolve(cli)?;
    let out = config.out.display().to_string();
    match command {
        Command::Synth { .. } => {
            let manifest = pipeline::run_synth(&config)?;
            println!("{out}: {} volumes", manifest.entries.len());
        }
        Command::FitCodebook { .. } => {
            let fit = pipeline::run_fit_codebook(&config)?;
            println!("{out}/{}: k = {}", pipeline::CODEBOOK_FILE, fit.codebook.k);
        }
        Command::Encode { .. } => {
            let manifest = pipeline::run_encode(&config)?;
            println!("{out}: {} label volumes", manifest.entries.len());
        }
        Command::Train { .. } => {
            let summary = pipeline::run_train(&config)?;
            let last = summary.history.objective.last().copied().unwrap_or(f64::NAN);
            println!("{}: final objective {last:.6}", summary.checkpoint.display());
        }
        Command::Restore { .. } => {
            for s in pipeline::run_restore(&config)? {
                println!(
                    "{out}/{}.as-post.vol: objective {:.6}, mean AS {:.6}",
                    s.id, s.final_objective, s.mean_score
                );
            }
        }
        Command::Eval { .. } => {
            let report = pipeline::run_eval(&config)?;
            print!("{}", report.to_text()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
