//! `rider`: scoring, featurization, sampling and training from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use rider_core::config::RunConfig;
use rider_core::Error;

#[derive(Parser, Debug)]
#[command(name = "rider", version, about = "Structure-conditioned RNA sequence design")]
struct Cli {
    /// Worker threads for sampling, folding and scoring (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// More log output on stderr (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand that reads a run config.
#[derive(Args, Debug, Clone)]
pub struct RunOpts {
    /// Run config (`section.key = value` lines); built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Random seed; overrides run.seed.
    #[arg(long, env = "RIDER_SEED")]
    seed: Option<u64>,
}

impl RunOpts {
    fn load(&self) -> rider_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// GDT_TS, TM-score and RMSD of a predicted structure against a target.
    Score {
        predicted: PathBuf,
        target: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Build the k-NN graph of a structure and summarize it.
    Featurize {
        pdb: PathBuf,
        #[arg(long, default_value_t = rider_core::featurize::DEFAULT_K)]
        k: usize,
        /// Write every node and edge feature as JSON.
        #[arg(long)]
        dump_json: Option<PathBuf>,
        /// Write the conditioning embedding as JSON.
        #[arg(long)]
        embed_json: Option<PathBuf>,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Sample designs for a target structure from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, short, default_value_t = 16)]
        n: usize,
        /// Overrides sampler.temperature.
        #[arg(long)]
        temperature: Option<f64>,
        /// Overrides sampler.n_steps.
        #[arg(long)]
        steps: Option<usize>,
        /// FASTA output; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-design metrics as JSON (needs an oracle).
        #[arg(long)]
        metrics_json: Option<PathBuf>,
        /// Skip folding even if an oracle is configured.
        #[arg(long)]
        no_oracle: bool,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Fit the noise predictor on the configured tasks.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        /// Loss per iteration as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides pretrain.iterations.
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Fine-tune a checkpoint against the folding oracle.
    TrainRl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One JSON record per epoch.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides rl.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides rl.baseline_mode.
        #[arg(long, value_parser = ["reward", "batch", "moving"])]
        baseline_mode: Option<String>,
        /// Overrides rl.batch_size.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Overrides rl.learning_rate.
        #[arg(long)]
        learning_rate: Option<f64>,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Reward of a metrics triple, or of a predicted structure against a target.
    #[command(group(ArgGroup::new("source").required(true).args(["gdt", "predicted"])))]
    Reward {
        #[arg(long, requires_all = ["tm", "rmsd"])]
        gdt: Option<f64>,
        #[arg(long, requires = "gdt")]
        tm: Option<f64>,
        #[arg(long, requires = "gdt")]
        rmsd: Option<f64>,
        #[arg(long, requires = "target")]
        predicted: Option<PathBuf>,
        #[arg(long, requires = "predicted")]
        target: Option<PathBuf>,
        /// Overrides reward.base_kind.
        #[arg(long, value_parser = ["tm", "gdt", "rmsd", "gdt_rmsd"])]
        kind: Option<String>,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Fold sequences with the configured oracle and write structure files.
    #[command(group(ArgGroup::new("input").required(true).args(["sequence", "fasta"])))]
    Fold {
        #[arg(long)]
        sequence: Option<String>,
        #[arg(long)]
        fasta: Option<PathBuf>,
        /// Output file for a single sequence; stdout if absent.
        #[arg(long, conflicts_with = "out_dir")]
        out: Option<PathBuf>,
        /// One `<id>.pdb` per FASTA record.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Print the built-in defaults or a validated config file.
    #[command(group(ArgGroup::new("what").required(true).args(["defaults", "check"])))]
    Config {
        #[arg(long)]
        defaults: bool,
        /// Validate this file and print it with defaults filled in.
        #[arg(long)]
        check: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numeric() || matches!(err, Error::State(_)) {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            eprintln!("error: cannot start {} workers: {e}", cli.workers);
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
