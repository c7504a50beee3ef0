use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use zdc_corrvae::cli::{self, CliError};

/// Calorimeter response surrogate: synthesize data, train the
/// three-latent-space model, generate controlled responses, evaluate.
#[derive(Parser)]
#[command(name = "zdc-corrvae", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a toy shower dataset
    Synth {
        /// Number of records (overrides the config)
        #[arg(long)]
        n: Option<usize>,
        /// Synthesizer seed (overrides the config)
        #[arg(long)]
        seed: Option<u64>,
        /// JSON run configuration
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset file (.zdc1)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input dataset (.zdc1)
        #[arg(long)]
        data: PathBuf,
        /// Output directory (checkpoint.zdc1, history.csv, run.json)
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate responses for given particles and property targets
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file or inline JSON particle(s)
        #[arg(long)]
        particles: String,
        /// Inline JSON target row(s), or "from-records"
        #[arg(long, allow_hyphen_values = true)]
        targets: String,
        /// Samples per particle/target pair
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output samples file (.zdc1)
        #[arg(long)]
        out: PathBuf,
        /// Zero out pixels below this threshold
        #[arg(long)]
        postproc_threshold: Option<f32>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Decode a sweep of one controllable latent coordinate
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which w coordinate to sweep (0-based)
        #[arg(long)]
        dim: usize,
        #[arg(long, allow_hyphen_values = true, default_value_t = -2.0)]
        from: f64,
        #[arg(long, allow_hyphen_values = true, default_value_t = 2.0)]
        to: f64,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        /// Output directory (strip.pgm, com.csv, run.json)
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against a held-out dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference dataset (.zdc1)
        #[arg(long)]
        data: PathBuf,
        /// Output directory (report.json, channels.csv, graymaps)
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Summarize any .zdc1 container
    Inspect {
        #[arg(long)]
        file: PathBuf,
    },
}

fn main() -> ExitCode {
    // optional parallelism hint; outputs do not depend on it
    if let Ok(threads) = std::env::var("ZDC_CORRVAE_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { n, seed, config, out } => {
            cli::cmd_synth(n, seed, config.as_deref(), &out)
        }
        Command::Train { config, data, out } => cli::cmd_train(config.as_deref(), &data, &out),
        Command::Generate {
            checkpoint,
            particles,
            targets,
            n,
            seed,
            out,
            postproc_threshold,
            config,
        } => cli::cmd_generate(
            &checkpoint,
            &particles,
            &targets,
            n,
            seed,
            &out,
            postproc_threshold,
            config.as_deref(),
        ),
        Command::Traverse { checkpoint, dim, from, to, steps, out, config } => {
            cli::cmd_traverse(&checkpoint, dim, from, to, steps, &out, config.as_deref())
        }
        Command::Eval { checkpoint, data, out, config } => {
            cli::cmd_eval(&checkpoint, &data, &out, config.as_deref())
        }
        Command::Inspect { file } => cli::cmd_inspect(&file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
