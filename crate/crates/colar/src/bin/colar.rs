use clap::{Parser, Subcommand};
use colar::cli;
use colar::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "colar", about = "Compressed latent reasoning: data, training, evaluation")]
struct Cli {
    /// Run config TOML; defaults to <run-dir>/config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding all artifacts of this run.
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,
    /// Overrides the seed of every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Allow overwriting existing outputs / restarting instead of resuming.
    #[arg(long, global = true)]
    force: bool,
    /// Greedy decoding and mean latents wherever generation is involved.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic arithmetic dataset into the run directory.
    GenData,
    /// Supervised training stage; resumes from the latest step checkpoint.
    TrainSft,
    /// Reinforcement-learning stage starting from the SFT best checkpoint.
    TrainRl,
    /// Score a checkpoint over compression factors and seeds.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Latent retrieval tables and layer-growth profiles.
    Analyze {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Recheck config hashes and reload every artifact in the run directory.
    Verify,
}

#[derive(Parser)]
#[command(name = "colar")]
struct Full {
    #[command(flatten)]
    common: Cli,
    #[command(subcommand)]
    cmd: Cmd,
}

fn run(full: Full) -> colar::Result<()> {
    let Full { common, cmd } = full;
    let mut cfg = cli::resolve_config(common.config.as_deref(), &common.run_dir)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    match cmd {
        Cmd::GenData => cli::cmd_gen_data(&cfg, &common.run_dir, common.force),
        Cmd::TrainSft => cli::cmd_train_sft(&cfg, &common.run_dir, common.force),
        Cmd::TrainRl => cli::cmd_train_rl(&cfg, &common.run_dir, common.force),
        Cmd::Eval { checkpoint } => {
            cli::cmd_eval(&cfg, &common.run_dir, checkpoint.as_deref(), common.deterministic)
        }
        Cmd::Analyze { checkpoint } => {
            cli::cmd_analyze(&cfg, &common.run_dir, checkpoint.as_deref(), common.deterministic)
        }
        Cmd::Verify => cli::cmd_verify(&common.run_dir),
    }
}

fn main() -> ExitCode {
    let full = match Full::try_parse() {
        Ok(f) => f,
        Err(e) => {
            // help/version requests are successes; bad usage is exit 1
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(full) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::Parse(_))) => {
            eprintln!("error: {}", e);
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(2)
        }
    }
}
