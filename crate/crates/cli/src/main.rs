mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use earshot::Error;

#[derive(Debug, Parser)]
#[command(name = "earshot", version, about = "Interactive audio-goal navigation with language queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration with optional [train], [eval] and [scenes] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command's config section.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate test scenes and the category split manifest.
    GenScenes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run the training schedule, writing checkpoints and logs.
    Train {
        #[command(flatten)]
        common: Common,
        /// First phase to run; earlier phases are loaded from --out.
        #[arg(long, default_value = "estimator")]
        phase: String,
    },
    /// Evaluate trained checkpoints on the generated test scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        trigger: Option<String>,
        #[arg(long)]
        feedback: Option<String>,
        #[arg(long)]
        k_allowed: Option<u32>,
        /// Worker threads for episode rollouts.
        #[arg(long, env = "EARSHOT_WORKERS")]
        workers: Option<usize>,
        /// Also write trajectory logs as JSON lines.
        #[arg(long)]
        logs: bool,
    },
    /// Recompute the metrics of one logged trajectory.
    Replay {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn run(cli: Cli) -> earshot::Result<()> {
    match cli.command {
        Command::GenScenes { common, count } => {
            let cfg = commands::load_config(common.config.as_deref())?;
            commands::gen_scenes(cfg, common.seed, count, &common.out)
        }
        Command::Train { common, phase } => {
            let cfg = commands::load_config(common.config.as_deref())?;
            commands::train(cfg, common.seed, phase.parse()?, &common.out)
        }
        Command::Eval {
            common,
            checkpoints,
            scenes,
            regime,
            trigger,
            feedback,
            k_allowed,
            workers,
            logs,
        } => {
            let cfg = commands::load_config(common.config.as_deref())?;
            let opts = commands::EvalOptions {
                seed: common.seed,
                regime: regime.map(|s| s.parse()).transpose()?,
                trigger: trigger.map(|s| s.parse()).transpose()?,
                feedback: feedback.map(|s| s.parse()).transpose()?,
                k_allowed,
                workers,
                logs,
            };
            commands::eval(cfg, opts, &checkpoints, &scenes, &common.out)
        }
        Command::Replay { scenes, logs, index } => commands::replay(&scenes, &logs, index),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let body = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), 2),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e {
                Error::Usage(_) | Error::Config(_) => 2,
                _ => 1,
            };
            fail(e.kind(), &e.to_string(), code)
        }
    }
}
