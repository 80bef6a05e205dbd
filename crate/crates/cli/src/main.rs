mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or arguments (exit 2).
    Config(String),
    /// Anything that went wrong while running (exit 1).
    Runtime(String),
}

impl From<mogan_core::Error> for Failure {
    fn from(e: mogan_core::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(name = "mogan", version, about = "Motion-space adversarial post-training on a synthetic sprite corpus")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus to disk.
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Fit the teacher velocity field to a corpus.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        name: String,
    },
    /// Post-train a few-step generator.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        name: String,
        /// Comma-separated: no_dmd, no_r1r2, video_disc.
        #[arg(long)]
        ablation: Option<String>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Pretrained teacher; defaults to the run's own, pretraining one if absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Compare two checkpoints on a prompt set with a shared seed list.
    Eval {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `eval`, `train`, or a JSON prompt file.
        #[arg(long, default_value = "eval")]
        prompts: String,
        #[arg(long)]
        out: PathBuf,
        /// Eval seeds and metric settings come from this config's `[eval]`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip the per-clip flow PNGs.
        #[arg(long)]
        no_flow_png: bool,
    },
    /// Write flow visualizations for one corpus clip.
    Viz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clip: u64,
        #[arg(long)]
        out: PathBuf,
        /// Draw the exact flow instead of the estimate.
        #[arg(long)]
        truth: bool,
    },
    /// Plot loss curves from a run's metrics log.
    Curves {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Datagen {
            config,
            out,
            seed,
            force,
        } => commands::datagen(config.as_deref(), &out, seed, force),
        Command::Pretrain { config, data, name } => commands::pretrain(config.as_deref(), &data, &name),
        Command::Train {
            config,
            data,
            name,
            ablation,
            resume,
            steps,
            seed,
            teacher,
        } => commands::train(commands::TrainArgs {
            config,
            data,
            name,
            ablation,
            resume,
            steps,
            seed,
            teacher,
        }),
        Command::Eval {
            a,
            b,
            data,
            prompts,
            out,
            config,
            no_flow_png,
        } => commands::eval(commands::EvalArgs {
            a,
            b,
            data,
            prompts,
            out,
            config,
            flow_png: !no_flow_png,
        }),
        Command::Viz { data, clip, out, truth } => commands::viz(&data, clip, &out, truth),
        Command::Curves { run, out } => commands::curves(&run, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
