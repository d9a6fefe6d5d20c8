use clap::{Parser, Subcommand};
use sarl_harness::config::RunConfig;
use sarl_harness::pipeline::{self, AblationSwitch};
use sarl_harness::HarnessError;
use std::path::PathBuf;
use std::process::ExitCode;

/// Safe adaptive model-based RL: pre-training, constrained adaptive
/// training, grid evaluation, ablations, and prediction-error reports.
#[derive(Parser)]
#[command(name = "sarl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Environment id; overrides the config file.
    #[arg(long, global = true, value_parser = ["cartpole", "planarfeed"])]
    env: Option<String>,

    /// Dot-path config overrides, e.g. --override plan.horizon=12
    #[arg(long = "override", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the prior model at nominal parameters, constraints off.
    Pretrain,
    /// Adaptive episodes with constrained planning and model learning.
    Adapt {
        /// Prior checkpoint from `pretrain`.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Evaluate frozen checkpoints over a disturbance grid.
    EvalGrid {
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        disturbance: Option<PathBuf>,
    },
    /// Paired adapt runs with one ablation switch flipped.
    Ablate {
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long, value_enum)]
        switch: AblationSwitch,
    },
    /// Safe/unsafe one-step prediction MSE over a stored buffer.
    MseReport {
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        disturbance: Option<PathBuf>,
        #[arg(long)]
        buffer: Option<PathBuf>,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={}", seed));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("out_dir={}", serde_json::json!(out)));
    }
    if let Some(env) = &cli.env {
        overrides.push(format!("env={}", env));
    }
    match &cli.command {
        Command::Adapt { prior } | Command::Ablate { prior, .. } => {
            if let Some(p) = prior {
                overrides.push(format!("prior_checkpoint={}", serde_json::json!(p)));
            }
        }
        Command::EvalGrid { prior, disturbance } => {
            if let Some(p) = prior {
                overrides.push(format!("prior_checkpoint={}", serde_json::json!(p)));
            }
            if let Some(d) = disturbance {
                overrides.push(format!("disturbance_checkpoint={}", serde_json::json!(d)));
            }
        }
        Command::MseReport {
            prior,
            disturbance,
            buffer,
        } => {
            if let Some(p) = prior {
                overrides.push(format!("prior_checkpoint={}", serde_json::json!(p)));
            }
            if let Some(d) = disturbance {
                overrides.push(format!("disturbance_checkpoint={}", serde_json::json!(d)));
            }
            if let Some(b) = buffer {
                overrides.push(format!("buffer_dir={}", serde_json::json!(b)));
            }
        }
        Command::Pretrain => {}
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Pretrain => {
            let art = pipeline::pretrain(&cfg)?;
            println!("prior checkpoint: {}", art.prior_path.display());
            println!("pretraining data: {}", art.data_dir.display());
            println!("metrics: {}", art.metrics_path.display());
        }
        Command::Adapt { .. } => {
            let art = pipeline::adapt(&cfg)?;
            println!("disturbance checkpoint: {}", art.disturbance_path.display());
            println!("replay buffer: {}", art.buffer_dir.display());
            println!("metrics: {}", art.metrics_path.display());
        }
        Command::EvalGrid { .. } => {
            let path = pipeline::eval_grid(&cfg)?;
            println!("grid metrics: {}", path.display());
        }
        Command::Ablate { switch, .. } => {
            let path = pipeline::ablate(&cfg, *switch)?;
            println!("ablation summary: {}", path.display());
        }
        Command::MseReport { .. } => {
            let path = pipeline::mse_report(&cfg)?;
            println!("mse table: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": true,
                "kind": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{}", payload);
            ExitCode::FAILURE
        }
    }
}
