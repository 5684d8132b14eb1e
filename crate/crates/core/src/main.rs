//! `remac-lab` command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use remac_lab::harness::commands::{self, RunContext};
use remac_lab::harness::config::ExperimentConfig;
use remac_lab::Result;

#[derive(Parser)]
#[command(
    name = "remac-lab",
    version,
    about = "Masked action-chunk fine-tuning under asynchronous inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for every stage.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory [default: ./runs/<timestamp>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Inputs {
    /// Dataset from `gen-data`; generated from the seed when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Base checkpoint from `pretrain`; trained when absent.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Adapter from `remac`; trained when absent.
    #[arg(long)]
    adapter: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the expert and write a chunked dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the base flow-matching policy.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune adapters with prefix masking.
    Remac {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Evaluate the configured strategies on the delay grid.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Full pipeline: training, main sweep, robustness, kinematics, plots.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Fine-tune and evaluate the ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Render plots from a summary table.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Summary CSV written by `eval` or `sweep`.
        #[arg(long)]
        summary: PathBuf,
    },
}

fn context(common: &Common) -> Result<RunContext> {
    let config = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(chrono::Local::now().format("%Y%m%d-%H%M%S").to_string()));
    Ok(RunContext::new(config, common.seed, out))
}

fn with_inputs(
    mut ctx: RunContext,
    data: Option<PathBuf>,
    base: Option<PathBuf>,
    adapter: Option<PathBuf>,
) -> RunContext {
    ctx.data = data;
    ctx.base = base;
    ctx.adapter = adapter;
    ctx
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("REMAC_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        remac_lab::Error::Config(format!("REMAC_LAB_THREADS must be a positive integer, got '{raw}'"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| remac_lab::Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<PathBuf> {
    configure_threads()?;
    let ctx = match &cli.command {
        Command::GenData { common } => {
            let ctx = context(common)?;
            commands::gen_data(&ctx)?;
            ctx
        }
        Command::Pretrain { common, data } => {
            let ctx = with_inputs(context(common)?, data.clone(), None, None);
            commands::pretrain(&ctx)?;
            ctx
        }
        Command::Remac { common, data, base } => {
            let ctx = with_inputs(context(common)?, data.clone(), base.clone(), None);
            commands::remac(&ctx)?;
            ctx
        }
        Command::Eval { common, inputs } => {
            let ctx = with_inputs(
                context(common)?,
                inputs.data.clone(),
                inputs.base.clone(),
                inputs.adapter.clone(),
            );
            commands::eval(&ctx)?;
            ctx
        }
        Command::Sweep { common, inputs } => {
            let ctx = with_inputs(
                context(common)?,
                inputs.data.clone(),
                inputs.base.clone(),
                inputs.adapter.clone(),
            );
            commands::sweep(&ctx)?;
            ctx
        }
        Command::Ablate { common, data, base } => {
            let ctx = with_inputs(context(common)?, data.clone(), base.clone(), None);
            commands::ablate(&ctx)?;
            ctx
        }
        Command::Plot { common, summary } => {
            let ctx = context(common)?;
            commands::plot(&ctx, summary)?;
            ctx
        }
    };
    Ok(ctx.out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            eprintln!("[remac-lab] done: {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
