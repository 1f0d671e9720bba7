//! `exitlab` command-line interface.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use exitlab::cli;
use exitlab::runcfg::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "exitlab",
    about = "Train and analyze early-exit decoder-only transformers at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// TOML run configuration (defaults apply when omitted)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker thread count (0 = all cores)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the plain base transformer on a synthetic task
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Calibrate exit heads by self-distillation from a base checkpoint
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        /// Base checkpoint produced by `pretrain`
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// KL temperature for the survival sigmoid
        #[arg(long = "kl-factor")]
        kl_factor: Option<f64>,
    },
    /// Reward earlier exits with leave-one-out REINFORCE
    Rl {
        #[command(flatten)]
        common: CommonArgs,
        /// Calibrated checkpoint produced by `calibrate`
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Depth penalty weight
        #[arg(long)]
        lambda: Option<f64>,
        /// KL-to-base penalty weight
        #[arg(long)]
        beta: Option<f64>,
        /// Rollouts per prompt
        #[arg(long)]
        k: Option<usize>,
        /// Training steps
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate with stochastic exits and render the per-token exit map
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Prompt text
        #[arg(long)]
        prompt: String,
        /// Exit-logit offset (positive = exit earlier)
        #[arg(long)]
        offset: Option<f64>,
        /// Disable terminal colors
        #[arg(long = "no-color")]
        no_color: bool,
    },
    /// Calibrate at several KL factors and tabulate exit rate, ALS, accuracy
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Comma-separated KL factors
        #[arg(long = "kl-factors", default_value = "0.25,0.5,1.0,2.0,4.0")]
        kl_factors: String,
    },
}

fn build_config(common: &CommonArgs, extra: Overrides) -> exitlab::Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: common.seed,
        out: common.out.clone(),
        workers: common.workers,
        ..extra
    });
    if cfg.workers > 0 {
        // The global pool can only be set once per process; later calls
        // keep the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global();
    }
    Ok(cfg)
}

fn run(command: Command) -> exitlab::Result<()> {
    match command {
        Command::Pretrain { common } => {
            let cfg = build_config(&common, Overrides::default())?;
            cli::cmd_pretrain(&cfg)
        }
        Command::Calibrate { common, checkpoint, kl_factor } => {
            let cfg = build_config(&common, Overrides { kl_factor, ..Default::default() })?;
            cli::cmd_calibrate(&cfg, &checkpoint)
        }
        Command::Rl { common, checkpoint, lambda, beta, k, steps } => {
            let cfg = build_config(
                &common,
                Overrides { lambda, beta, k, steps, ..Default::default() },
            )?;
            cli::cmd_rl(&cfg, &checkpoint)
        }
        Command::Generate { common, checkpoint, prompt, offset, no_color } => {
            let cfg = build_config(&common, Overrides { offset, ..Default::default() })?;
            cli::cmd_generate(&cfg, &checkpoint, &prompt, no_color)
        }
        Command::Sweep { common, checkpoint, kl_factors } => {
            let cfg = build_config(&common, Overrides::default())?;
            let factors = kl_factors
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| exitlab::Error::Config(format!("bad kl factor {s:?}")))
                })
                .collect::<exitlab::Result<Vec<f64>>>()?;
            cli::cmd_sweep(&cfg, &checkpoint, &factors)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is usage
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
