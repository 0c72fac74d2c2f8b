//! `pa-diffusion`: dataset generation, training, sampling and evaluation for
//! quality-guided multi-shot diffusion restoration.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use pa_diffusion::dataset::Split;
use pa_diffusion::evaluation::Method;
use pa_diffusion::sampler::Mode;
use pa_diffusion::trainer::ConditionMode;

use crate::commands::Ctx;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "pa-diffusion", version, about = "Quality-guided diffusion restoration from few single-shot images")]
struct Cli {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (default: config `out`, then $PA_DIFFUSION_OUT, then ./runs).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the phantom dataset into <out>/data.
    GenData,
    /// Train a noise predictor into <out>/models/<name>.
    Train(TrainCli),
    /// Restore one sample, optionally dumping the reverse trajectory.
    Sample(SampleCli),
    /// Score methods on the test split into <out>/eval.
    Evaluate(EvalCli),
    /// Local SSIM against confidence from saved evaluation outputs.
    Correlate(CorrelateCli),
    /// Guidance grid on the validation split into <out>/sweep.
    Sweep(SweepCli),
    /// Render the CSV outputs to PNG figures in <out>/plots.
    Plot,
}

#[derive(Args)]
struct TrainCli {
    /// `single` or `multi`.
    #[arg(long)]
    mode: ConditionMode,
    /// Model directory name (default: the mode).
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Condition dropout probability (enables classifier-free guidance).
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args)]
struct SampleCli {
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// ddpm_single, ddpm_multi, guided or cfg.
    #[arg(long, default_value = "guided")]
    mode: Mode,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    t_guide: Option<usize>,
    /// Mix single-shot predictions without confidence weights.
    #[arg(long)]
    no_confidence: bool,
    /// Save every N-th reverse step (default 50 when the flag is bare).
    #[arg(long, value_name = "N", num_args = 0..=1, default_missing_value = "50")]
    trace: Option<usize>,
}

#[derive(Args)]
struct EvalCli {
    /// Number of test samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Comma-separated methods, e.g. baseline,ddpm_single,guided.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
}

#[derive(Args)]
struct CorrelateCli {
    /// Evaluated output set, e.g. ddpm_single or guided_w10_h.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args)]
struct SweepCli {
    /// Number of validation samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    ws: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    t_guides: Option<Vec<usize>>,
}

fn run(cli: Cli) -> Result<()> {
    if cli.device != "cpu" {
        bail!("device {:?} is not available; this build runs on the cpu only", cli.device);
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out = cfg.resolve_out(cli.out.as_deref());
    let seed = cli.seed.unwrap_or(cfg.seed);
    log::info!("output root {}, seed {seed}", out.display());
    let ctx = Ctx { cfg, out, seed };
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Train(a) => {
            commands::train(&ctx, &commands::TrainArgs { mode: a.mode, name: a.name, iterations: a.iterations, dropout: a.dropout })
        }
        Command::Sample(a) => {
            let mut guidance = ctx.cfg.sample.guidance;
            if let Some(w) = a.w {
                guidance.w = w;
            }
            if let Some(g) = a.t_guide {
                guidance.t_guide = g;
            }
            if a.no_confidence {
                guidance.use_confidence = false;
            }
            let args = commands::SampleArgs { split: a.split, index: a.index, mode: a.mode, guidance, trace: a.trace };
            commands::sample_cmd(&ctx, &args)
        }
        Command::Evaluate(a) => commands::evaluate_cmd(&ctx, &commands::EvalArgs { limit: a.limit, methods: a.methods }),
        Command::Correlate(a) => commands::correlate_cmd(&ctx, &commands::CorrelateArgs { method: a.method }),
        Command::Sweep(a) => commands::sweep_cmd(&ctx, &commands::SweepArgs { limit: a.limit, ws: a.ws, t_guides: a.t_guides }),
        Command::Plot => {
            for p in plot::plot_all(&ctx.out)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
