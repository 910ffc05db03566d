mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use siid_core::metrics::MetricKind;
use siid_core::net::NetConfig;
use siid_core::synth::DatasetParams;
use siid_core::train::{AlbedoLossForm, LossWeights, TrainSchedule};

use crate::config::{Baseline, RunConfig};

/// Unsupervised intrinsic image decomposition: synthetic data, siamese
/// training, inference and evaluation.
///
/// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
#[derive(Debug, Parser)]
#[command(name = "siid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic timelapse dataset.
    Generate(GenerateArgs),
    /// Train a decomposition network on a dataset.
    Train(TrainArgs),
    /// Split images into albedo and shading.
    Decompose(DecomposeArgs),
    /// Score predictions against a dataset's ground truth.
    Eval(EvalArgs),
    /// Draw report CSVs as a radar chart.
    Chart(ChartArgs),
    /// Rerun a command from the config.json it recorded.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    scenes: u64,
    /// Views (sequences) per scene.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    views: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    lightings: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    tonemaps: u64,
    /// Image width and height.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Variants with a lower mean 8-bit intensity are discarded.
    #[arg(long, default_value_t = 20.0)]
    min_intensity: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlbedoLossArg {
    Direct,
    CrossProduct,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr_start: f64,
    #[arg(long, default_value_t = 1e-5)]
    lr_end: f64,
    #[arg(long, default_value_t = 75.0)]
    kappa: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    mu_start: f64,
    #[arg(long, default_value_t = 0.01)]
    mu_end: f64,
    /// Fraction of training over which mu is annealed.
    #[arg(long, default_value_t = 0.5)]
    mu_anneal: f64,
    #[arg(long, default_value_t = 100.0)]
    nu: f64,
    #[arg(long, default_value_t = 3)]
    batch_pairs: usize,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    #[arg(long, default_value_t = 32)]
    proj_channels: usize,
    #[arg(long, default_value_t = 64)]
    conv_channels: usize,
    #[arg(long, default_value_t = 5)]
    kernel_size: usize,
    #[arg(long, value_enum, default_value_t = AlbedoLossArg::Direct)]
    albedo_loss: AlbedoLossArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    /// Weights file written by `train`.
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    weights: Option<PathBuf>,
    /// Use a reference decomposition instead of a network.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Decompose every image of a dataset, mirroring its layout.
    #[arg(long, conflicts_with = "images")]
    dataset: Option<PathBuf>,
    /// Image files to decompose.
    #[arg(required_unless_present = "dataset")]
    images: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    dataset: PathBuf,
    /// Predictions written by `decompose --dataset`.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of lmse,whdr,saw,mre,mace.
    #[arg(long, value_delimiter = ',', default_value = "lmse,whdr,saw,mre,mace")]
    metrics: Vec<MetricKind>,
    /// Pairwise judgements sampled per sequence for WHDR.
    #[arg(long, default_value_t = 500)]
    judgements: usize,
    #[arg(long, default_value_t = 0)]
    judgement_seed: u64,
    /// MACE darkness threshold on the 0-255 scale.
    #[arg(long, default_value_t = 10.0)]
    mace_threshold: f64,
}

#[derive(Debug, Args)]
struct ChartArgs {
    /// Report CSVs; each becomes one polygon named after its file stem.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Output SVG; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    config: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl GenerateArgs {
    fn into_config(self) -> RunConfig {
        RunConfig::Generate {
            out: self.out,
            params: DatasetParams {
                n_scenes: self.scenes as usize,
                views_per_scene: self.views as usize,
                n_lightings: self.lightings as usize,
                n_tonemaps: self.tonemaps as usize,
                width: self.size,
                height: self.size,
                seed: self.seed,
                min_mean_intensity: self.min_intensity,
                ..DatasetParams::default()
            },
        }
    }
}

impl TrainArgs {
    fn into_config(self) -> RunConfig {
        RunConfig::Train {
            data: self.data,
            out: self.out,
            net: NetConfig {
                levels: self.levels,
                proj_channels: self.proj_channels,
                conv_channels: self.conv_channels,
                kernel_size: self.kernel_size,
            },
            losses: LossWeights {
                kappa: self.kappa,
                lambda: self.lambda,
                mu_start: self.mu_start,
                mu_end: self.mu_end,
                mu_anneal_fraction: self.mu_anneal,
                nu: self.nu,
                albedo_loss_form: match self.albedo_loss {
                    AlbedoLossArg::Direct => AlbedoLossForm::Direct,
                    AlbedoLossArg::CrossProduct => AlbedoLossForm::CrossProduct,
                },
            },
            schedule: TrainSchedule {
                total_iters: self.iters,
                lr_start: self.lr_start,
                lr_end: self.lr_end,
                batch_pairs: self.batch_pairs,
                seed: self.seed,
            },
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::run(a.into_config()),
        Command::Train(a) => commands::run(a.into_config()),
        Command::Decompose(a) => commands::run(RunConfig::Decompose {
            weights: a.weights,
            baseline: a.baseline,
            dataset: a.dataset,
            images: a.images,
            out: a.out,
        }),
        Command::Eval(a) => commands::run(RunConfig::Eval {
            dataset: a.dataset,
            pred: a.pred,
            out: a.out,
            options: siid_core::metrics::EvalOptions {
                metrics: a.metrics,
                judgements_per_image: a.judgements,
                judgement_seed: a.judgement_seed,
                mace_threshold: a.mace_threshold,
                ..Default::default()
            },
        }),
        Command::Chart(a) => commands::chart(&a.reports, a.out.as_deref()),
        Command::Replay(a) => commands::replay(&a.config, a.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
