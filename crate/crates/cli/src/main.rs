use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vmdnet_cli::config::RunConfig;
use vmdnet_cli::pipeline::{self, Variant};
use vmdnet_cli::{gradcheck, ingest, PipelineError};

#[derive(Parser)]
#[command(
    name = "vmdnet",
    about = "Decomposition-driven univariate forecasting: sample-wise VMD, bilevel (K, alpha) selection, per-mode TCN forecaster",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override seeds, comma-separated (e.g. 2021,2022).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override window.lookback.
    #[arg(long)]
    lookback: Option<usize>,
    /// Override window.horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Override window.stride.
    #[arg(long)]
    stride: Option<usize>,
    /// Override vmd.num_modes.
    #[arg(long)]
    num_modes: Option<usize>,
    /// Override vmd.alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override worker thread count for decomposition (0 = default pool).
    #[arg(long)]
    workers: Option<usize>,
    /// Override train.max_epochs.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Override train.batch_size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override model.d_model.
    #[arg(long)]
    d_model: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.lookback {
            cfg.window.lookback = v;
        }
        if let Some(v) = self.horizon {
            cfg.window.horizon = v;
        }
        if let Some(v) = self.stride {
            cfg.window.stride = v;
        }
        if let Some(v) = self.num_modes {
            cfg.vmd.num_modes = v;
        }
        if let Some(v) = self.alpha {
            cfg.vmd.alpha = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.train.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.d_model {
            cfg.model.d_model = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Window every split and write the binary mode caches.
    Decompose(ConfigArgs),
    /// Select (K, alpha) with the bilevel search; writes trace and summary.
    Search(ConfigArgs),
    /// Full experiment: per-seed training, evaluation, and the aggregate.
    Train(ConfigArgs),
    /// Evaluate a saved checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path (default: first seed's).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report metrics in the data's original units instead of the
        /// normalized scale.
        #[arg(long)]
        original_units: bool,
    },
    /// Forecast the horizon following the end of the test split.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        original_units: bool,
    },
    /// Run model variants side by side under shared seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated subset of: full, no_vmd, no_freq, no_parallel,
        /// fixed_params.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Finite-difference verification of the differentiation engine.
    Gradcheck,
    /// Generate a synthetic hourly CSV (daily + weekly cycles with AR noise).
    Synth {
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 20160)]
        len: usize,
        #[arg(long, default_value_t = 0.15)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(cmd: Cmd) -> Result<(), PipelineError> {
    match cmd {
        Cmd::Decompose(args) => {
            let cfg = args.load()?;
            let provider = pipeline::prepare(&cfg)?;
            for split in [pipeline::Split::Train, pipeline::Split::Val, pipeline::Split::Test] {
                let ds = pipeline::decomposed_split(
                    &cfg,
                    &provider,
                    split,
                    cfg.vmd.num_modes,
                    cfg.vmd.alpha,
                )?;
                println!(
                    "{}: {} windows, K={}, P={}, F={} (cache under {})",
                    split.name(),
                    ds.num_windows,
                    ds.num_modes,
                    ds.lookback,
                    ds.horizon,
                    cfg.output_dir.join("cache").display()
                );
            }
            Ok(())
        }
        Cmd::Search(args) => {
            let cfg = args.load()?;
            let provider = pipeline::prepare(&cfg)?;
            let (result, trace) = pipeline::run_search(&cfg, &provider)?;
            println!(
                "chosen K={} alpha={:.2} ({} criteria evaluations, {} restarts)",
                result.chosen_k,
                result.chosen_alpha,
                trace.len(),
                result.restart_traces.len()
            );
            for row in &result.per_k_table {
                println!(
                    "  K={:<3} alpha*={:<10.2} MIC={:<10.5} FIC={:.2}{}",
                    row.k,
                    row.alpha_star,
                    row.mic,
                    row.fic,
                    if row.failed { "  [failed]" } else { "" }
                );
            }
            Ok(())
        }
        Cmd::Train(args) => {
            let cfg = args.load()?;
            let summary = pipeline::run_experiment(&cfg)?;
            for seed in &summary.per_seed {
                println!(
                    "seed {}: test MSE {:.6}, MAE {:.6} (best epoch {})",
                    seed.seed, seed.test.mse, seed.test.mae, seed.history.best_epoch
                );
            }
            for (seed, err) in &summary.failures {
                eprintln!("seed {seed} failed: {err}");
            }
            let a = &summary.aggregate;
            println!(
                "aggregate over {} seeds: MSE {:.6} +- {:.6}, MAE {:.6} +- {:.6}",
                a.successes, a.mean_mse, a.std_mse, a.mean_mae, a.std_mae
            );
            Ok(())
        }
        Cmd::Evaluate {
            cfg,
            checkpoint,
            original_units,
        } => {
            let cfg = cfg.load()?;
            let metrics = pipeline::evaluate_checkpoint(&cfg, checkpoint, original_units)?;
            println!(
                "test MSE {:.6}, MAE {:.6} over {} windows{}",
                metrics.mse,
                metrics.mae,
                metrics.num_windows,
                if original_units {
                    " (original units)"
                } else {
                    " (normalized)"
                }
            );
            Ok(())
        }
        Cmd::Predict {
            cfg,
            checkpoint,
            original_units,
        } => {
            let cfg = cfg.load()?;
            let prediction = pipeline::predict(&cfg, checkpoint, original_units)?;
            let rendered: Vec<String> =
                prediction.values.iter().map(|v| format!("{v:.6}")).collect();
            println!("{}", rendered.join(","));
            Ok(())
        }
        Cmd::Ablate { cfg, variants } => {
            let cfg = cfg.load()?;
            let variants = match variants {
                Some(names) => names
                    .iter()
                    .map(|n| Variant::parse(n))
                    .collect::<Result<Vec<_>, _>>()?,
                None => Variant::ALL.to_vec(),
            };
            let table = pipeline::run_ablation(&cfg, &variants)?;
            print!("{}", table.render());
            Ok(())
        }
        Cmd::Gradcheck => {
            let results = gradcheck::run_all();
            let mut ok = true;
            for r in &results {
                println!(
                    "{}: max relative error {:.3e} -> {}",
                    r.name,
                    r.max_rel_err,
                    if r.passed { "PASS" } else { "FAIL" }
                );
                ok &= r.passed;
            }
            if ok {
                Ok(())
            } else {
                Err(PipelineError::Numeric(
                    "gradient check failed; see lines above".into(),
                ))
            }
        }
        Cmd::Synth {
            output,
            len,
            noise,
            seed,
        } => {
            ingest::write_synthetic_csv(&output, len, noise, seed)
                .map_err(|e| PipelineError::Data(format!("cannot write {}: {e}", output.display())))?;
            println!("wrote {} samples to {}", len, output.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
