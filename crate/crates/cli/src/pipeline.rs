//! The five-stage workflow: decompose, search, train, evaluate, predict,
//! plus the ablation runner and reproducibility bookkeeping.
//!
//! Split discipline: criteria and the parameter search see the training
//! split only; early stopping sees validation; the test split is touched
//! exactly once per run, by the evaluation stage (an access-logging provider
//! in the tests enforces this).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vmdnet_core::bilevel::{self, SearchResult, SearchStrategy, TraceEvent};
use vmdnet_core::forecaster::{
    evaluate, train, Batch, Metrics, ModelConfig, TrainHistory, VmdNetModel,
};
use vmdnet_core::nn::{ParamStore, Tape};
use vmdnet_core::windowing::{
    decompose_windows, make_windows, raw_windows_dataset, split_and_normalize, DecomposedDataset,
    NormStats, WindowSpec, TIME_FEATURE_DIM,
};
use vmdnet_core::{Signal, VmdConfig};

use crate::config::RunConfig;
use crate::ingest;
use crate::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Data access boundary for the pipeline stages. Tests wrap it to audit
/// which splits are read and when.
pub trait SplitProvider {
    fn series(&self, split: Split) -> &Signal;
    fn features(&self, split: Split) -> &[[f64; TIME_FEATURE_DIM]];
    fn norm_stats(&self) -> NormStats;
}

/// Ingested, chronologically split, train-stat normalized data with calendar
/// features per split.
pub struct PreparedData {
    train: Signal,
    val: Signal,
    test: Signal,
    features: [Vec<[f64; TIME_FEATURE_DIM]>; 3],
    stats: NormStats,
}

impl SplitProvider for PreparedData {
    fn series(&self, split: Split) -> &Signal {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn features(&self, split: Split) -> &[[f64; TIME_FEATURE_DIM]] {
        &self.features[match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }]
    }

    fn norm_stats(&self) -> NormStats {
        self.stats
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<PreparedData, PipelineError> {
    let ingested = ingest::ingest(
        &cfg.data.path,
        &cfg.data.timestamp_column,
        &cfg.data.value_column,
    )?;
    let all_features = ingested.calendar_features();
    let min_len = cfg.window.lookback + cfg.window.horizon;
    let (train, val, test, stats) = split_and_normalize(
        &ingested.signal,
        (cfg.split.train, cfg.split.val, cfg.split.test),
        min_len,
    )?;
    let (n_train, n_val) = (train.len(), val.len());
    let features = [
        all_features[..n_train].to_vec(),
        all_features[n_train..n_train + n_val].to_vec(),
        all_features[n_train + n_val..].to_vec(),
    ];
    Ok(PreparedData {
        train,
        val,
        test,
        features,
        stats,
    })
}

fn cache_path(dir: &Path, split: Split, spec: &WindowSpec, k: usize, alpha: f64) -> PathBuf {
    dir.join(format!(
        "{}-P{}-F{}-s{}-K{}-a{:016x}.bin",
        split.name(),
        spec.lookback,
        spec.horizon,
        spec.stride,
        k,
        alpha.to_bits()
    ))
}

/// Windowed + decomposed view of one split, backed by the on-disk mode cache
/// (one file per split and (P, F, s, K, alpha)). Time features and targets
/// are re-attached from the provider either way.
pub fn decomposed_split<P: SplitProvider>(
    cfg: &RunConfig,
    provider: &P,
    split: Split,
    k: usize,
    alpha: f64,
) -> Result<DecomposedDataset, PipelineError> {
    let spec = cfg.window_spec();
    let series = provider.series(split);
    let expect_windows = spec.num_windows(series.len());

    let cache_dir = cfg.output_dir.join("cache");
    std::fs::create_dir_all(&cache_dir)
        .map_err(|e| PipelineError::Data(format!("cannot create cache dir: {e}")))?;
    let path = cache_path(&cache_dir, split, &spec, k, alpha);

    let mut ds = match DecomposedDataset::read_cache(&path) {
        Ok(cached)
            if cached.num_windows == expect_windows
                && cached.num_modes == k
                && cached.lookback == spec.lookback
                && cached.horizon == spec.horizon =>
        {
            cached
        }
        _ => {
            let windows = make_windows(series, &spec)?;
            let vmd_cfg = VmdConfig {
                num_modes: k,
                bandwidth_penalty: alpha,
                ..cfg.vmd_config()
            };
            let dec = decompose_windows(&windows, &vmd_cfg, cfg.workers)?;
            dec.write_cache(&path)?;
            dec
        }
    };
    ds.endpoints = (0..ds.num_windows)
        .map(|b| spec.lookback + b * spec.stride)
        .collect();
    ds.norm_stats = Some(provider.norm_stats());
    ds.attach_time_features(provider.features(split))?;
    Ok(ds)
}

/// Raw-window (no decomposition) view of one split, for the no-VMD variant.
pub fn raw_split<P: SplitProvider>(
    cfg: &RunConfig,
    provider: &P,
    split: Split,
) -> Result<DecomposedDataset, PipelineError> {
    let spec = cfg.window_spec();
    let windows = make_windows(provider.series(split), &spec)?;
    let mut ds = raw_windows_dataset(&windows);
    ds.norm_stats = Some(provider.norm_stats());
    ds.attach_time_features(provider.features(split))?;
    Ok(ds)
}

fn split_for_model<P: SplitProvider>(
    cfg: &RunConfig,
    provider: &P,
    split: Split,
    model_cfg: &ModelConfig,
) -> Result<DecomposedDataset, PipelineError> {
    if model_cfg.use_vmd {
        decomposed_split(cfg, provider, split, model_cfg.num_modes, cfg.vmd.alpha)
    } else {
        raw_split(cfg, provider, split)
    }
}

/// Decomposition parameters for the run: the `[vmd]` section when fixed, the
/// bilevel search otherwise. Search artifacts land under `output_dir/search`.
pub fn resolve_parameters<P: SplitProvider>(
    cfg: &RunConfig,
    provider: &P,
) -> Result<(usize, f64, Option<SearchResult>), PipelineError> {
    if cfg.vmd.mode == "fixed" {
        return Ok((cfg.vmd.num_modes, cfg.vmd.alpha, None));
    }
    let (result, trace) = run_search(cfg, provider)?;
    Ok((result.chosen_k, result.chosen_alpha, Some({
        let _ = trace;
        result
    })))
}

/// Bilevel search on the training split; writes the trace file and summary.
pub fn run_search<P: SplitProvider>(
    cfg: &RunConfig,
    provider: &P,
) -> Result<(SearchResult, Vec<TraceEvent>), PipelineError> {
    let search_dir = cfg.output_dir.join("search");
    std::fs::create_dir_all(&search_dir)
        .map_err(|e| PipelineError::Data(format!("cannot create search dir: {e}")))?;

    let template = cfg.vmd_config();
    let space = cfg.search_space();
    let search_cfg = cfg.search_config();
    let train_series = provider.series(Split::Train);

    let mut evaluator_holder;
    let evaluator: Option<&mut dyn FnMut(usize, f64) -> f64> = if cfg.search.validate_candidates {
        evaluator_holder = |k: usize, alpha: f64| -> f64 {
            candidate_validation_loss(cfg, provider, k, alpha).unwrap_or(f64::INFINITY)
        };
        Some(&mut evaluator_holder)
    } else {
        None
    };

    let (result, trace) = bilevel::select_parameters(
        SearchStrategy::Stackelberg,
        train_series,
        &template,
        &space,
        &search_cfg,
        evaluator,
    )?;

    bilevel::append_trace(&search_dir.join("trace.log"), &trace)?;
    std::fs::write(search_dir.join("summary.json"), result.to_json())
        .map_err(|e| PipelineError::Data(format!("cannot write search summary: {e}")))?;
    Ok((result, trace))
}

/// Short-budget training of a candidate pair, scored by validation MSE.
fn candidate_validation_loss<P: SplitProvider>(
    cfg: &RunConfig,
    provider: &P,
    k: usize,
    alpha: f64,
) -> Result<f64, PipelineError> {
    let mut short = cfg.clone();
    short.vmd.num_modes = k;
    short.vmd.alpha = alpha;
    let model_cfg = model_config(&short, k, *short.seeds.first().unwrap_or(&0));
    let train_ds = decomposed_split(&short, provider, Split::Train, k, alpha)?;
    let val_ds = decomposed_split(&short, provider, Split::Val, k, alpha)?;
    let mut model = VmdNetModel::new(model_cfg).map_err(to_numeric)?;
    let mut hyper = short.train_hyper();
    hyper.max_epochs = hyper.max_epochs.min(5);
    hyper.patience = 1;
    let history = train(&mut model, &train_ds, &val_ds, &hyper).map_err(to_numeric)?;
    Ok(history
        .val_loss
        .get(history.best_epoch.saturating_sub(1))
        .copied()
        .unwrap_or(f64::INFINITY))
}

fn to_numeric<E: std::fmt::Display>(e: E) -> PipelineError {
    PipelineError::Numeric(e.to_string())
}

fn model_config(cfg: &RunConfig, k: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        num_modes: k,
        lookback: cfg.window.lookback,
        horizon: cfg.window.horizon,
        d_model: cfg.model.d_model,
        tcn_channels: cfg.model.tcn_channels.clone(),
        kernel_size: cfg.model.kernel_size,
        dropout: cfg.model.dropout,
        use_vmd: cfg.model.use_vmd,
        use_freq_embed: cfg.model.use_freq_embed,
        parallel_decoding: cfg.model.parallel_decoding,
        rng_seed: seed,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub chosen_k: usize,
    pub chosen_alpha: f64,
    pub best_val_mse: f64,
    pub test: Metrics,
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
}

/// One full train-and-evaluate run for one seed. Writes the checkpoint, a
/// model-config sidecar, history, and the per-seed metrics file.
pub fn run_single_seed<P: SplitProvider>(
    cfg: &RunConfig,
    provider: &P,
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<SeedOutcome, PipelineError> {
    let mut cfg = cfg.clone();
    cfg.vmd.num_modes = k;
    cfg.vmd.alpha = alpha;
    let model_cfg = model_config(&cfg, k, seed);

    let train_ds = split_for_model(&cfg, provider, Split::Train, &model_cfg)?;
    let val_ds = split_for_model(&cfg, provider, Split::Val, &model_cfg)?;

    let mut model = VmdNetModel::new(model_cfg.clone()).map_err(to_numeric)?;
    let history = train(&mut model, &train_ds, &val_ds, &cfg.train_hyper()).map_err(to_numeric)?;

    // Evaluation stage: the only reader of the test split.
    let test_ds = split_for_model(&cfg, provider, Split::Test, &model_cfg)?;
    let metrics = evaluate(&model, &test_ds).map_err(to_numeric)?;

    let seed_dir = cfg.output_dir.join(format!("seed{seed}"));
    std::fs::create_dir_all(&seed_dir)
        .map_err(|e| PipelineError::Data(format!("cannot create seed dir: {e}")))?;
    let checkpoint = seed_dir.join("checkpoint.bin");
    model.store.save_checkpoint(&checkpoint).map_err(to_numeric)?;
    write_json(&seed_dir.join("model.json"), &model_cfg)?;
    write_json(&seed_dir.join("history.json"), &history)?;

    let best_val_mse = history
        .val_loss
        .get(history.best_epoch.saturating_sub(1))
        .copied()
        .unwrap_or(f64::NAN);
    let outcome = SeedOutcome {
        seed,
        chosen_k: k,
        chosen_alpha: alpha,
        best_val_mse,
        test: metrics,
        history,
        checkpoint,
    };
    write_json(&seed_dir.join("metrics.json"), &outcome)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_mse: f64,
    pub std_mse: f64,
    pub mean_mae: f64,
    pub std_mae: f64,
    pub successes: usize,
}

/// Sample mean and std (n-1 denominator; 0 when a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub chosen_k: usize,
    pub chosen_alpha: f64,
    pub per_seed: Vec<SeedOutcome>,
    pub failures: Vec<(u64, String)>,
    pub aggregate: Aggregate,
}

pub fn aggregate_outcomes(outcomes: &[SeedOutcome]) -> Aggregate {
    let mses: Vec<f64> = outcomes.iter().map(|o| o.test.mse).collect();
    let maes: Vec<f64> = outcomes.iter().map(|o| o.test.mae).collect();
    let (mean_mse, std_mse) = mean_std(&mses);
    let (mean_mae, std_mae) = mean_std(&maes);
    Aggregate {
        mean_mse,
        std_mse,
        mean_mae,
        std_mae,
        successes: outcomes.len(),
    }
}

/// The full experiment: resolve (K, alpha), then run every seed and
/// aggregate. A failing seed is recorded, not fatal.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentSummary, PipelineError> {
    let provider = prepare(cfg)?;
    run_experiment_with(cfg, &provider)
}

pub fn run_experiment_with<P: SplitProvider>(
    cfg: &RunConfig,
    provider: &P,
) -> Result<ExperimentSummary, PipelineError> {
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| PipelineError::Data(format!("cannot create output dir: {e}")))?;
    let (k, alpha, _search) = resolve_parameters(cfg, provider)?;
    let mut per_seed = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        match run_single_seed(cfg, provider, k, alpha, seed) {
            Ok(outcome) => per_seed.push(outcome),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    if per_seed.is_empty() {
        return Err(PipelineError::Numeric(format!(
            "every seed failed; first failure: {}",
            failures
                .first()
                .map(|(s, e)| format!("seed {s}: {e}"))
                .unwrap_or_default()
        )));
    }
    let summary = ExperimentSummary {
        chosen_k: k,
        chosen_alpha: alpha,
        aggregate: aggregate_outcomes(&per_seed),
        per_seed,
        failures,
    };
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoVmd,
    NoFreq,
    NoParallel,
    FixedParams,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoVmd,
        Variant::NoFreq,
        Variant::NoParallel,
        Variant::FixedParams,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoVmd => "no_vmd",
            Variant::NoFreq => "no_freq",
            Variant::NoParallel => "no_parallel",
            Variant::FixedParams => "fixed_params",
        }
    }

    pub fn parse(s: &str) -> Result<Variant, PipelineError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                PipelineError::Config(format!(
                    "unknown variant {s:?}; expected one of full, no_vmd, no_freq, no_parallel, fixed_params"
                ))
            })
    }

    /// Rewrite the run configuration for this variant.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut out = cfg.clone();
        out.output_dir = cfg.output_dir.join("ablation").join(self.name());
        match self {
            Variant::Full => {}
            Variant::NoVmd => out.model.use_vmd = false,
            Variant::NoFreq => out.model.use_freq_embed = false,
            Variant::NoParallel => out.model.parallel_decoding = false,
            // Skip the search: use the externally fixed (K, alpha) pair.
            Variant::FixedParams => out.vmd.mode = "fixed".into(),
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub aggregate: Aggregate,
    pub per_seed_mse: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut out = String::from(
            "variant        mean_mse   std_mse    mean_mae   std_mae    seeds\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{:<14} {:<10.6} {:<10.6} {:<10.6} {:<10.6} {}\n",
                row.variant.name(),
                row.aggregate.mean_mse,
                row.aggregate.std_mse,
                row.aggregate.mean_mae,
                row.aggregate.std_mae,
                row.aggregate.successes
            ));
        }
        out
    }
}

/// Run the named variants under shared seeds and emit the side-by-side
/// comparison.
pub fn run_ablation(cfg: &RunConfig, variants: &[Variant]) -> Result<AblationTable, PipelineError> {
    let provider = prepare(cfg)?;
    let mut rows = Vec::new();
    for &variant in variants {
        let vcfg = variant.apply(cfg);
        let summary = run_experiment_with(&vcfg, &provider)?;
        rows.push(AblationRow {
            variant,
            per_seed_mse: summary.per_seed.iter().map(|o| o.test.mse).collect(),
            aggregate: summary.aggregate,
        });
    }
    let table = AblationTable { rows };
    write_json(&cfg.output_dir.join("ablation.json"), &table)?;
    Ok(table)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub values: Vec<f64>,
    pub original_units: bool,
    pub checkpoint: PathBuf,
}

/// Forecast the F samples following the end of the test split using a saved
/// checkpoint (default: the first seed's).
pub fn predict(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    original_units: bool,
) -> Result<Prediction, PipelineError> {
    let provider = prepare(cfg)?;
    let (ckpt_path, model) = load_model(cfg, checkpoint)?;

    let spec = cfg.window_spec();
    let test = provider.series(Split::Test);
    let p = spec.lookback;
    if test.len() < p {
        return Err(PipelineError::Data(format!(
            "test split has {} samples, need {p} for one input window",
            test.len()
        )));
    }
    let tail = Signal::new(test.samples()[test.len() - p..].to_vec())
        .map_err(|e| PipelineError::Data(e.to_string()))?;

    let mcfg = &model.config;
    let ds = if mcfg.use_vmd {
        let vmd_cfg = VmdConfig {
            num_modes: mcfg.num_modes,
            bandwidth_penalty: cfg.vmd.alpha,
            ..cfg.vmd_config()
        };
        let res = vmdnet_core::decompose(&tail, &vmd_cfg).map_err(to_numeric)?;
        let mut u = Vec::with_capacity(mcfg.num_modes * p);
        for m in &res.modes {
            u.extend_from_slice(m);
        }
        DecomposedDataset {
            num_windows: 1,
            num_modes: mcfg.num_modes,
            lookback: p,
            horizon: mcfg.horizon,
            u,
            omega: res.center_frequencies.clone(),
            y: vec![0.0; mcfg.horizon],
            endpoints: vec![p],
            vmd_config: vmd_cfg,
            norm_stats: Some(provider.norm_stats()),
            time_features: None,
        }
    } else {
        DecomposedDataset {
            num_windows: 1,
            num_modes: 1,
            lookback: p,
            horizon: mcfg.horizon,
            u: tail.samples().to_vec(),
            omega: vec![0.0],
            y: vec![0.0; mcfg.horizon],
            endpoints: vec![p],
            vmd_config: cfg.vmd_config(),
            norm_stats: Some(provider.norm_stats()),
            time_features: None,
        }
    };
    let mut ds = ds;
    let feats = provider.features(Split::Test);
    let tail_feats: Vec<[f64; TIME_FEATURE_DIM]> = feats[feats.len() - p..].to_vec();
    ds.endpoints = vec![p];
    ds.attach_time_features(&tail_feats)?;

    let batch = Batch::from_dataset(&ds, &[0], mcfg).map_err(to_numeric)?;
    let mut tape = Tape::new(false, 0);
    let out = model.forward(&mut tape, &batch).map_err(to_numeric)?;
    let mut values = tape.value(out).data().to_vec();
    if original_units {
        let stats = provider.norm_stats();
        values.iter_mut().for_each(|v| *v = stats.invert(*v));
    }
    let prediction = Prediction {
        values,
        original_units,
        checkpoint: ckpt_path,
    };
    write_json(&cfg.output_dir.join("predictions.json"), &prediction)?;
    Ok(prediction)
}

/// Evaluate a saved checkpoint on the test split.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    original_units: bool,
) -> Result<Metrics, PipelineError> {
    let provider = prepare(cfg)?;
    let (_, model) = load_model(cfg, checkpoint)?;
    let test_ds = split_for_model(cfg, &provider, Split::Test, &model.config)?;
    let mut metrics = evaluate(&model, &test_ds).map_err(to_numeric)?;
    if original_units {
        let stats = provider.norm_stats();
        metrics.mse *= stats.std * stats.std;
        metrics.mae *= stats.std;
        metrics
            .per_horizon_mse
            .iter_mut()
            .for_each(|v| *v *= stats.std * stats.std);
        metrics
            .per_horizon_mae
            .iter_mut()
            .for_each(|v| *v *= stats.std);
    }
    write_json(&cfg.output_dir.join("evaluation.json"), &metrics)?;
    Ok(metrics)
}

fn load_model(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
) -> Result<(PathBuf, VmdNetModel), PipelineError> {
    let ckpt_path = match checkpoint {
        Some(p) => p,
        None => {
            let seed = cfg.seeds.first().copied().unwrap_or(0);
            cfg.output_dir.join(format!("seed{seed}/checkpoint.bin"))
        }
    };
    let sidecar = ckpt_path.with_file_name("model.json");
    let text = std::fs::read_to_string(&sidecar).map_err(|e| {
        PipelineError::Data(format!(
            "cannot read model sidecar {}: {e} (run `train` first)",
            sidecar.display()
        ))
    })?;
    let model_cfg: ModelConfig = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Data(format!("model sidecar invalid: {e}")))?;
    let store = ParamStore::load_checkpoint(&ckpt_path).map_err(to_numeric)?;
    let mut model = VmdNetModel::new(model_cfg).map_err(to_numeric)?;
    // Replace the fresh initialization with the stored parameters.
    for name in store.names().map(String::from).collect::<Vec<_>>() {
        let value = store.value(&name).map_err(to_numeric)?.clone();
        *model.store.value_mut(&name).map_err(to_numeric)? = value;
    }
    Ok((ckpt_path, model))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| PipelineError::Data(format!("serialization failed: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| PipelineError::Data(format!("cannot write {}: {e}", path.display())))
}
