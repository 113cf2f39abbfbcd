//! Run configuration: a single TOML document, schema-validated with unknown
//! keys rejected so typos surface as errors instead of silent defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vmdnet_core::bilevel::{SearchConfig, SearchSpace};
use vmdnet_core::forecaster::TrainHyper;
use vmdnet_core::vmd::{Boundary, OmegaInit, VmdConfig};
use vmdnet_core::windowing::WindowSpec;

use crate::PipelineError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// One full pipeline run per seed; aggregates report mean +- std.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Worker threads for window decomposition; 0 = rayon default.
    #[serde(default)]
    pub workers: usize,
    pub data: DataSection,
    #[serde(default = "default_split")]
    pub split: SplitSection,
    pub window: WindowSection,
    #[serde(default)]
    pub vmd: VmdSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

fn default_seeds() -> Vec<u64> {
    vec![2021, 2022, 2023, 2024, 2025]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    #[serde(default = "default_ts_col")]
    pub timestamp_column: String,
    #[serde(default = "default_val_col")]
    pub value_column: String,
}

fn default_ts_col() -> String {
    "timestamp".into()
}

fn default_val_col() -> String {
    "value".into()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

fn default_split() -> SplitSection {
    SplitSection {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub lookback: usize,
    pub horizon: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

/// `mode = "fixed"` uses (num_modes, alpha) below; `mode = "auto"` selects
/// them with the bilevel search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmdSection {
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_k")]
    pub num_modes: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub dual_step: f64,
    #[serde(default = "default_tol")]
    pub tolerance: f64,
    #[serde(default = "default_iters")]
    pub max_iterations: usize,
    #[serde(default = "default_init")]
    pub omega_init: OmegaInit,
    #[serde(default = "default_boundary")]
    pub boundary: Boundary,
}

fn default_mode() -> String {
    "fixed".into()
}
fn default_k() -> usize {
    4
}
fn default_alpha() -> f64 {
    5661.0
}
fn default_tol() -> f64 {
    1e-7
}
fn default_iters() -> usize {
    500
}
fn default_init() -> OmegaInit {
    OmegaInit::UniformSpread
}
fn default_boundary() -> Boundary {
    Boundary::Mirror
}

impl Default for VmdSection {
    fn default() -> Self {
        VmdSection {
            mode: default_mode(),
            num_modes: default_k(),
            alpha: default_alpha(),
            dual_step: 0.0,
            tolerance: default_tol(),
            max_iterations: default_iters(),
            omega_init: default_init(),
            boundary: default_boundary(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub k_min: usize,
    pub k_max: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub n_restarts: usize,
    pub inner_grid_points: usize,
    pub inner_refine_iters: usize,
    pub ar_order: usize,
    pub mi_bins: usize,
    pub rng_seed: u64,
    /// Score candidate pairs on the validation split with a short-budget
    /// training run; falls back to restart voting when false.
    pub validate_candidates: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            k_min: 2,
            k_max: 15,
            alpha_min: 500.0,
            alpha_max: 10000.0,
            n_restarts: 20,
            inner_grid_points: 6,
            inner_refine_iters: 4,
            ar_order: 2,
            mi_bins: 16,
            rng_seed: 0,
            validate_candidates: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub tcn_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dropout: f64,
    pub use_vmd: bool,
    pub use_freq_embed: bool,
    pub parallel_decoding: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            tcn_channels: vec![32, 64, 64],
            kernel_size: 3,
            dropout: 0.1,
            use_vmd: true,
            use_freq_embed: true,
            parallel_decoding: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = TrainHyper::default();
        TrainSection {
            batch_size: h.batch_size,
            learning_rate: h.learning_rate,
            max_epochs: h.max_epochs,
            patience: h.patience,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            PipelineError::Config(format!("config {} is invalid: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        let s = &self.split;
        if ((s.train + s.val + s.test) - 1.0).abs() > 1e-9 {
            return fail(format!(
                "split fractions must sum to 1, got {}",
                s.train + s.val + s.test
            ));
        }
        if self.window.lookback < 8 {
            return fail("window.lookback must be >= 8".into());
        }
        if self.window.horizon < 1 || self.window.stride < 1 {
            return fail("window.horizon and window.stride must be >= 1".into());
        }
        match self.vmd.mode.as_str() {
            "fixed" | "auto" => {}
            other => {
                return fail(format!(
                    "vmd.mode must be \"fixed\" or \"auto\", got {other:?}"
                ))
            }
        }
        if self.vmd.num_modes < 1 {
            return fail("vmd.num_modes must be >= 1".into());
        }
        if !(self.vmd.alpha > 0.0) {
            return fail("vmd.alpha must be > 0".into());
        }
        if self.model.tcn_channels.is_empty() {
            return fail("model.tcn_channels must not be empty".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return fail(format!("model.dropout {} outside [0, 1)", self.model.dropout));
        }
        if self.train.batch_size < 1 || self.train.max_epochs < 1 {
            return fail("train.batch_size and train.max_epochs must be >= 1".into());
        }
        Ok(())
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            lookback: self.window.lookback,
            horizon: self.window.horizon,
            stride: self.window.stride,
        }
    }

    pub fn vmd_config(&self) -> VmdConfig {
        VmdConfig {
            num_modes: self.vmd.num_modes,
            bandwidth_penalty: self.vmd.alpha,
            dual_step: self.vmd.dual_step,
            tolerance: self.vmd.tolerance,
            max_iterations: self.vmd.max_iterations,
            omega_init: self.vmd.omega_init,
            boundary: self.vmd.boundary,
            rng_seed: 0,
        }
    }

    pub fn search_space(&self) -> SearchSpace {
        SearchSpace {
            k_min: self.search.k_min,
            k_max: self.search.k_max,
            alpha_min: self.search.alpha_min,
            alpha_max: self.search.alpha_max,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            n_restarts: self.search.n_restarts,
            inner_grid_points: self.search.inner_grid_points,
            inner_refine_iters: self.search.inner_refine_iters,
            ar_order: self.search.ar_order,
            mi_bins: self.search.mi_bins,
            rng_seed: self.search.rng_seed,
        }
    }

    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
        }
    }
}
