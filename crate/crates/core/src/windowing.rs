//! Rolling input–target windows and sample-wise decomposition.
//!
//! A window ending at `t_b = P + (b-1)*s` (1-based) carries the input
//! `series[t_b-P+1 ..= t_b]` and the target `series[t_b+1 ..= t_b+F]`.
//! Decomposition runs on each input window in isolation, so nothing the model
//! sees for window `b` can depend on samples after `t_b` — causality holds by
//! construction and is verified bit-exactly in the tests.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, CodecError, Reader};
use crate::signal::{Signal, SignalError};
use crate::vmd::{decompose, VmdConfig, VmdError};

/// Calendar feature width: sin/cos of hour-of-day and day-of-week.
pub const TIME_FEATURE_DIM: usize = 4;

const CACHE_MAGIC: &[u8; 8] = b"VMDCACHE";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("series too short: {len} samples, need at least {need}")]
    SeriesTooShort { len: usize, need: usize },
    #[error("invalid window spec: {0}")]
    BadSpec(String),
    #[error("invalid split fractions: {0}")]
    BadFractions(String),
    #[error("{split} split too short: {len} samples, need at least {min}")]
    DegenerateSplit {
        split: &'static str,
        len: usize,
        min: usize,
    },
    #[error("normalization is degenerate: training std is zero")]
    NonFiniteNormalization,
    #[error("decomposition failed on window {window}: {source}")]
    Vmd { window: usize, source: VmdError },
    #[error("cache decode failed: {0}")]
    Cache(#[from] CodecError),
    #[error("cache metadata invalid: {0}")]
    CacheMeta(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<(), WindowError> {
        if self.lookback < 8 {
            return Err(WindowError::BadSpec("lookback must be >= 8".into()));
        }
        if self.horizon < 1 {
            return Err(WindowError::BadSpec("horizon must be >= 1".into()));
        }
        if self.stride < 1 {
            return Err(WindowError::BadSpec("stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of windows for a series of length `t_len`.
    pub fn num_windows(&self, t_len: usize) -> usize {
        if t_len < self.lookback + self.horizon {
            0
        } else {
            (t_len - self.lookback - self.horizon) / self.stride + 1
        }
    }
}

/// Stacked rolling windows: inputs X (B x P), targets Y (B x F), and each
/// window's endpoint `t_b` (the exclusive end index of its input slice).
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub spec: WindowSpec,
    pub num_windows: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    pub endpoints: Vec<usize>,
}

impl WindowedDataset {
    pub fn input(&self, b: usize) -> &[f64] {
        let p = self.spec.lookback;
        &self.x[b * p..(b + 1) * p]
    }

    pub fn target(&self, b: usize) -> &[f64] {
        let f = self.spec.horizon;
        &self.y[b * f..(b + 1) * f]
    }
}

pub fn make_windows(series: &Signal, spec: &WindowSpec) -> Result<WindowedDataset, WindowError> {
    spec.validate()?;
    let data = series.samples();
    let t_len = data.len();
    let (p, f, s) = (spec.lookback, spec.horizon, spec.stride);
    if t_len < p + f {
        return Err(WindowError::SeriesTooShort {
            len: t_len,
            need: p + f,
        });
    }
    let b_count = spec.num_windows(t_len);
    let mut x = Vec::with_capacity(b_count * p);
    let mut y = Vec::with_capacity(b_count * f);
    let mut endpoints = Vec::with_capacity(b_count);
    for b in 0..b_count {
        let t_b = p + b * s;
        x.extend_from_slice(&data[t_b - p..t_b]);
        y.extend_from_slice(&data[t_b..t_b + f]);
        endpoints.push(t_b);
    }
    Ok(WindowedDataset {
        spec: *spec,
        num_windows: b_count,
        x,
        y,
        endpoints,
    })
}

/// Training-split z-score statistics, applied to every split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Chronological contiguous split with train-only z-score normalization.
/// `min_len` is the minimum usable split length (typically P + F).
pub fn split_and_normalize(
    series: &Signal,
    fractions: (f64, f64, f64),
    min_len: usize,
) -> Result<(Signal, Signal, Signal, NormStats), WindowError> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) {
        return Err(WindowError::BadFractions(format!(
            "fractions must be positive, got ({ft}, {fv}, {fs})"
        )));
    }
    if ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(WindowError::BadFractions(format!(
            "fractions must sum to 1, got {}",
            ft + fv + fs
        )));
    }
    let data = series.samples();
    let t_len = data.len();
    let n_train = (t_len as f64 * ft).floor() as usize;
    let n_val = (t_len as f64 * fv).floor() as usize;
    let n_test = t_len - n_train - n_val;
    let min = min_len.max(crate::signal::MIN_SIGNAL_LEN);
    for (name, len) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if len < min {
            return Err(WindowError::DegenerateSplit {
                split: name,
                len,
                min,
            });
        }
    }

    let train_raw = &data[..n_train];
    let mean = train_raw.iter().sum::<f64>() / n_train as f64;
    let var = train_raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_train as f64;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(WindowError::NonFiniteNormalization);
    }
    let stats = NormStats { mean, std };

    let norm = |slice: &[f64]| -> Result<Signal, WindowError> {
        Ok(Signal::new(slice.iter().map(|&v| stats.apply(v)).collect())?)
    };
    Ok((
        norm(train_raw)?,
        norm(&data[n_train..n_train + n_val])?,
        norm(&data[n_train + n_val..])?,
        stats,
    ))
}

/// Per-window decomposition of an entire windowed dataset:
/// U (B x K x P), Omega (B x K), targets carried through.
#[derive(Debug, Clone)]
pub struct DecomposedDataset {
    pub num_windows: usize,
    pub num_modes: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// B x K x P row-major.
    pub u: Vec<f64>,
    /// B x K row-major, each row ascending.
    pub omega: Vec<f64>,
    /// B x F row-major.
    pub y: Vec<f64>,
    /// Window endpoints; empty for datasets loaded from cache.
    pub endpoints: Vec<usize>,
    pub vmd_config: VmdConfig,
    pub norm_stats: Option<NormStats>,
    /// B x P x TIME_FEATURE_DIM row-major, when attached.
    pub time_features: Option<Vec<f64>>,
}

impl DecomposedDataset {
    pub fn mode(&self, b: usize, k: usize) -> &[f64] {
        let (kk, p) = (self.num_modes, self.lookback);
        &self.u[b * kk * p + k * p..b * kk * p + (k + 1) * p]
    }

    pub fn window_modes(&self, b: usize) -> &[f64] {
        let (kk, p) = (self.num_modes, self.lookback);
        &self.u[b * kk * p..(b + 1) * kk * p]
    }

    pub fn omegas(&self, b: usize) -> &[f64] {
        &self.omega[b * self.num_modes..(b + 1) * self.num_modes]
    }

    pub fn target(&self, b: usize) -> &[f64] {
        &self.y[b * self.horizon..(b + 1) * self.horizon]
    }

    pub fn window_time_features(&self, b: usize) -> Option<&[f64]> {
        let width = self.lookback * TIME_FEATURE_DIM;
        self.time_features
            .as_ref()
            .map(|tf| &tf[b * width..(b + 1) * width])
    }

    /// Attach per-position calendar features; `features[t]` describes the
    /// absolute series index `t`, and windows slice it by their endpoints.
    pub fn attach_time_features(
        &mut self,
        features: &[[f64; TIME_FEATURE_DIM]],
    ) -> Result<(), WindowError> {
        if self.endpoints.len() != self.num_windows {
            return Err(WindowError::CacheMeta(
                "endpoints missing; rebuild them from the window spec before attaching features"
                    .into(),
            ));
        }
        let needed = self.endpoints.iter().copied().max().unwrap_or(0);
        if features.len() < needed {
            return Err(WindowError::CacheMeta(format!(
                "need features for {needed} positions, got {}",
                features.len()
            )));
        }
        let p = self.lookback;
        let mut flat = Vec::with_capacity(self.num_windows * p * TIME_FEATURE_DIM);
        for &t_b in &self.endpoints {
            for t in t_b - p..t_b {
                flat.extend_from_slice(&features[t]);
            }
        }
        self.time_features = Some(flat);
        Ok(())
    }
}

/// Hour-of-day / day-of-week sin-cos features for consecutive hourly samples
/// starting at the given phase.
pub fn hourly_index_features(
    len: usize,
    start_hour: u32,
    start_dow: u32,
) -> Vec<[f64; TIME_FEATURE_DIM]> {
    use std::f64::consts::TAU;
    (0..len)
        .map(|t| {
            let hour = (start_hour as usize + t) % 24;
            let dow = (start_dow as usize + (start_hour as usize + t) / 24) % 7;
            let ha = TAU * hour as f64 / 24.0;
            let da = TAU * dow as f64 / 7.0;
            [ha.sin(), ha.cos(), da.sin(), da.cos()]
        })
        .collect()
}

/// All-zero features for series without meaningful timestamps.
pub fn zero_time_features(len: usize) -> Vec<[f64; TIME_FEATURE_DIM]> {
    vec![[0.0; TIME_FEATURE_DIM]; len]
}

/// Decompose every input window with `cfg`. `workers = 0` uses the global
/// thread pool; any other count builds a dedicated pool. Results are written
/// into slots indexed by window, so the output is bit-identical regardless of
/// the worker count.
pub fn decompose_windows(
    ds: &WindowedDataset,
    cfg: &VmdConfig,
    workers: usize,
) -> Result<DecomposedDataset, WindowError> {
    cfg.validate()
        .map_err(|source| WindowError::Vmd { window: 0, source })?;
    let b_count = ds.num_windows;
    let k = cfg.num_modes;
    let p = ds.spec.lookback;

    let run = || -> Result<Vec<crate::vmd::VmdResult>, WindowError> {
        (0..b_count)
            .into_par_iter()
            .map(|b| {
                let signal = Signal::new(ds.input(b).to_vec())?;
                decompose(&signal, cfg).map_err(|source| WindowError::Vmd { window: b, source })
            })
            .collect()
    };
    let results = if workers == 0 {
        run()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| WindowError::CacheMeta(format!("worker pool: {e}")))?;
        pool.install(run)?
    };

    let mut u = vec![0.0; b_count * k * p];
    let mut omega = vec![0.0; b_count * k];
    for (b, res) in results.iter().enumerate() {
        for (ki, mode) in res.modes.iter().enumerate() {
            u[b * k * p + ki * p..b * k * p + (ki + 1) * p].copy_from_slice(mode);
        }
        omega[b * k..(b + 1) * k].copy_from_slice(&res.center_frequencies);
    }

    Ok(DecomposedDataset {
        num_windows: b_count,
        num_modes: k,
        lookback: p,
        horizon: ds.spec.horizon,
        u,
        omega,
        y: ds.y.clone(),
        endpoints: ds.endpoints.clone(),
        vmd_config: cfg.clone(),
        norm_stats: None,
        time_features: None,
    })
}

/// Package raw windows as a single-"mode" dataset (K=1, omega 0): the input
/// form used by the decomposition-free model variant.
pub fn raw_windows_dataset(ds: &WindowedDataset) -> DecomposedDataset {
    let p = ds.spec.lookback;
    let mut u = Vec::with_capacity(ds.num_windows * p);
    for b in 0..ds.num_windows {
        u.extend_from_slice(ds.input(b));
    }
    DecomposedDataset {
        num_windows: ds.num_windows,
        num_modes: 1,
        lookback: p,
        horizon: ds.spec.horizon,
        u,
        omega: vec![0.0; ds.num_windows],
        y: ds.y.clone(),
        endpoints: ds.endpoints.clone(),
        vmd_config: VmdConfig {
            num_modes: 1,
            ..VmdConfig::default()
        },
        norm_stats: None,
        time_features: None,
    }
}

impl DecomposedDataset {
    /// Serialize to the mode-cache layout: little-endian, header
    /// (magic, version, B, K, P, F, alpha as f64, checksum over the payload)
    /// followed by U, Omega, Y as 8-byte floats in row-major order.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity((self.u.len() + self.omega.len() + self.y.len()) * 8);
        io::put_f64_slice(&mut payload, &self.u);
        io::put_f64_slice(&mut payload, &self.omega);
        io::put_f64_slice(&mut payload, &self.y);
        let checksum = io::fnv1a64(&payload);

        let mut out = Vec::with_capacity(payload.len() + 64);
        out.extend_from_slice(CACHE_MAGIC);
        io::put_u32(&mut out, CACHE_VERSION);
        io::put_u64(&mut out, self.num_windows as u64);
        io::put_u64(&mut out, self.num_modes as u64);
        io::put_u64(&mut out, self.lookback as u64);
        io::put_u64(&mut out, self.horizon as u64);
        io::put_f64(&mut out, self.vmd_config.bandwidth_penalty);
        io::put_u64(&mut out, checksum);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self, WindowError> {
        let mut r = Reader::new(bytes);
        r.magic(CACHE_MAGIC)?;
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(CodecError::BadVersion {
                found: version,
                expected: CACHE_VERSION,
            }
            .into());
        }
        let b_count = r.u64()? as usize;
        let k = r.u64()? as usize;
        let p = r.u64()? as usize;
        let f = r.u64()? as usize;
        let alpha = r.f64()?;
        let stored = r.u64()?;
        let payload = r.remaining();
        let computed = io::fnv1a64(payload);
        if stored != computed {
            return Err(CodecError::ChecksumMismatch { stored, computed }.into());
        }
        let expect = (b_count * k * p + b_count * k + b_count * f) * 8;
        if payload.len() != expect {
            return Err(WindowError::CacheMeta(format!(
                "payload is {} bytes, header implies {expect}",
                payload.len()
            )));
        }
        let u = r.f64_vec(b_count * k * p)?;
        let omega = r.f64_vec(b_count * k)?;
        let y = r.f64_vec(b_count * f)?;
        Ok(DecomposedDataset {
            num_windows: b_count,
            num_modes: k,
            lookback: p,
            horizon: f,
            u,
            omega,
            y,
            endpoints: Vec::new(),
            vmd_config: VmdConfig {
                num_modes: k,
                bandwidth_penalty: alpha,
                ..VmdConfig::default()
            },
            norm_stats: None,
            time_features: None,
        })
    }

    pub fn write_cache(&self, path: &Path) -> Result<(), WindowError> {
        Ok(std::fs::write(path, self.to_cache_bytes())?)
    }

    pub fn read_cache(path: &Path) -> Result<Self, WindowError> {
        Self::from_cache_bytes(&std::fs::read(path)?)
    }
}
