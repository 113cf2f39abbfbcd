//! Decomposition quality scores used by the (K, alpha) search.
//!
//! * FIC rates forecastability: fit an AR(r) model to each mode, sum the
//!   residual variances, and add a complexity penalty:
//!   `FIC = (T - r) * ln(sum_k sigma_k^2) + (K*(r+1) + 1) * ln(T - r)`.
//! * MIC rates cross-mode overlap: average pairwise mutual information over
//!   the K*(K-1)/2 unordered mode pairs, estimated with an equal-width 2-D
//!   histogram plug-in in nats.
//!
//! Both are deterministic pure functions; summations run in a fixed order so
//! results are bit-reproducible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CriteriaError {
    #[error("series too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("length mismatch: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("mutual information criterion needs K >= 2 modes, got {k}")]
    KTooSmall { k: usize },
    #[error("modes must share one length, found {a} and {b}")]
    RaggedModes { a: usize, b: usize },
}

/// Least-squares AR(r) fit with intercept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArFit {
    pub order: usize,
    /// Lag coefficients, index 0 = lag 1.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// RSS / (T - r).
    pub residual_variance: f64,
    pub n_effective: usize,
    /// Set when the normal equations were (near-)singular, e.g. a constant
    /// series; the fit is still returned.
    pub degenerate: bool,
}

/// Regress x_t on (x_{t-1}..x_{t-r}, 1) by normal equations with a relative
/// ridge jitter of 1e-12 for conditioning.
pub fn fit_ar(series: &[f64], order: usize) -> Result<ArFit, CriteriaError> {
    let t_len = series.len();
    if t_len < order + 2 {
        return Err(CriteriaError::TooShort {
            len: t_len,
            min: order + 2,
        });
    }
    if let Some(index) = series.iter().position(|v| !v.is_finite()) {
        return Err(CriteriaError::NonFinite { index });
    }

    let p = order + 1; // lags plus intercept
    let n_eff = t_len - order;

    // Accumulate the Gram matrix X'X and X'y directly.
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    for t in order..t_len {
        let y = series[t];
        for i in 0..order {
            let xi = series[t - 1 - i];
            for j in i..order {
                gram[i * p + j] += xi * series[t - 1 - j];
            }
            gram[i * p + order] += xi; // intercept column
            rhs[i] += xi * y;
        }
        gram[order * p + order] += 1.0;
        rhs[order] += y;
    }
    for i in 0..p {
        for j in 0..i {
            gram[i * p + j] = gram[j * p + i];
        }
    }

    let scale = (0..p).map(|i| gram[i * p + i]).fold(0.0f64, f64::max);
    let jitter = 1e-12 * scale.max(1.0);
    for i in 0..p {
        gram[i * p + i] += jitter;
    }

    let (solution, degenerate) = solve_with_pivoting(gram, rhs, p, scale);

    let mut rss = 0.0;
    for t in order..t_len {
        let mut pred = solution[order];
        for i in 0..order {
            pred += solution[i] * series[t - 1 - i];
        }
        let e = series[t] - pred;
        rss += e * e;
    }

    Ok(ArFit {
        order,
        coefficients: solution[..order].to_vec(),
        intercept: solution[order],
        residual_variance: rss / n_eff as f64,
        n_effective: n_eff,
        degenerate,
    })
}

/// Gaussian elimination with partial pivoting; flags degeneracy when a pivot
/// collapses relative to the matrix scale.
fn solve_with_pivoting(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, scale: f64) -> (Vec<f64>, bool) {
    let mut degenerate = false;
    let floor = 1e-10 * scale.max(1.0);
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        if d.abs() <= floor {
            degenerate = true;
            continue;
        }
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let d = a[col * n + col];
        if d.abs() <= floor {
            x[col] = 0.0;
            continue;
        }
        let mut acc = b[col];
        for j in col + 1..n {
            acc -= a[col * n + j] * x[j];
        }
        x[col] = acc / d;
    }
    (x, degenerate)
}

/// FIC evaluation plus the flag for a fully degenerate decomposition.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FicValue {
    /// `-inf` when every mode fit degenerated to zero residual variance.
    pub value: f64,
    pub all_modes_degenerate: bool,
}

/// FIC from precomputed per-mode residual variances.
pub fn fic_from_variances(sigma2: &[f64], t_len: usize, order: usize) -> FicValue {
    let k = sigma2.len();
    let n_eff = (t_len - order) as f64;
    let total: f64 = sigma2.iter().sum();
    let penalty = (k * (order + 1) + 1) as f64 * n_eff.ln();
    if total <= 0.0 {
        return FicValue {
            value: f64::NEG_INFINITY,
            all_modes_degenerate: true,
        };
    }
    FicValue {
        value: n_eff * total.ln() + penalty,
        all_modes_degenerate: false,
    }
}

/// Fit AR(`order`) to every mode row and evaluate FIC.
pub fn fic(modes: &[Vec<f64>], order: usize) -> Result<FicValue, CriteriaError> {
    let sigma2 = per_mode_variances(modes, order)?;
    Ok(fic_from_variances(&sigma2, modes[0].len(), order))
}

pub fn per_mode_variances(modes: &[Vec<f64>], order: usize) -> Result<Vec<f64>, CriteriaError> {
    check_rectangular(modes)?;
    modes
        .iter()
        .map(|m| fit_ar(m, order).map(|f| f.residual_variance))
        .collect()
}

/// Plug-in mutual information in nats from a `bins x bins` equal-width joint
/// histogram, each variable binned over its own min-max range.
///
/// The operands are ordered canonically before binning, so the estimate is
/// exactly symmetric: `mutual_information(x, y, b)` and
/// `mutual_information(y, x, b)` return bit-identical values.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> Result<f64, CriteriaError> {
    const MIN_LEN: usize = 32;
    if x.len() != y.len() {
        return Err(CriteriaError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.len() < MIN_LEN {
        return Err(CriteriaError::TooShort {
            len: x.len(),
            min: MIN_LEN,
        });
    }
    for (i, v) in x.iter().chain(y.iter()).enumerate() {
        if !v.is_finite() {
            return Err(CriteriaError::NonFinite { index: i % x.len() });
        }
    }
    let (a, b) = if lex_le(x, y) { (x, y) } else { (y, x) };

    let t = a.len();
    let ia = bin_indices(a, bins);
    let ib = bin_indices(b, bins);
    let mut joint = vec![0u64; bins * bins];
    for (&i, &j) in ia.iter().zip(ib.iter()) {
        joint[i * bins + j] += 1;
    }
    let mut row = vec![0u64; bins];
    let mut col = vec![0u64; bins];
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            row[i] += c;
            col[j] += c;
        }
    }
    let tf = t as f64;
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c == 0 {
                continue;
            }
            let p = c as f64 / tf;
            mi += p * ((c as f64 * tf) / (row[i] as f64 * col[j] as f64)).ln();
        }
    }
    // Non-negative in exact arithmetic; clamp rounding dust.
    Ok(mi.max(0.0))
}

fn lex_le(x: &[f64], y: &[f64]) -> bool {
    for (a, b) in x.iter().zip(y.iter()) {
        match a.total_cmp(b) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    x.len() <= y.len()
}

fn bin_indices(v: &[f64], bins: usize) -> Vec<usize> {
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    if width <= 0.0 {
        return vec![0; v.len()];
    }
    v.iter()
        .map(|&x| (((x - min) / width) as usize).min(bins - 1))
        .collect()
}

/// Symmetric pairwise MI matrix with a zero diagonal.
pub fn mi_matrix(modes: &[Vec<f64>], bins: usize) -> Result<Vec<Vec<f64>>, CriteriaError> {
    check_rectangular(modes)?;
    let k = modes.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let v = mutual_information(&modes[i], &modes[j], bins)?;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

/// Average pairwise MI over the strict upper triangle:
/// `2 / (K*(K-1)) * sum_{i<j} I(u_i; u_j)`.
pub fn mic(modes: &[Vec<f64>], bins: usize) -> Result<f64, CriteriaError> {
    let k = modes.len();
    if k < 2 {
        return Err(CriteriaError::KTooSmall { k });
    }
    let m = mi_matrix(modes, bins)?;
    Ok(mic_from_matrix(&m))
}

pub fn mic_from_matrix(m: &[Vec<f64>]) -> f64 {
    let k = m.len();
    let mut sum = 0.0;
    for (i, row) in m.iter().enumerate() {
        for &v in row.iter().skip(i + 1) {
            sum += v;
        }
    }
    sum * 2.0 / (k * (k - 1)) as f64
}

fn check_rectangular(modes: &[Vec<f64>]) -> Result<(), CriteriaError> {
    let first = modes.first().map_or(0, |m| m.len());
    for m in modes {
        if m.len() != first {
            return Err(CriteriaError::RaggedModes {
                a: first,
                b: m.len(),
            });
        }
    }
    Ok(())
}

/// Everything the search layer records about one (K, alpha) candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriteriaReport {
    pub k: usize,
    pub alpha: f64,
    pub fic: f64,
    pub mic: f64,
    pub per_mode_sigma2: Vec<f64>,
    pub mi_matrix: Vec<Vec<f64>>,
}

impl CriteriaReport {
    /// Score a decomposition's modes at the given (K, alpha) label.
    pub fn from_modes(
        modes: &[Vec<f64>],
        alpha: f64,
        order: usize,
        bins: usize,
    ) -> Result<Self, CriteriaError> {
        let k = modes.len();
        if k < 2 {
            return Err(CriteriaError::KTooSmall { k });
        }
        let per_mode_sigma2 = per_mode_variances(modes, order)?;
        let fic = fic_from_variances(&per_mode_sigma2, modes[0].len(), order);
        let matrix = mi_matrix(modes, bins)?;
        Ok(CriteriaReport {
            k,
            alpha,
            fic: fic.value,
            mic: mic_from_matrix(&matrix),
            per_mode_sigma2,
            mi_matrix: matrix,
        })
    }

    /// One-line key/value record for the search trace file.
    pub fn to_record(&self) -> String {
        let sig: Vec<String> = self.per_mode_sigma2.iter().map(|v| format!("{v:e}")).collect();
        format!(
            "k={} alpha={:.6} fic={:.6} mic={:.6} sigma2=[{}]",
            self.k,
            self.alpha,
            self.fic,
            self.mic,
            sig.join(",")
        )
    }
}
