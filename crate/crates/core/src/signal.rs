use thiserror::Error;

/// Minimum series length accepted anywhere in the pipeline.
pub const MIN_SIGNAL_LEN: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("signal too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("non-finite sample at index {index}")]
    NonFinite { index: usize },
}

/// A univariate real-valued series. Samples are validated on construction:
/// finite values only, at least [`MIN_SIGNAL_LEN`] of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
}

impl Signal {
    pub fn new(samples: Vec<f64>) -> Result<Self, SignalError> {
        if samples.len() < MIN_SIGNAL_LEN {
            return Err(SignalError::TooShort {
                len: samples.len(),
                min: MIN_SIGNAL_LEN,
            });
        }
        if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
            return Err(SignalError::NonFinite { index });
        }
        Ok(Signal { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}
