//! Dense-tensor reverse-mode differentiation substrate: exactly the ops the
//! forecaster needs, in 8-byte floats (gradient checks at 1e-4 tolerance are
//! unreliable in single precision, and the models here are tiny).
//!
//! Execution is define-by-run: [`Tape`] records each op eagerly and frees the
//! graph after `backward`. Every op output is scanned for non-finite values
//! and poisons the tape on the first hit, so NaNs surface at the op that
//! produced them instead of at the loss.

mod tape;

pub use tape::{NodeId, Tape};

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::io::{self, CodecError, Reader};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("checkpoint decode failed: {0}")]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major dense tensor of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, NnError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(NnError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named parameters with matching gradient slots and Adam moment state.
/// Insertion order is the canonical order for iteration and serialization.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<usize, NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let slot = self.params.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), slot);
        self.grads.push(Tensor::zeros(value.shape()));
        self.m.push(Tensor::zeros(value.shape()));
        self.v.push(Tensor::zeros(value.shape()));
        self.params.push(value);
        Ok(slot)
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, NnError> {
        self.slot(name)
            .map(|s| &self.params[s])
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        match self.slot(name) {
            Some(s) => Ok(&mut self.params[s]),
            None => Err(NnError::UnknownParam(name.to_string())),
        }
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor, NnError> {
        self.slot(name)
            .map(|s| &self.grads[s])
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub(crate) fn value_by_slot(&self, slot: usize) -> &Tensor {
        &self.params[slot]
    }

    pub(crate) fn grad_by_slot_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.grads[slot]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn grads_all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }

    /// Bias-corrected Adam update from the accumulated gradients.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..self.params.len() {
            let g = &self.grads[i].data;
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            let w = &mut self.params[i].data;
            for j in 0..w.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.clone()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.data.copy_from_slice(&s.data);
        }
    }
}

const CKPT_MAGIC: &[u8; 8] = b"VNETCKPT";
const CKPT_VERSION: u32 = 1;

impl ParamStore {
    /// Checkpoint: named-parameter table with shapes and raw values,
    /// versioned header and payload checksum. Optimizer state is not stored.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for (name, tensor) in self.names.iter().zip(&self.params) {
            io::put_u32(&mut payload, name.len() as u32);
            payload.extend_from_slice(name.as_bytes());
            io::put_u32(&mut payload, tensor.shape.len() as u32);
            for &d in &tensor.shape {
                io::put_u64(&mut payload, d as u64);
            }
            io::put_f64_slice(&mut payload, &tensor.data);
        }
        let mut out = Vec::with_capacity(payload.len() + 32);
        out.extend_from_slice(CKPT_MAGIC);
        io::put_u32(&mut out, CKPT_VERSION);
        io::put_u64(&mut out, self.params.len() as u64);
        io::put_u64(&mut out, io::fnv1a64(&payload));
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<ParamStore, NnError> {
        let mut r = Reader::new(bytes);
        r.magic(CKPT_MAGIC)?;
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(CodecError::BadVersion {
                found: version,
                expected: CKPT_VERSION,
            }
            .into());
        }
        let count = r.u64()? as usize;
        let stored = r.u64()?;
        let computed = io::fnv1a64(r.remaining());
        if stored != computed {
            return Err(CodecError::ChecksumMismatch { stored, computed }.into());
        }
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.bytes_vec(name_len)?)
                .map_err(|_| CodecError::BadName)?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f64_vec(numel)?;
            store.add(&name, Tensor::from_vec(&shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), NnError> {
        Ok(std::fs::write(path, self.to_checkpoint_bytes())?)
    }

    pub fn load_checkpoint(path: &Path) -> Result<ParamStore, NnError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            store.add("w", Tensor::zeros(&[2])),
            Err(NnError::DuplicateParam(_))
        ));
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store
            .add("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        store.adam_step(0.1, 0.9, 0.999, 1e-8);
        assert_eq!(store.value("w").unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // With a constant unit gradient, bias correction gives m_hat/sqrt(v_hat) = 1.
        let mut store = ParamStore::new();
        store
            .add("w", Tensor::from_vec(&[1], vec![0.0]).unwrap())
            .unwrap();
        store.grad_by_slot_mut(0).data_mut()[0] = 1.0;
        store.adam_step(0.01, 0.9, 0.999, 1e-12);
        let w = store.value("w").unwrap().data()[0];
        assert!((w + 0.01).abs() < 1e-8, "w = {w}");
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // f(w) = w^2, grad = 2w, ten steps from w0 = 1 at lr 0.1.
        let mut store = ParamStore::new();
        store
            .add("w", Tensor::from_vec(&[1], vec![1.0]).unwrap())
            .unwrap();
        for _ in 0..10 {
            let w = store.value("w").unwrap().data()[0];
            store.zero_grads();
            store.grad_by_slot_mut(0).data_mut()[0] = 2.0 * w;
            store.adam_step(0.1, 0.9, 0.999, 1e-8);
        }
        let w = store.value("w").unwrap().data()[0];
        assert!(w.abs() < 1.0, "|w10| = {} should shrink", w.abs());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut store = ParamStore::new();
        store
            .add("layer.weight", Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap())
            .unwrap();
        store
            .add("layer.bias", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        let bytes = store.to_checkpoint_bytes();
        let back = ParamStore::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["layer.weight", "layer.bias"]);
        assert_eq!(back.value("layer.bias").unwrap().data(), &[0.1, 0.2, 0.3]);

        let mut corrupt = bytes.clone();
        let last = corrupt.len() - 1;
        corrupt[last] ^= 0x01;
        assert!(matches!(
            ParamStore::from_checkpoint_bytes(&corrupt),
            Err(NnError::Codec(CodecError::ChecksumMismatch { .. }))
        ));
    }
}
