//! The decomposition forecaster: per-mode frequency-aware embeddings feed K
//! parallel TCN branches whose outputs are fused by a two-layer MLP.
//!
//! Embedding of mode k at window position t:
//! `E[k,t,:] = TokenEmbed_k(u_k around t) + TimeEmbed(t) + PosEmbed(t)
//!            + FreqEmbed_k(omega_k)`,
//! where TokenEmbed_k is a causal kernel-3 convolution (1 -> d_model
//! channels), TimeEmbed is a shared linear projection of calendar features,
//! PosEmbed is a fixed sinusoidal table, and FreqEmbed_k is a per-mode linear
//! map of the center frequency, constant over t within a window.
//!
//! Variant switches mirror the ablations: `use_vmd = false` runs a single
//! branch on the raw window (no per-mode parameters at all),
//! `use_freq_embed = false` drops the frequency term, and
//! `parallel_decoding = false` mean-pools the K mode embeddings into one
//! shared TCN decoder.

mod train;

pub use train::{
    evaluate, metrics_from_predictions, train, Metrics, TrainError, TrainHistory, TrainHyper,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{NnError, NodeId, ParamStore, Tape, Tensor};
use crate::rng::stream_rng;
use crate::windowing::{DecomposedDataset, TIME_FEATURE_DIM};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_modes: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub tcn_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dropout: f64,
    pub use_vmd: bool,
    pub use_freq_embed: bool,
    pub parallel_decoding: bool,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_modes: 4,
            lookback: 336,
            horizon: 96,
            d_model: 64,
            tcn_channels: vec![32, 64, 64],
            kernel_size: 3,
            dropout: 0.1,
            use_vmd: true,
            use_freq_embed: true,
            parallel_decoding: true,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let fail = |detail: String| NnError::ShapeMismatch {
            op: "model_config",
            detail,
        };
        if self.tcn_channels.is_empty() {
            return Err(fail("tcn_channels must be non-empty".into()));
        }
        if self.d_model < 8 {
            return Err(fail(format!("d_model {} < 8", self.d_model)));
        }
        if self.kernel_size < 1 {
            return Err(fail("kernel_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(fail(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.use_vmd && self.num_modes < 1 {
            return Err(fail("num_modes must be >= 1".into()));
        }
        Ok(())
    }

    /// Branch count actually instantiated: 1 for the raw-input variant.
    pub fn effective_modes(&self) -> usize {
        if self.use_vmd {
            self.num_modes
        } else {
            1
        }
    }

    /// Receptive field of one branch: each block applies two dilated convs,
    /// so `1 + 2*(k-1)*(2^L - 1)` positions.
    pub fn receptive_field(&self) -> usize {
        let dil_sum: usize = (0..self.tcn_channels.len()).map(|l| 1usize << l).sum();
        1 + 2 * (self.kernel_size - 1) * dil_sum
    }

    /// Layer count needed for the receptive field to cover `lookback`, i.e.
    /// the smallest L with `1 + 2*(k-1)*(2^L - 1) >= P`.
    pub fn layers_to_cover(lookback: usize, kernel_size: usize) -> usize {
        let span = 2 * (kernel_size.max(2) - 1);
        let need = (lookback.saturating_sub(1)) as f64 / span as f64 + 1.0;
        need.log2().ceil().max(1.0) as usize
    }
}

/// Mini-batch in tensor form, ready for the tape.
#[derive(Debug, Clone)]
pub struct Batch {
    /// [B, K_eff, P]
    pub modes: Tensor,
    /// [B, K_eff]
    pub omegas: Tensor,
    /// [B, P, TIME_FEATURE_DIM]
    pub time: Tensor,
    /// [B, F]
    pub target: Tensor,
}

impl Batch {
    /// Assemble rows `indices` of a decomposed dataset. The dataset mode
    /// count must match the model's effective branch count (the raw-window
    /// variant expects a K=1 dataset built without decomposition).
    pub fn from_dataset(
        ds: &DecomposedDataset,
        indices: &[usize],
        config: &ModelConfig,
    ) -> Result<Batch, NnError> {
        let k = config.effective_modes();
        if ds.num_modes != k {
            return Err(NnError::ShapeMismatch {
                op: "batch",
                detail: format!(
                    "dataset has {} modes, model expects {k}",
                    ds.num_modes
                ),
            });
        }
        let (p, f) = (ds.lookback, ds.horizon);
        let bsz = indices.len();
        let mut modes = Vec::with_capacity(bsz * k * p);
        let mut omegas = Vec::with_capacity(bsz * k);
        let mut time = Vec::with_capacity(bsz * p * TIME_FEATURE_DIM);
        let mut target = Vec::with_capacity(bsz * f);
        for &b in indices {
            modes.extend_from_slice(ds.window_modes(b));
            omegas.extend_from_slice(ds.omegas(b));
            match ds.window_time_features(b) {
                Some(tf) => time.extend_from_slice(tf),
                None => time.extend(std::iter::repeat_n(0.0, p * TIME_FEATURE_DIM)),
            }
            target.extend_from_slice(ds.target(b));
        }
        Ok(Batch {
            modes: Tensor::from_vec(&[bsz, k, p], modes)?,
            omegas: Tensor::from_vec(&[bsz, k], omegas)?,
            time: Tensor::from_vec(&[bsz, p, TIME_FEATURE_DIM], time)?,
            target: Tensor::from_vec(&[bsz, f], target)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.modes.shape()[0]
    }
}

/// Parameter set plus the fixed positional table.
#[derive(Debug, Clone)]
pub struct VmdNetModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pos_table: Tensor,
}

fn branch_prefix(config: &ModelConfig, k: usize) -> String {
    if !config.use_vmd {
        "raw.".to_string()
    } else if config.parallel_decoding {
        format!("mode{k}.")
    } else {
        // Embeddings stay per-mode; the decoder is shared.
        format!("mode{k}.")
    }
}

fn decoder_prefix(config: &ModelConfig, k: usize) -> String {
    if !config.use_vmd {
        "raw.".to_string()
    } else if config.parallel_decoding {
        format!("mode{k}.")
    } else {
        "pooled.".to_string()
    }
}

impl VmdNetModel {
    pub fn new(config: ModelConfig) -> Result<VmdNetModel, NnError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream_rng(config.rng_seed, "model-init", 0);
        let d = config.d_model;
        let kernel = config.kernel_size;

        let mut init = |store: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            store
                .add(name, Tensor::from_vec(shape, data).expect("init shape"))
                .expect("unique parameter names");
        };

        // Shared calendar projection.
        init(&mut store, "time.w", &[TIME_FEATURE_DIM, d], TIME_FEATURE_DIM);
        init(&mut store, "time.b", &[d], TIME_FEATURE_DIM);

        let k_eff = config.effective_modes();
        for k in 0..k_eff {
            let prefix = branch_prefix(&config, k);
            init(&mut store, &format!("{prefix}token.w"), &[d, 1, kernel], kernel);
            init(&mut store, &format!("{prefix}token.b"), &[d], kernel);
            if config.use_vmd && config.use_freq_embed {
                init(&mut store, &format!("{prefix}freq.w"), &[1, d], 1);
                init(&mut store, &format!("{prefix}freq.b"), &[d], 1);
            }
        }

        let decoder_count = if !config.use_vmd || !config.parallel_decoding {
            1
        } else {
            k_eff
        };
        for k in 0..decoder_count {
            let prefix = decoder_prefix(&config, k);
            let mut c_in = d;
            for (l, &c_out) in config.tcn_channels.iter().enumerate() {
                let base = format!("{prefix}tcn.block{l}");
                init(&mut store, &format!("{base}.conv1.w"), &[c_out, c_in, kernel], c_in * kernel);
                init(&mut store, &format!("{base}.conv1.b"), &[c_out], c_in * kernel);
                init(&mut store, &format!("{base}.conv2.w"), &[c_out, c_out, kernel], c_out * kernel);
                init(&mut store, &format!("{base}.conv2.b"), &[c_out], c_out * kernel);
                if c_in != c_out {
                    init(&mut store, &format!("{base}.skip.w"), &[c_out, c_in, 1], c_in);
                    init(&mut store, &format!("{base}.skip.b"), &[c_out], c_in);
                }
                c_in = c_out;
            }
            let c_last = *config.tcn_channels.last().unwrap();
            init(&mut store, &format!("{prefix}head.w"), &[c_last, config.horizon], c_last);
            init(&mut store, &format!("{prefix}head.b"), &[config.horizon], c_last);
        }

        let fusion_in = decoder_count * config.horizon;
        let hidden = 2 * config.horizon;
        init(&mut store, "fusion.l1.w", &[fusion_in, hidden], fusion_in);
        init(&mut store, "fusion.l1.b", &[hidden], fusion_in);
        init(&mut store, "fusion.l2.w", &[hidden, config.horizon], hidden);
        init(&mut store, "fusion.l2.b", &[config.horizon], hidden);

        let pos_table = sinusoidal_table(config.lookback, d);
        Ok(VmdNetModel {
            config,
            store,
            pos_table,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Per-mode embeddings E_k, each [B, P, d_model].
    pub fn embed(&self, tape: &mut Tape, batch: &Batch) -> Result<Vec<NodeId>, NnError> {
        let cfg = &self.config;
        let k_eff = cfg.effective_modes();
        let [bsz, _, p] = [
            batch.modes.shape()[0],
            batch.modes.shape()[1],
            batch.modes.shape()[2],
        ];

        // Shared addends, built once.
        let time_in = tape.constant(batch.time.clone());
        let tw = tape.param(&self.store, "time.w")?;
        let tb = tape.param(&self.store, "time.b")?;
        let time_proj = tape.linear(time_in, tw, tb)?; // [B, P, d]
        let pos = tape.constant(self.pos_table.clone());

        let mut embeddings = Vec::with_capacity(k_eff);
        for k in 0..k_eff {
            let prefix = branch_prefix(cfg, k);
            let mut mode_rows = Vec::with_capacity(bsz * p);
            for b in 0..bsz {
                let start = (b * k_eff + k) * p;
                mode_rows.extend_from_slice(&batch.modes.data()[start..start + p]);
            }
            let x = tape.constant(Tensor::from_vec(&[bsz, 1, p], mode_rows)?);
            let tok_w = tape.param(&self.store, &format!("{prefix}token.w"))?;
            let tok_b = tape.param(&self.store, &format!("{prefix}token.b"))?;
            let tok = tape.conv1d_causal(x, tok_w, tok_b, 1)?; // [B, d, P]
            let tok = tape.swap_last2(tok)?; // [B, P, d]

            let mut e = tape.add(tok, time_proj)?;
            e = tape.add_table(e, pos)?;
            if cfg.use_vmd && cfg.use_freq_embed {
                let mut om = Vec::with_capacity(bsz);
                for b in 0..bsz {
                    om.push(batch.omegas.data()[b * k_eff + k]);
                }
                let om = tape.constant(Tensor::from_vec(&[bsz, 1], om)?);
                let fw = tape.param(&self.store, &format!("{prefix}freq.w"))?;
                let fb = tape.param(&self.store, &format!("{prefix}freq.b"))?;
                let freq = tape.linear(om, fw, fb)?; // [B, d]
                e = tape.add_per_sample(e, freq)?;
            }
            embeddings.push(e);
        }
        Ok(embeddings)
    }

    /// The four embedding addends of one mode, individually, for inspection:
    /// (token, time, pos, freq). Forward-only debug surface.
    pub fn embed_components(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        k: usize,
    ) -> Result<(NodeId, NodeId, NodeId, Option<NodeId>), NnError> {
        let cfg = &self.config;
        let k_eff = cfg.effective_modes();
        let (bsz, p) = (batch.modes.shape()[0], batch.modes.shape()[2]);
        let prefix = branch_prefix(cfg, k);

        let mut mode_rows = Vec::with_capacity(bsz * p);
        for b in 0..bsz {
            let start = (b * k_eff + k) * p;
            mode_rows.extend_from_slice(&batch.modes.data()[start..start + p]);
        }
        let x = tape.constant(Tensor::from_vec(&[bsz, 1, p], mode_rows)?);
        let tok_w = tape.param(&self.store, &format!("{prefix}token.w"))?;
        let tok_b = tape.param(&self.store, &format!("{prefix}token.b"))?;
        let tok = tape.conv1d_causal(x, tok_w, tok_b, 1)?;
        let tok = tape.swap_last2(tok)?;

        let time_in = tape.constant(batch.time.clone());
        let tw = tape.param(&self.store, "time.w")?;
        let tb = tape.param(&self.store, "time.b")?;
        let time_proj = tape.linear(time_in, tw, tb)?;

        let pos = tape.constant(self.pos_table.clone());

        let freq = if cfg.use_vmd && cfg.use_freq_embed {
            let mut om = Vec::with_capacity(bsz);
            for b in 0..bsz {
                om.push(batch.omegas.data()[b * k_eff + k]);
            }
            let om = tape.constant(Tensor::from_vec(&[bsz, 1], om)?);
            let fw = tape.param(&self.store, &format!("{prefix}freq.w"))?;
            let fb = tape.param(&self.store, &format!("{prefix}freq.b"))?;
            Some(tape.linear(om, fw, fb)?)
        } else {
            None
        };
        Ok((tok, time_proj, pos, freq))
    }

    /// One decoder branch: stacked residual blocks of dilated causal convs,
    /// then a linear head on the final-position features. `decoder` selects
    /// the parameter group (mode index, or ignored when the decoder is
    /// shared).
    pub fn decode_branch(
        &self,
        tape: &mut Tape,
        embedding: NodeId,
        decoder: usize,
    ) -> Result<NodeId, NnError> {
        let cfg = &self.config;
        let prefix = decoder_prefix(cfg, decoder);
        let mut h = tape.swap_last2(embedding)?; // [B, d, P]
        let mut c_in = cfg.d_model;
        for (l, &c_out) in cfg.tcn_channels.iter().enumerate() {
            let base = format!("{prefix}tcn.block{l}");
            let dilation = 1usize << l;
            let w1 = tape.param(&self.store, &format!("{base}.conv1.w"))?;
            let b1 = tape.param(&self.store, &format!("{base}.conv1.b"))?;
            let mut o = tape.conv1d_causal(h, w1, b1, dilation)?;
            o = tape.gelu(o);
            o = tape.dropout(o, cfg.dropout)?;
            let w2 = tape.param(&self.store, &format!("{base}.conv2.w"))?;
            let b2 = tape.param(&self.store, &format!("{base}.conv2.b"))?;
            o = tape.conv1d_causal(o, w2, b2, dilation)?;
            o = tape.gelu(o);
            o = tape.dropout(o, cfg.dropout)?;
            let residual = if c_in == c_out {
                h
            } else {
                let sw = tape.param(&self.store, &format!("{base}.skip.w"))?;
                let sb = tape.param(&self.store, &format!("{base}.skip.b"))?;
                tape.conv1d_causal(h, sw, sb, 1)?
            };
            h = tape.add(o, residual)?;
            c_in = c_out;
        }
        let feats = tape.take_last_time(h)?; // [B, c_last]
        let hw = tape.param(&self.store, &format!("{prefix}head.w"))?;
        let hb = tape.param(&self.store, &format!("{prefix}head.b"))?;
        tape.linear(feats, hw, hb)
    }

    /// Full forward pass to a [B, F] forecast.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<NodeId, NnError> {
        let cfg = &self.config;
        let embeddings = self.embed(tape, batch)?;

        let branch_outputs = if !cfg.use_vmd {
            vec![self.decode_branch(tape, embeddings[0], 0)?]
        } else if cfg.parallel_decoding {
            let mut outs = Vec::with_capacity(embeddings.len());
            for (k, &e) in embeddings.iter().enumerate() {
                outs.push(self.decode_branch(tape, e, k)?);
            }
            outs
        } else {
            let pooled = tape.mean_stack(&embeddings)?;
            vec![self.decode_branch(tape, pooled, 0)?]
        };

        let stacked = tape.concat_features(&branch_outputs)?;
        let w1 = tape.param(&self.store, "fusion.l1.w")?;
        let b1 = tape.param(&self.store, "fusion.l1.b")?;
        let mut h = tape.linear(stacked, w1, b1)?;
        h = tape.gelu(h);
        let w2 = tape.param(&self.store, "fusion.l2.w")?;
        let b2 = tape.param(&self.store, "fusion.l2.b")?;
        tape.linear(h, w2, b2)
    }
}

fn sinusoidal_table(p: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; p * d];
    for t in 0..p {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let rate = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
            let angle = t as f64 * rate;
            data[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(&[p, d], data).expect("table shape")
}
