//! Define-by-run tape. Ops execute eagerly, record enough context for the
//! backward pass, and are freed when the tape drops.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NnError, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// [B,P,D] + [B,D], the per-sample vector broadcast over P.
    AddPerSample(NodeId, NodeId),
    /// [B,P,D] + [P,D], the table broadcast over the batch.
    AddTable(NodeId, NodeId),
    /// x [..., din] * w [din, dout] + b [dout].
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// x [B,Cin,T] * w [Cout,Cin,k] + b [Cout], left-padded with (k-1)*d
    /// zeros: output[t] sees inputs at t, t-d, ..., t-(k-1)*d only.
    ConvCausal {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dilation: usize,
    },
    Gelu(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    /// [B,A,C] -> [B,C,A].
    SwapLast2(NodeId),
    /// [B,C,T] -> [B,C], features at the final timestep.
    TakeLastTime(NodeId),
    /// n tensors [B,Fi] -> [B, sum Fi].
    ConcatFeatures(Vec<NodeId>),
    /// n same-shape tensors -> element-wise mean.
    MeanStack(Vec<NodeId>),
    Scale(NodeId, f64),
    /// Mean squared error against a constant target; scalar output.
    MseLoss {
        pred: NodeId,
        target: Tensor,
    },
    /// Sum of all elements; scalar output (used by the gradient checks).
    SumAll(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    /// Present when this leaf mirrors a ParamStore slot.
    param_slot: Option<usize>,
}

pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
    dropout_rng: ChaCha8Rng,
    poisoned: Option<&'static str>,
}

impl Tape {
    pub fn new(training: bool, dropout_seed: u64) -> Tape {
        Tape {
            nodes: Vec::new(),
            training,
            dropout_rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            poisoned: None,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// First op that produced a non-finite value, if any.
    pub fn poisoned(&self) -> Option<&'static str> {
        self.poisoned
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push("constant", value, Op::Leaf, None)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, NnError> {
        let slot = store
            .slot(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        Ok(self.push(
            "param",
            store.value_by_slot(slot).clone(),
            Op::Leaf,
            Some(slot),
        ))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, slot: Option<usize>) -> NodeId {
        if self.poisoned.is_none() && !value.all_finite() {
            self.poisoned = Some(op_name);
        }
        self.nodes.push(Node {
            value,
            op,
            param_slot: slot,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push("add", out, Op::Add(a, b), None))
    }

    pub fn add_per_sample(&mut self, x: NodeId, per_sample: NodeId) -> Result<NodeId, NnError> {
        let (tx, ts) = (self.value(x), self.value(per_sample));
        let [bsz, p, d] = dims3("add_per_sample", tx)?;
        if ts.shape() != [bsz, d] {
            return Err(shape_err(
                "add_per_sample",
                format!("x {:?} vs vector {:?}", tx.shape(), ts.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for bi in 0..bsz {
            for pi in 0..p {
                let base = (bi * p + pi) * d;
                for di in 0..d {
                    data[base + di] += ts.data()[bi * d + di];
                }
            }
        }
        let out = Tensor::from_vec(tx.shape(), data)?;
        Ok(self.push("add_per_sample", out, Op::AddPerSample(x, per_sample), None))
    }

    pub fn add_table(&mut self, x: NodeId, table: NodeId) -> Result<NodeId, NnError> {
        let (tx, tt) = (self.value(x), self.value(table));
        let [bsz, p, d] = dims3("add_table", tx)?;
        if tt.shape() != [p, d] {
            return Err(shape_err(
                "add_table",
                format!("x {:?} vs table {:?}", tx.shape(), tt.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for bi in 0..bsz {
            let base = bi * p * d;
            for j in 0..p * d {
                data[base + j] += tt.data()[j];
            }
        }
        let out = Tensor::from_vec(tx.shape(), data)?;
        Ok(self.push("add_table", out, Op::AddTable(x, table), None))
    }

    /// Affine map over the trailing dimension.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tw.shape().len() != 2 {
            return Err(shape_err("linear", format!("weight must be 2-d, got {:?}", tw.shape())));
        }
        let (din, dout) = (tw.shape()[0], tw.shape()[1]);
        if tx.shape().last() != Some(&din) {
            return Err(shape_err(
                "linear",
                format!("x {:?} incompatible with weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        if tb.shape() != [dout] {
            return Err(shape_err("linear", format!("bias {:?} vs dout {dout}", tb.shape())));
        }
        let rows = tx.numel() / din;
        let mut data = vec![0.0; rows * dout];
        for r in 0..rows {
            let xr = &tx.data()[r * din..(r + 1) * din];
            let or = &mut data[r * dout..(r + 1) * dout];
            or.copy_from_slice(tb.data());
            for (i, &xv) in xr.iter().enumerate() {
                let wr = &tw.data()[i * dout..(i + 1) * dout];
                for (o, &wv) in or.iter_mut().zip(wr) {
                    *o += xv * wv;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push("linear", out, Op::Linear { x, w, b }, None))
    }

    /// Causal dilated 1-d convolution; output length equals input length.
    pub fn conv1d_causal(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dilation: usize,
    ) -> Result<NodeId, NnError> {
        if dilation < 1 {
            return Err(shape_err("conv1d_causal", "dilation must be >= 1".into()));
        }
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let [bsz, c_in, t_len] = dims3("conv1d_causal", tx)?;
        let [c_out, wc_in, k] = dims3("conv1d_causal", tw)?;
        if wc_in != c_in {
            return Err(shape_err(
                "conv1d_causal",
                format!("x channels {c_in} vs kernel {wc_in}"),
            ));
        }
        if tb.shape() != [c_out] {
            return Err(shape_err("conv1d_causal", format!("bias {:?}", tb.shape())));
        }
        let mut data = vec![0.0; bsz * c_out * t_len];
        for bi in 0..bsz {
            for co in 0..c_out {
                let or = &mut data[(bi * c_out + co) * t_len..(bi * c_out + co + 1) * t_len];
                or.iter_mut().for_each(|v| *v = tb.data()[co]);
                for ci in 0..c_in {
                    let xr = &tx.data()[(bi * c_in + ci) * t_len..(bi * c_in + ci + 1) * t_len];
                    for j in 0..k {
                        let wv = tw.data()[(co * c_in + ci) * k + j];
                        if wv == 0.0 {
                            continue;
                        }
                        let off = (k - 1 - j) * dilation;
                        if off >= t_len {
                            continue;
                        }
                        for t in off..t_len {
                            or[t] += wv * xr[t - off];
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[bsz, c_out, t_len], data)?;
        Ok(self.push("conv1d_causal", out, Op::ConvCausal { x, w, b, dilation }, None))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let out = Tensor::from_vec(tx.shape(), data).expect("same shape");
        self.push("gelu", out, Op::Gelu(x), None)
    }

    /// Identity in evaluation mode; in training mode a seeded Bernoulli mask
    /// with 1/(1-rate) rescaling.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(shape_err("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.dropout_rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(tx.shape(), data)?;
        Ok(self.push("dropout", out, Op::Dropout { x, mask }, None))
    }

    pub fn swap_last2(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let tx = self.value(x);
        let [bsz, a, c] = dims3("swap_last2", tx)?;
        let mut data = vec![0.0; tx.numel()];
        for bi in 0..bsz {
            for ai in 0..a {
                for ci in 0..c {
                    data[(bi * c + ci) * a + ai] = tx.data()[(bi * a + ai) * c + ci];
                }
            }
        }
        let out = Tensor::from_vec(&[bsz, c, a], data)?;
        Ok(self.push("swap_last2", out, Op::SwapLast2(x), None))
    }

    pub fn take_last_time(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let tx = self.value(x);
        let [bsz, c, t_len] = dims3("take_last_time", tx)?;
        let mut data = vec![0.0; bsz * c];
        for bi in 0..bsz {
            for ci in 0..c {
                data[bi * c + ci] = tx.data()[(bi * c + ci) * t_len + t_len - 1];
            }
        }
        let out = Tensor::from_vec(&[bsz, c], data)?;
        Ok(self.push("take_last_time", out, Op::TakeLastTime(x), None))
    }

    pub fn concat_features(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        if parts.is_empty() {
            return Err(shape_err("concat_features", "no parts".into()));
        }
        let bsz = self.value(parts[0]).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            if tp.shape().len() != 2 || tp.shape()[0] != bsz {
                return Err(shape_err(
                    "concat_features",
                    format!("expected [{bsz}, *], got {:?}", tp.shape()),
                ));
            }
            widths.push(tp.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; bsz * total];
        for bi in 0..bsz {
            let mut offset = 0;
            for (&p, &wd) in parts.iter().zip(&widths) {
                let tp = self.value(p);
                data[bi * total + offset..bi * total + offset + wd]
                    .copy_from_slice(&tp.data()[bi * wd..(bi + 1) * wd]);
                offset += wd;
            }
        }
        let out = Tensor::from_vec(&[bsz, total], data)?;
        Ok(self.push("concat_features", out, Op::ConcatFeatures(parts.to_vec()), None))
    }

    pub fn mean_stack(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        if parts.is_empty() {
            return Err(shape_err("mean_stack", "no parts".into()));
        }
        let shape = self.value(parts[0]).shape().to_vec();
        for &p in parts {
            if self.value(p).shape() != shape {
                return Err(shape_err(
                    "mean_stack",
                    format!("{:?} vs {:?}", self.value(p).shape(), shape),
                ));
            }
        }
        let n = parts.len() as f64;
        let mut data = vec![0.0; self.value(parts[0]).numel()];
        for &p in parts {
            for (o, &v) in data.iter_mut().zip(self.value(p).data()) {
                *o += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= n);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push("mean_stack", out, Op::MeanStack(parts.to_vec()), None))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let out = Tensor::from_vec(tx.shape(), data).expect("same shape");
        self.push("scale", out, Op::Scale(x, c), None)
    }

    /// Mean over all elements of (pred - target)^2.
    pub fn mse_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId, NnError> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(shape_err(
                "mse_loss",
                format!("pred {:?} vs target {:?}", tp.shape(), target.shape()),
            ));
        }
        let n = tp.numel() as f64;
        let sum: f64 = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let out = Tensor::scalar(sum / n);
        Ok(self.push(
            "mse_loss",
            out,
            Op::MseLoss {
                pred,
                target: target.clone(),
            },
            None,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), None)
    }

    /// Reverse pass from a scalar node; gradients accumulate into `store`.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<(), NnError> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", "loss must be scalar".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if self.poisoned.is_none() && !gy.all_finite() {
                self.poisoned = Some("backward");
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    if let Some(slot) = self.nodes[i].param_slot {
                        let pg = store.grad_by_slot_mut(slot);
                        for (a, b) in pg.data_mut().iter_mut().zip(gy.data()) {
                            *a += b;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gy.data(), self.nodes[a.0].value.shape());
                    accumulate(&mut grads, *b, gy.data(), self.nodes[b.0].value.shape());
                }
                Op::AddPerSample(x, s) => {
                    let [bsz, p, d] = dims3("add_per_sample", &self.nodes[x.0].value)?;
                    accumulate(&mut grads, *x, gy.data(), &[bsz, p, d]);
                    let mut gs = vec![0.0; bsz * d];
                    for bi in 0..bsz {
                        for pi in 0..p {
                            let base = (bi * p + pi) * d;
                            for di in 0..d {
                                gs[bi * d + di] += gy.data()[base + di];
                            }
                        }
                    }
                    accumulate(&mut grads, *s, &gs, &[bsz, d]);
                }
                Op::AddTable(x, tbl) => {
                    let [bsz, p, d] = dims3("add_table", &self.nodes[x.0].value)?;
                    accumulate(&mut grads, *x, gy.data(), &[bsz, p, d]);
                    let mut gt = vec![0.0; p * d];
                    for bi in 0..bsz {
                        for j in 0..p * d {
                            gt[j] += gy.data()[bi * p * d + j];
                        }
                    }
                    accumulate(&mut grads, *tbl, &gt, &[p, d]);
                }
                Op::Linear { x, w, b } => {
                    let tx = &self.nodes[x.0].value;
                    let tw = &self.nodes[w.0].value;
                    let (din, dout) = (tw.shape()[0], tw.shape()[1]);
                    let rows = tx.numel() / din;
                    let mut gx = vec![0.0; tx.numel()];
                    let mut gw = vec![0.0; tw.numel()];
                    let mut gb = vec![0.0; dout];
                    for r in 0..rows {
                        let gyr = &gy.data()[r * dout..(r + 1) * dout];
                        let xr = &tx.data()[r * din..(r + 1) * din];
                        for (o, g) in gb.iter_mut().zip(gyr) {
                            *o += g;
                        }
                        for ii in 0..din {
                            let wr = &tw.data()[ii * dout..(ii + 1) * dout];
                            let mut acc = 0.0;
                            for (g, wv) in gyr.iter().zip(wr) {
                                acc += g * wv;
                            }
                            gx[r * din + ii] = acc;
                            let gwr = &mut gw[ii * dout..(ii + 1) * dout];
                            for (o, g) in gwr.iter_mut().zip(gyr) {
                                *o += xr[ii] * g;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &gx, tx.shape());
                    accumulate(&mut grads, *w, &gw, tw.shape());
                    accumulate(&mut grads, *b, &gb, &[dout]);
                }
                Op::ConvCausal { x, w, b, dilation } => {
                    let tx = &self.nodes[x.0].value;
                    let tw = &self.nodes[w.0].value;
                    let [bsz, c_in, t_len] = dims3("conv1d_causal", tx)?;
                    let [c_out, _, k] = dims3("conv1d_causal", tw)?;
                    let mut gx = vec![0.0; tx.numel()];
                    let mut gw = vec![0.0; tw.numel()];
                    let mut gb = vec![0.0; c_out];
                    for bi in 0..bsz {
                        for co in 0..c_out {
                            let gyr = &gy.data()
                                [(bi * c_out + co) * t_len..(bi * c_out + co + 1) * t_len];
                            gb[co] += gyr.iter().sum::<f64>();
                            for ci in 0..c_in {
                                let xr = &tx.data()
                                    [(bi * c_in + ci) * t_len..(bi * c_in + ci + 1) * t_len];
                                let gxr = &mut gx
                                    [(bi * c_in + ci) * t_len..(bi * c_in + ci + 1) * t_len];
                                for j in 0..k {
                                    let off = (k - 1 - j) * dilation;
                                    if off >= t_len {
                                        continue;
                                    }
                                    let wv = tw.data()[(co * c_in + ci) * k + j];
                                    let mut wacc = 0.0;
                                    for t in off..t_len {
                                        gxr[t - off] += wv * gyr[t];
                                        wacc += xr[t - off] * gyr[t];
                                    }
                                    gw[(co * c_in + ci) * k + j] += wacc;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &gx, tx.shape());
                    accumulate(&mut grads, *w, &gw, tw.shape());
                    accumulate(&mut grads, *b, &gb, &[c_out]);
                }
                Op::Gelu(x) => {
                    let tx = &self.nodes[x.0].value;
                    let gx: Vec<f64> = tx
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| g * gelu_bwd(v))
                        .collect();
                    accumulate(&mut grads, *x, &gx, tx.shape());
                }
                Op::Dropout { x, mask } => {
                    let tx = &self.nodes[x.0].value;
                    let gx: Vec<f64> = mask.iter().zip(gy.data()).map(|(m, g)| m * g).collect();
                    accumulate(&mut grads, *x, &gx, tx.shape());
                }
                Op::SwapLast2(x) => {
                    let tx = &self.nodes[x.0].value;
                    let [bsz, a, c] = dims3("swap_last2", tx)?;
                    let mut gx = vec![0.0; tx.numel()];
                    for bi in 0..bsz {
                        for ai in 0..a {
                            for ci in 0..c {
                                gx[(bi * a + ai) * c + ci] += gy.data()[(bi * c + ci) * a + ai];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &gx, tx.shape());
                }
                Op::TakeLastTime(x) => {
                    let tx = &self.nodes[x.0].value;
                    let [bsz, c, t_len] = dims3("take_last_time", tx)?;
                    let mut gx = vec![0.0; tx.numel()];
                    for bi in 0..bsz {
                        for ci in 0..c {
                            gx[(bi * c + ci) * t_len + t_len - 1] = gy.data()[bi * c + ci];
                        }
                    }
                    accumulate(&mut grads, *x, &gx, tx.shape());
                }
                Op::ConcatFeatures(parts) => {
                    let parts = parts.clone();
                    let bsz = self.nodes[parts[0].0].value.shape()[0];
                    let total: usize = parts
                        .iter()
                        .map(|p| self.nodes[p.0].value.shape()[1])
                        .sum();
                    let mut offset = 0;
                    for &p in &parts {
                        let wd = self.nodes[p.0].value.shape()[1];
                        let mut gp = vec![0.0; bsz * wd];
                        for bi in 0..bsz {
                            gp[bi * wd..(bi + 1) * wd].copy_from_slice(
                                &gy.data()[bi * total + offset..bi * total + offset + wd],
                            );
                        }
                        accumulate(&mut grads, p, &gp, &[bsz, wd]);
                        offset += wd;
                    }
                }
                Op::MeanStack(parts) => {
                    let parts = parts.clone();
                    let n = parts.len() as f64;
                    let gp: Vec<f64> = gy.data().iter().map(|g| g / n).collect();
                    for &p in &parts {
                        let shape = self.nodes[p.0].value.shape().to_vec();
                        accumulate(&mut grads, p, &gp, &shape);
                    }
                }
                Op::Scale(x, c) => {
                    let tx = &self.nodes[x.0].value;
                    let gx: Vec<f64> = gy.data().iter().map(|g| g * c).collect();
                    accumulate(&mut grads, *x, &gx, tx.shape());
                }
                Op::MseLoss { pred, target } => {
                    let tp = &self.nodes[pred.0].value;
                    let n = tp.numel() as f64;
                    let g = gy.item();
                    let gp: Vec<f64> = tp
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(p, t)| g * 2.0 * (p - t) / n)
                        .collect();
                    accumulate(&mut grads, *pred, &gp, tp.shape());
                }
                Op::SumAll(x) => {
                    let tx = &self.nodes[x.0].value;
                    let g = gy.item();
                    let gx = vec![g; tx.numel()];
                    accumulate(&mut grads, *x, &gx, tx.shape());
                }
            }
        }
        if let Some(op) = self.poisoned {
            return Err(NnError::NonFinite { op });
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: &[f64], shape: &[usize]) {
    let slot = &mut grads[id.0];
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor::from_vec(shape, delta.to_vec()).expect("gradient shape"));
        }
    }
}

fn dims3(op: &'static str, t: &Tensor) -> Result<[usize; 3], NnError> {
    match t.shape() {
        [a, b, c] => Ok([*a, *b, *c]),
        other => Err(shape_err(op, format!("expected 3-d tensor, got {other:?}"))),
    }
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::ShapeMismatch { op, detail }
}

// tanh-approximation constants: sqrt(2/pi) and the cubic coefficient.
const GELU_C1: f64 = 0.797_884_560_802_865_4;
const GELU_C2: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C1 * (x + GELU_C2 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C1 * (x + GELU_C2 * x * x * x);
    let t = u.tanh();
    let du = GELU_C1 * (1.0 + 3.0 * GELU_C2 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn rand_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences against the analytic gradient for every
    /// parameter in the store. `build` must construct the scalar loss from a
    /// fresh tape (same dropout seed each call, so masks match).
    fn fd_check<F>(store: &mut ParamStore, build: F, rel_tol: f64)
    where
        F: Fn(&mut Tape, &ParamStore) -> NodeId,
    {
        store.zero_grads();
        let mut tape = Tape::new(true, 7);
        let loss = build(&mut tape, store);
        tape.backward(loss, store).unwrap();

        let h = 1e-4;
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in &names {
            let n = store.value(name).unwrap().numel();
            for j in 0..n {
                let orig = store.value(name).unwrap().data()[j];
                store.value_mut(name).unwrap().data_mut()[j] = orig + h;
                let mut tp = Tape::new(true, 7);
                let lp = build(&mut tp, store);
                let fp = tp.value(lp).item();
                store.value_mut(name).unwrap().data_mut()[j] = orig - h;
                let mut tm = Tape::new(true, 7);
                let lm = build(&mut tm, store);
                let fm = tm.value(lm).item();
                store.value_mut(name).unwrap().data_mut()[j] = orig;

                let fd = (fp - fm) / (2.0 * h);
                let an = store.grad(name).unwrap().data()[j];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom <= rel_tol,
                    "{name}[{j}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut store = ParamStore::new();
        store
            .add("w", Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        store.add("b", Tensor::zeros(&[2])).unwrap();
        let mut tape = Tape::new(false, 0);
        let x = tape.constant(Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let w = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn linear_scalar_case() {
        // x=2, W=3, b=1 -> 7; dL/dW with L = out is x = 2.
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(&[1, 1], vec![3.0]).unwrap()).unwrap();
        store.add("b", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        let mut tape = Tape::new(false, 0);
        let x = tape.constant(Tensor::from_vec(&[1, 1], vec![2.0]).unwrap());
        let w = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
        let loss = tape.sum_all(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[2.0]);
        assert_eq!(store.grad("b").unwrap().data(), &[1.0]);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        for seed in 0..25u64 {
            let mut rng = stream_rng(seed, "nn-linear-fd", 0);
            let mut store = ParamStore::new();
            store.add("w", rand_tensor(&[4, 5], &mut rng)).unwrap();
            store.add("b", rand_tensor(&[5], &mut rng)).unwrap();
            let x = rand_tensor(&[3, 4], &mut rng);
            let target = rand_tensor(&[3, 5], &mut rng);
            fd_check(
                &mut store,
                move |tape, store| {
                    let xi = tape.constant(x.clone());
                    let w = tape.param(store, "w").unwrap();
                    let b = tape.param(store, "b").unwrap();
                    let y = tape.linear(xi, w, b).unwrap();
                    tape.mse_loss(y, &target).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new(false, 0);
        let x = tape.constant(Tensor::from_vec(&[1, 1, 5], vec![1., 2., 3., 4., 5.]).unwrap());
        let w = tape.constant(Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1d_causal(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4., 5.]);
    }

    #[test]
    fn conv_impulse_response_with_dilation() {
        // delta at t=5, kernel (1, 1), k=2, d=2: taps at t and t+2.
        let mut data = vec![0.0; 12];
        data[5] = 1.0;
        let mut tape = Tape::new(false, 0);
        let x = tape.constant(Tensor::from_vec(&[1, 1, 12], data).unwrap());
        let w = tape.constant(Tensor::from_vec(&[1, 1, 2], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1d_causal(x, w, b, 2).unwrap();
        let out = tape.value(y).data();
        for (t, &v) in out.iter().enumerate() {
            let expect = if t == 5 || t == 7 { 1.0 } else { 0.0 };
            assert_eq!(v, expect, "t={t}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..25u64 {
            let mut rng = stream_rng(seed, "nn-conv-fd", 0);
            let (bsz, c_in, c_out, k, t_len) = (2usize, 2usize, 3usize, 3usize, 7usize);
            let d = 1 + (seed % 3) as usize;
            let mut store = ParamStore::new();
            store.add("w", rand_tensor(&[c_out, c_in, k], &mut rng)).unwrap();
            store.add("b", rand_tensor(&[c_out], &mut rng)).unwrap();
            let x = rand_tensor(&[bsz, c_in, t_len], &mut rng);
            let target = rand_tensor(&[bsz, c_out, t_len], &mut rng);
            fd_check(
                &mut store,
                move |tape, store| {
                    let xi = tape.constant(x.clone());
                    let w = tape.param(store, "w").unwrap();
                    let b = tape.param(store, "b").unwrap();
                    let y = tape.conv1d_causal(xi, w, b, d).unwrap();
                    tape.mse_loss(y, &target).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn conv_is_strictly_causal() {
        // Jacobian probe: d output[t] / d input[t'] must vanish for t' > t.
        let mut rng = stream_rng(3, "nn-causality", 0);
        let t_len = 10;
        let x = rand_tensor(&[1, 1, t_len], &mut rng);
        let w = rand_tensor(&[1, 1, 3], &mut rng);
        let b = rand_tensor(&[1], &mut rng);
        let base = {
            let mut tape = Tape::new(false, 0);
            let xi = tape.constant(x.clone());
            let wi = tape.constant(w.clone());
            let bi = tape.constant(b.clone());
            let y = tape.conv1d_causal(xi, wi, bi, 2).unwrap();
            tape.value(y).data().to_vec()
        };
        for tp in 0..t_len {
            let mut xp = x.clone();
            xp.data_mut()[tp] += 1.0;
            let mut tape = Tape::new(false, 0);
            let xi = tape.constant(xp);
            let wi = tape.constant(w.clone());
            let bi = tape.constant(b.clone());
            let y = tape.conv1d_causal(xi, wi, bi, 2).unwrap();
            for (t, (&after, &before)) in tape.value(y).data().iter().zip(&base).enumerate() {
                if t < tp {
                    assert_eq!(after, before, "output[{t}] changed by input[{tp}]");
                }
            }
        }
    }

    #[test]
    fn gelu_fixed_points_and_gradient() {
        assert_eq!(gelu_fwd(0.0), 0.0);
        let mut rng = stream_rng(1, "nn-gelu", 0);
        for _ in 0..100 {
            let x: f64 = rng.random_range(-4.0..4.0);
            let h = 1e-5;
            let fd = (gelu_fwd(x + h) - gelu_fwd(x - h)) / (2.0 * h);
            let an = gelu_bwd(x);
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) <= 1e-4,
                "x={x}: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn gelu_graph_gradient_matches_fd() {
        for seed in 0..25u64 {
            let mut rng = stream_rng(seed, "nn-gelu-fd", 0);
            let mut store = ParamStore::new();
            store.add("w", rand_tensor(&[3, 3], &mut rng)).unwrap();
            store.add("b", rand_tensor(&[3], &mut rng)).unwrap();
            let x = rand_tensor(&[2, 3], &mut rng);
            let target = rand_tensor(&[2, 3], &mut rng);
            fd_check(
                &mut store,
                move |tape, store| {
                    let xi = tape.constant(x.clone());
                    let w = tape.param(store, "w").unwrap();
                    let b = tape.param(store, "b").unwrap();
                    let y = tape.linear(xi, w, b).unwrap();
                    let z = tape.gelu(y);
                    tape.mse_loss(z, &target).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_rescales() {
        let mut tape = Tape::new(false, 0);
        let x = tape.constant(Tensor::from_vec(&[1, 4], vec![1., 2., 3., 4.]).unwrap());
        let y = tape.dropout(x, 0.5).unwrap();
        assert_eq!(x, y, "eval mode must be the identity");

        let mut tape = Tape::new(true, 42);
        let n = 10_000;
        let x = tape.constant(Tensor::from_vec(&[1, n], vec![1.0; n]).unwrap());
        let y = tape.dropout(x, 0.25).unwrap();
        let vals = tape.value(y).data();
        let kept = vals.iter().filter(|v| **v > 0.0).count();
        for &v in vals {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12);
        }
        let frac = kept as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.02, "kept {frac}");
        // Same seed, same mask.
        let mut tape2 = Tape::new(true, 42);
        let x2 = tape2.constant(Tensor::from_vec(&[1, n], vec![1.0; n]).unwrap());
        let y2 = tape2.dropout(x2, 0.25).unwrap();
        assert_eq!(tape.value(y).data(), tape2.value(y2).data());
    }

    #[test]
    fn dropout_gradient_applies_stored_mask() {
        for seed in 0..25u64 {
            let mut rng = stream_rng(seed, "nn-dropout-fd", 0);
            let mut store = ParamStore::new();
            store.add("w", rand_tensor(&[3, 4], &mut rng)).unwrap();
            store.add("b", rand_tensor(&[4], &mut rng)).unwrap();
            let x = rand_tensor(&[2, 3], &mut rng);
            let target = rand_tensor(&[2, 4], &mut rng);
            fd_check(
                &mut store,
                move |tape, store| {
                    let xi = tape.constant(x.clone());
                    let w = tape.param(store, "w").unwrap();
                    let b = tape.param(store, "b").unwrap();
                    let y = tape.linear(xi, w, b).unwrap();
                    let z = tape.dropout(y, 0.3).unwrap();
                    tape.mse_loss(z, &target).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn mse_of_identical_tensors_is_zero_with_zero_gradient() {
        let mut store = ParamStore::new();
        store
            .add("w", Tensor::from_vec(&[2], vec![1.5, -0.5]).unwrap())
            .unwrap();
        let mut tape = Tape::new(false, 0);
        let p = tape.param(&store, "w").unwrap();
        let target = Tensor::from_vec(&[2], vec![1.5, -0.5]).unwrap();
        let loss = tape.mse_loss(p, &target).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_and_reshape_ops_match_fd() {
        for seed in 0..25u64 {
            let mut rng = stream_rng(seed, "nn-misc-fd", 0);
            let (bsz, p, d) = (2usize, 3usize, 4usize);
            let mut store = ParamStore::new();
            store.add("per_sample", rand_tensor(&[bsz, d], &mut rng)).unwrap();
            store.add("table", rand_tensor(&[p, d], &mut rng)).unwrap();
            store.add("base", rand_tensor(&[bsz, p, d], &mut rng)).unwrap();
            let target = rand_tensor(&[bsz, d], &mut rng);
            fd_check(
                &mut store,
                move |tape, store| {
                    let base = tape.param(store, "base").unwrap();
                    let s = tape.param(store, "per_sample").unwrap();
                    let tbl = tape.param(store, "table").unwrap();
                    let a = tape.add_per_sample(base, s).unwrap();
                    let b = tape.add_table(a, tbl).unwrap();
                    let sw = tape.swap_last2(b).unwrap(); // [B, d, p]
                    let last = tape.take_last_time(sw).unwrap(); // [B, d]
                    let half = tape.scale(last, 0.5);
                    tape.mse_loss(half, &target).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn concat_and_mean_stack_match_fd() {
        for seed in 0..25u64 {
            let mut rng = stream_rng(seed, "nn-stack-fd", 0);
            let bsz = 2usize;
            let mut store = ParamStore::new();
            store.add("a", rand_tensor(&[bsz, 3], &mut rng)).unwrap();
            store.add("b", rand_tensor(&[bsz, 2], &mut rng)).unwrap();
            store.add("c", rand_tensor(&[bsz, 3], &mut rng)).unwrap();
            let target = rand_tensor(&[bsz, 8], &mut rng);
            fd_check(
                &mut store,
                move |tape, store| {
                    let a = tape.param(store, "a").unwrap();
                    let b = tape.param(store, "b").unwrap();
                    let c = tape.param(store, "c").unwrap();
                    let m = tape.mean_stack(&[a, c]).unwrap(); // [B,3]
                    let cat = tape.concat_features(&[m, b, c]).unwrap(); // [B,8]
                    tape.mse_loss(cat, &target).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let mut tape = Tape::new(false, 0);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(NnError::ShapeMismatch { .. })));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        let bias = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.linear(a, w, bias),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_values_poison_the_tape() {
        let mut store = ParamStore::new();
        store
            .add("w", Tensor::from_vec(&[1, 1], vec![1e308]).unwrap())
            .unwrap();
        let mut tape = Tape::new(false, 0);
        let x = tape.constant(Tensor::from_vec(&[1, 1], vec![1e308]).unwrap());
        let w = tape.param(&store, "w").unwrap();
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.linear(x, w, b).unwrap(); // overflows to inf
        assert_eq!(tape.poisoned(), Some("linear"));
        let loss = tape.sum_all(y);
        assert!(matches!(
            tape.backward(loss, &mut store),
            Err(NnError::NonFinite { .. })
        ));
    }

    #[test]
    fn training_trajectory_is_deterministic() {
        let run = || {
            let mut rng = stream_rng(5, "nn-det", 0);
            let mut store = ParamStore::new();
            store.add("w", rand_tensor(&[3, 1], &mut rng)).unwrap();
            store.add("b", rand_tensor(&[1], &mut rng)).unwrap();
            let x = rand_tensor(&[4, 3], &mut rng);
            let target = rand_tensor(&[4, 1], &mut rng);
            for step in 0..5 {
                store.zero_grads();
                let mut tape = Tape::new(true, 100 + step);
                let xi = tape.constant(x.clone());
                let w = tape.param(&store, "w").unwrap();
                let b = tape.param(&store, "b").unwrap();
                let y = tape.linear(xi, w, b).unwrap();
                let y = tape.dropout(y, 0.2).unwrap();
                let loss = tape.mse_loss(y, &target).unwrap();
                tape.backward(loss, &mut store).unwrap();
                store.adam_step(1e-2, 0.9, 0.999, 1e-8);
            }
            store.value("w").unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
