//! Reverse-mode differentiation over a fixed vocabulary of tensor ops.
//!
//! A [`Tape`] records every op applied to its [`Var`]s together with the
//! values needed for the backward sweep. Parameters enter the tape through
//! [`Tape::param`]; [`Tape::backward`] writes their gradients back into the
//! owning [`ParamStore`].

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, usage_err, Error, Result};

/// `sqrt(2/pi)` for the tanh approximation of GELU.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

/// Layout shared by the two attention ops: `groups` independent sequences
/// of `seq` rows each, with the feature axis split into `heads` slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub groups: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    AddScalar(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropyMasked {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    AttnScores {
        q: Var,
        k: Var,
        layout: HeadLayout,
        scale: f64,
    },
    AttnMix {
        p: Var,
        v: Var,
        layout: HeadLayout,
    },
    Sum(Var),
    WeightedSse {
        pred: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_CUBIC * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite input to {what}")))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; gradients may still be read via [`Tape::gradients`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copies a parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params.push((v, id));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return shape_err(format!("matmul inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    /// Adds a length-`C` bias to every row of an `R x C` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(bias).numel() != c {
            return shape_err(format!("bias of {} for {c} columns", self.value(bias).numel()));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::AddBias(x, bias)))
    }

    /// Adds a single-element tensor to every entry.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let data = self.value(x).data().iter().map(|v| v + sv).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddScalar(x, s)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mul {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).expect("same shape");
        self.push(out, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| gelu(v)).collect()).expect("same shape");
        self.push(out, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| softplus(v)).collect()).expect("same shape");
        self.push(out, Op::Softplus(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        check_finite(self.value(x), "softmax_rows")?;
        let mut out = vec![0.0; r * c];
        for (src, dst) in self.value(x).data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(src, dst);
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::SoftmaxRows(x)))
    }

    /// Per-row normalization followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.value(x).dims2()?;
        if d == 0 {
            return shape_err("layer_norm over an empty feature axis");
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return shape_err("layer_norm gain/bias length must equal the feature width");
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for (row_idx, row) in self.value(x).data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[row_idx] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[row_idx * d + j] = xh;
                out[row_idx * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![r, d], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return shape_err(format!("embedding id {id} out of range for {v} rows"));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sum over rows with `mask[r]` of `-log softmax(logits[r])[targets[r]]`.
    /// Rows outside the mask contribute exactly zero.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (r, c) = self.value(logits).dims2()?;
        if targets.len() != r || mask.len() != r {
            return shape_err("targets and mask must have one entry per logits row");
        }
        check_finite(self.value(logits), "cross_entropy_masked")?;
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for (row_idx, row) in self.value(logits).data().chunks(c).enumerate() {
            if !mask[row_idx] {
                continue;
            }
            let t = targets[row_idx];
            if t >= c {
                return shape_err(format!("target {t} out of range for {c} classes"));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_into(row, &mut probs[row_idx * c..(row_idx + 1) * c]);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        ))
    }

    /// Scaled per-head dot products. `q` and `k` are `(groups*seq) x D`;
    /// the result is `(groups*heads*seq) x seq` with row `(g, h, i)` holding
    /// `scale * <q[g,i,h-slice], k[g,j,h-slice]>` over `j`.
    pub fn attn_scores(&mut self, q: Var, k: Var, layout: HeadLayout, scale: f64) -> Result<Var> {
        let (rq, d) = self.value(q).dims2()?;
        let (rk, dk) = self.value(k).dims2()?;
        let HeadLayout { groups, seq, heads } = layout;
        if rq != groups * seq || rk != rq || dk != d || heads == 0 || d % heads != 0 {
            return shape_err("attn_scores layout does not match q/k shapes");
        }
        let dh = d / heads;
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let mut out = vec![0.0; groups * heads * seq * seq];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..seq {
                    let qrow = &qd[(g * seq + i) * d + h * dh..(g * seq + i) * d + (h + 1) * dh];
                    let orow = ((g * heads + h) * seq + i) * seq;
                    for j in 0..seq {
                        let krow = &kd[(g * seq + j) * d + h * dh..(g * seq + j) * d + (h + 1) * dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        out[orow + j] = scale * dot;
                    }
                }
            }
        }
        let value = Tensor::new(vec![groups * heads * seq, seq], out)?;
        Ok(self.push(value, Op::AttnScores { q, k, layout, scale }))
    }

    /// Mixes value rows by attention weights; inverse layout of
    /// [`Tape::attn_scores`], producing `(groups*seq) x D`.
    pub fn attn_mix(&mut self, p: Var, v: Var, layout: HeadLayout) -> Result<Var> {
        let (rp, cp) = self.value(p).dims2()?;
        let (rv, d) = self.value(v).dims2()?;
        let HeadLayout { groups, seq, heads } = layout;
        if rp != groups * heads * seq || cp != seq || rv != groups * seq || heads == 0 || d % heads != 0 {
            return shape_err("attn_mix layout does not match p/v shapes");
        }
        let dh = d / heads;
        let pd = self.value(p).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; groups * seq * d];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..seq {
                    let prow = &pd[((g * heads + h) * seq + i) * seq..][..seq];
                    let orow = &mut out[(g * seq + i) * d + h * dh..][..dh];
                    for (j, &w) in prow.iter().enumerate() {
                        let vrow = &vd[(g * seq + j) * d + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![groups * seq, d], out)?;
        Ok(self.push(value, Op::AttnMix { p, v, layout }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `sum(weight * (pred - target)^2)` against constant targets.
    pub fn weighted_sse(&mut self, pred: Var, target: &[f64], weight: &[f64]) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.len() != n || weight.len() != n {
            return shape_err("weighted_sse target/weight length mismatch");
        }
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .zip(weight)
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSse {
                pred,
                target: target.to_vec(),
                weight: weight.to_vec(),
            },
        ))
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).numel() != 1 {
            return usage_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(grads)
    }

    /// Backpropagates `loss` and overwrites the store's gradients; parameters
    /// the loss does not reach end up with zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for &(v, id) in &self.params {
            if let Some(g) = &grads[v.0] {
                store.accumulate_grad(id, g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                // dA = dY * B^T ; dB = A^T * dY
                let ga = accumulate(grads, *a, m * k);
                gemm(m, n, k, gy, false, bd, true, 1.0, ga);
                let gb = accumulate(grads, *b, k * n);
                gemm(k, m, n, ad, true, gy, false, 1.0, gb);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let g = accumulate(grads, v, gy.len());
                    g.iter_mut().zip(gy).for_each(|(x, y)| *x += y);
                }
            }
            Op::AddBias(x, bias) => {
                let c = self.value(*bias).numel();
                let gx = accumulate(grads, *x, gy.len());
                gx.iter_mut().zip(gy).for_each(|(x, y)| *x += y);
                let gb = accumulate(grads, *bias, c);
                for row in gy.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
            Op::AddScalar(x, s) => {
                let gx = accumulate(grads, *x, gy.len());
                gx.iter_mut().zip(gy).for_each(|(x, y)| *x += y);
                let total: f64 = gy.iter().sum();
                accumulate(grads, *s, 1)[0] += total;
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                {
                    let ga = accumulate(grads, *a, gy.len());
                    for i in 0..gy.len() {
                        ga[i] += gy[i] * bd[i];
                    }
                }
                let gb = accumulate(grads, *b, gy.len());
                for i in 0..gy.len() {
                    gb[i] += gy[i] * ad[i];
                }
            }
            Op::Scale(x, c) => {
                let gx = accumulate(grads, *x, gy.len());
                gx.iter_mut().zip(gy).for_each(|(g, y)| *g += c * y);
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                let gx = accumulate(grads, *x, gy.len());
                for i in 0..gy.len() {
                    gx[i] += gy[i] * gelu_grad(xd[i]);
                }
            }
            Op::Softplus(x) => {
                let xd = self.value(*x).data();
                let gx = accumulate(grads, *x, gy.len());
                for i in 0..gy.len() {
                    gx[i] += gy[i] * sigmoid(xd[i]);
                }
            }
            Op::SoftmaxRows(x) => {
                let (_, c) = node.value.dims2()?;
                let y = node.value.data();
                let gx = accumulate(grads, *x, gy.len());
                for ((yr, gyr), gxr) in y.chunks(c).zip(gy.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gyr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gxr[j] += yr[j] * (gyr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let g = self.value(*gain).data();
                {
                    let gg = accumulate(grads, *gain, d);
                    for (xr, gyr) in xhat.chunks(d).zip(gy.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gyr[j] * xr[j];
                        }
                    }
                }
                {
                    let gb = accumulate(grads, *bias, d);
                    for gyr in gy.chunks(d) {
                        gb.iter_mut().zip(gyr).for_each(|(a, b)| *a += b);
                    }
                }
                let gx = accumulate(grads, *x, gy.len());
                let mut dxhat = vec![0.0; d];
                for (r, ((xr, gyr), gxr)) in xhat.chunks(d).zip(gy.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    for j in 0..d {
                        dxhat[j] = gyr[j] * g[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gxr[j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.value(*table).dims2()?;
                let gt = accumulate(grads, *table, v * d);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += gy[r * d + j];
                    }
                }
            }
            Op::CrossEntropyMasked {
                logits,
                targets,
                mask,
                probs,
            } => {
                let (r, c) = self.value(*logits).dims2()?;
                let scale = gy[0];
                let gl = accumulate(grads, *logits, r * c);
                for row in 0..r {
                    if !mask[row] {
                        continue;
                    }
                    for j in 0..c {
                        gl[row * c + j] += scale * probs[row * c + j];
                    }
                    gl[row * c + targets[row]] -= scale;
                }
            }
            Op::AttnScores { q, k, layout, scale } => {
                let HeadLayout { groups, seq, heads } = *layout;
                let (rows, d) = self.value(*q).dims2()?;
                let dh = d / heads;
                let qd = self.value(*q).data();
                let kd = self.value(*k).data();
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                for g in 0..groups {
                    for h in 0..heads {
                        for i in 0..seq {
                            let srow = &gy[((g * heads + h) * seq + i) * seq..][..seq];
                            let qi = (g * seq + i) * d + h * dh;
                            for (j, &s) in srow.iter().enumerate() {
                                if s == 0.0 {
                                    continue;
                                }
                                let w = scale * s;
                                let kj = (g * seq + j) * d + h * dh;
                                for t in 0..dh {
                                    gq[qi + t] += w * kd[kj + t];
                                    gk[kj + t] += w * qd[qi + t];
                                }
                            }
                        }
                    }
                }
                let acc_q = accumulate(grads, *q, rows * d);
                acc_q.iter_mut().zip(&gq).for_each(|(a, b)| *a += b);
                let acc_k = accumulate(grads, *k, rows * d);
                acc_k.iter_mut().zip(&gk).for_each(|(a, b)| *a += b);
            }
            Op::AttnMix { p, v, layout } => {
                let HeadLayout { groups, seq, heads } = *layout;
                let (rows, d) = self.value(*v).dims2()?;
                let dh = d / heads;
                let pd = self.value(*p).data();
                let vd = self.value(*v).data();
                let mut gp = vec![0.0; pd.len()];
                let mut gv = vec![0.0; rows * d];
                for g in 0..groups {
                    for h in 0..heads {
                        for i in 0..seq {
                            let prow = ((g * heads + h) * seq + i) * seq;
                            let oi = (g * seq + i) * d + h * dh;
                            let gyi = &gy[oi..oi + dh];
                            for j in 0..seq {
                                let vj = (g * seq + j) * d + h * dh;
                                let w = pd[prow + j];
                                let mut dot = 0.0;
                                for t in 0..dh {
                                    dot += gyi[t] * vd[vj + t];
                                    gv[vj + t] += w * gyi[t];
                                }
                                gp[prow + j] += dot;
                            }
                        }
                    }
                }
                let acc_p = accumulate(grads, *p, pd.len());
                acc_p.iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
                let acc_v = accumulate(grads, *v, rows * d);
                acc_v.iter_mut().zip(&gv).for_each(|(a, b)| *a += b);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let gx = accumulate(grads, *x, n);
                gx.iter_mut().for_each(|g| *g += gy[0]);
            }
            Op::WeightedSse { pred, target, weight } => {
                let pd = self.value(*pred).data();
                let gp = accumulate(grads, *pred, pd.len());
                for i in 0..pd.len() {
                    gp[i] += gy[0] * 2.0 * weight[i] * (pd[i] - target[i]);
                }
            }
        }
        Ok(())
    }
}
