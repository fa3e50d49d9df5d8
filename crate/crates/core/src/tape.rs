//! Define-by-run reverse-mode differentiation. A `Tape` is rebuilt for every
//! forward pass and owns all tensors it produces; `backward` replays the
//! recorded ops in reverse and accumulates gradients additively across
//! fan-out.
//!
//! Convolutions run as im2col + gemm. Parallel sections only ever write
//! disjoint output regions and keep every accumulation order fixed, so
//! results are identical for any worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gemm::{axpy, dot, matmul_nn, matmul_nt, matmul_tn_acc};
use crate::tensor::{Scalar, Tensor};

pub type TensorId = usize;

/// Batch-norm behaviour for one forward call. Train mode normalizes by batch
/// statistics and folds them into the running buffers; infer mode reads the
/// running buffers and treats them as constants.
pub enum BnMode<'a, T: Scalar> {
    Train {
        running_mean: &'a mut [T],
        running_var: &'a mut [T],
        momentum: T,
    },
    Infer {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

enum Op<T: Scalar> {
    Add { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { x: TensorId, factor: T, out: TensorId },
    Sum { x: TensorId, out: TensorId },
    Relu { x: TensorId, out: TensorId },
    Conv2d { x: TensorId, kernel: TensorId, bias: TensorId, out: TensorId, stride: (usize, usize), pad: (usize, usize) },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, out: TensorId, mean: Vec<T>, invstd: Vec<T>, train: bool },
    AvgPool2x2 { x: TensorId, out: TensorId },
    GlobalAvgPool { x: TensorId, out: TensorId },
    Linear { x: TensorId, weight: TensorId, bias: TensorId, out: TensorId },
    Softmax { x: TensorId, out: TensorId },
    SoftmaxXent { logits: TensorId, labels: Vec<usize>, out: TensorId, probs: Vec<T> },
    WeightedMeanRows { x: TensorId, weights: Vec<T>, out: TensorId },
    ConcatCols { a: TensorId, b: TensorId, out: TensorId },
    ConcatBatch { parts: Vec<TensorId>, out: TensorId },
    Crop2d { x: TensorId, out: TensorId, r0: usize, c0: usize },
    ZeroPad2d { x: TensorId, out: TensorId },
    IndexScalar { x: TensorId, index: usize, out: TensorId },
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    // Whether gradient is needed at each node (requires_grad or depends on one).
    needs: Vec<bool>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), needs: Vec::new(), backward_done: false }
    }

    /// Register a leaf that does not need a gradient (inputs, labels-as-data).
    pub fn constant(&mut self, mut t: Tensor<T>) -> TensorId {
        t.requires_grad = false;
        self.push_node(t)
    }

    /// Register a leaf that accumulates a gradient (parameters, probe inputs).
    pub fn variable(&mut self, mut t: Tensor<T>) -> TensorId {
        t.requires_grad = true;
        self.push_node(t)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id]
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        self.nodes[id].data()
    }

    /// Gradient of the last `backward` target w.r.t. node `id`, if one flowed.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn push_node(&mut self, t: Tensor<T>) -> TensorId {
        let id = self.nodes.len();
        self.needs.push(t.requires_grad);
        self.nodes.push(t);
        id
    }

    fn push_result(&mut self, t: Tensor<T>, inputs: &[TensorId]) -> TensorId {
        let needs = inputs.iter().any(|&i| self.needs[i]);
        let id = self.nodes.len();
        self.needs.push(needs);
        self.nodes.push(t);
        id
    }

    // ---- elementwise and reduction ops ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a].shape() != self.nodes[b].shape() {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.nodes[a].shape(),
                self.nodes[b].shape()
            )));
        }
        let data: Vec<T> = self.nodes[a]
            .data()
            .iter()
            .zip(self.nodes[b].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.nodes[a].shape().to_vec(), data)?;
        let out = self.push_result(t, &[a, b]);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a].shape() != self.nodes[b].shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                self.nodes[a].shape(),
                self.nodes[b].shape()
            )));
        }
        let data: Vec<T> = self.nodes[a]
            .data()
            .iter()
            .zip(self.nodes[b].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.nodes[a].shape().to_vec(), data)?;
        let out = self.push_result(t, &[a, b]);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: TensorId, factor: T) -> TensorId {
        let data: Vec<T> = self.nodes[x].data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(self.nodes[x].shape().to_vec(), data).expect("same shape");
        let out = self.push_result(t, &[x]);
        self.ops.push(Op::Scale { x, factor, out });
        out
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: T = self.nodes[x].data().iter().copied().sum();
        let out = self.push_result(Tensor::scalar(total), &[x]);
        self.ops.push(Op::Sum { x, out });
        out
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<T> = self.nodes[x]
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let t = Tensor::new(self.nodes[x].shape().to_vec(), data).expect("same shape");
        let out = self.push_result(t, &[x]);
        self.ops.push(Op::Relu { x, out });
        out
    }

    // ---- convolution ----

    /// Cross-correlation with zero padding: `x[N,C,H,W] * kernel[F,C,kh,kw] + bias[F]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<TensorId> {
        let (n, c, h, w) = self.nodes[x].dims4()?;
        let (f, kc, kh, kw) = self.nodes[kernel].dims4()?;
        if kc != c {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {c} channels, kernel expects {kc}"
            )));
        }
        if self.nodes[bias].shape() != [f] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: bias shape {:?} does not match {f} filters",
                self.nodes[bias].shape()
            )));
        }
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        if sh == 0 || sw == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (w + 2 * pw - kw) / sw + 1;

        let mut out = vec![T::zero(); n * f * ho * wo];
        {
            let xd = self.nodes[x].data();
            let kd = self.nodes[kernel].data();
            let bd = self.nodes[bias].data();
            if use_stencil3x3(sh, sw, kh, kw, ph, pw, ho, wo) {
                // Stencil convolution over pre-padded planes: the per-sample
                // working set lives in L1, so this is compute-bound. Small
                // planes go through the im2col path instead, where the GEMM
                // amortizes the loop overhead.
                out.par_chunks_mut(f * ho * wo)
                    .zip(xd.par_chunks(c * h * w))
                    .for_each(|(out_i, xi)| {
                        conv3x3_forward(xi, kd, bd, c, h, w, f, ph, pw, ho, wo, out_i);
                    });
            } else if use_plane_axpy(sh, sw, kh, kw, ph, pw) {
                out.par_chunks_mut(f * ho * wo)
                    .zip(xd.par_chunks(c * h * w))
                    .for_each(|(out_i, xi)| {
                        conv1x1_forward(xi, kd, bd, c, h * w, f, out_i);
                    });
            } else {
                let ckk = c * kh * kw;
                let mut col = vec![T::zero(); n * ho * wo * ckk];
                col.par_chunks_mut(ho * wo * ckk)
                    .zip(xd.par_chunks(c * h * w))
                    .for_each(|(cols, xi)| {
                        im2col_rows(xi, c, h, w, kh, kw, sh, sw, ph, pw, ho, wo, cols);
                    });
                let mut out_t = vec![T::zero(); n * ho * wo * f];
                matmul_nt(n * ho * wo, ckk, f, &col, kd, &mut out_t);
                out.par_chunks_mut(f * ho * wo).enumerate().for_each(|(i, out_i)| {
                    let rows = &out_t[i * ho * wo * f..(i + 1) * ho * wo * f];
                    for (pos, row) in rows.chunks(f).enumerate() {
                        for (fi, &v) in row.iter().enumerate() {
                            out_i[fi * ho * wo + pos] = v + bd[fi];
                        }
                    }
                });
            }
        }
        let t = Tensor::new(vec![n, f, ho, wo], out)?;
        let out = self.push_result(t, &[x, kernel, bias]);
        self.ops.push(Op::Conv2d { x, kernel, bias, out, stride, pad });
        Ok(out)
    }

    // ---- batch norm ----

    pub fn batchnorm2d(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<TensorId> {
        if eps <= T::zero() {
            return Err(Error::InvalidArgument("batchnorm2d: epsilon must be > 0".into()));
        }
        let (n, c, h, w) = self.nodes[x].dims4()?;
        if self.nodes[gamma].shape() != [c] || self.nodes[beta].shape() != [c] {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm2d: gamma/beta must have shape [{c}]"
            )));
        }
        let plane = h * w;
        let m = T::from_usize(n * plane);

        let (mean, invstd, train) = match mode {
            BnMode::Train { running_mean, running_var, momentum } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::ShapeMismatch(
                        "batchnorm2d: running stats length != channels".into(),
                    ));
                }
                let xd = self.nodes[x].data();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut s = T::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for &v in &xd[base..base + plane] {
                            s += v;
                        }
                    }
                    mean[ci] = s / m;
                }
                for ci in 0..c {
                    let mu = mean[ci];
                    let mut s = T::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for &v in &xd[base..base + plane] {
                            let d = v - mu;
                            s += d * d;
                        }
                    }
                    var[ci] = s / m;
                }
                let one = T::one();
                for ci in 0..c {
                    running_mean[ci] = (one - momentum) * running_mean[ci] + momentum * mean[ci];
                    running_var[ci] = (one - momentum) * running_var[ci] + momentum * var[ci];
                }
                let invstd: Vec<T> = var.iter().map(|&v| one / (v + eps).sqrt()).collect();
                (mean, invstd, true)
            }
            BnMode::Infer { running_mean, running_var } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::ShapeMismatch(
                        "batchnorm2d: running stats length != channels".into(),
                    ));
                }
                let invstd: Vec<T> =
                    running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (running_mean.to_vec(), invstd, false)
            }
        };

        let mut out = vec![T::zero(); n * c * plane];
        {
            let xd = self.nodes[x].data();
            let gd = self.nodes[gamma].data();
            let bd = self.nodes[beta].data();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let scale = gd[ci] * invstd[ci];
                    let shift = bd[ci] - mean[ci] * scale;
                    for (o, &v) in out[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                        *o = v * scale + shift;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        let out = self.push_result(t, &[x, gamma, beta]);
        self.ops.push(Op::BatchNorm { x, gamma, beta, out, mean, invstd, train });
        Ok(out)
    }

    // ---- pooling ----

    /// 2x2 average pooling; odd trailing rows/columns are replicated before
    /// pooling, so output dims are `ceil(dim/2)` and constant inputs stay
    /// constant.
    pub fn avgpool2x2(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.nodes[x].dims4()?;
        let ho = h.div_ceil(2);
        let wo = w.div_ceil(2);
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); n * c * ho * wo];
        let xd = self.nodes[x].data();
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for i in 0..ho {
                let r0 = 2 * i;
                let r1 = (2 * i + 1).min(h - 1);
                for j in 0..wo {
                    let c0 = 2 * j;
                    let c1 = (2 * j + 1).min(w - 1);
                    dst[i * wo + j] = (src[r0 * w + c0]
                        + src[r0 * w + c1]
                        + src[r1 * w + c0]
                        + src[r1 * w + c1])
                        * quarter;
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        let out = self.push_result(t, &[x]);
        self.ops.push(Op::AvgPool2x2 { x, out });
        Ok(out)
    }

    /// `[N,C,H,W] -> [N,C]` mean over the spatial plane.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.nodes[x].dims4()?;
        let plane = T::from_usize(h * w);
        let xd = self.nodes[x].data();
        let mut out = vec![T::zero(); n * c];
        for nc in 0..n * c {
            let s: T = xd[nc * h * w..(nc + 1) * h * w].iter().copied().sum();
            out[nc] = s / plane;
        }
        let t = Tensor::new(vec![n, c], out)?;
        let out = self.push_result(t, &[x]);
        self.ops.push(Op::GlobalAvgPool { x, out });
        Ok(out)
    }

    // ---- linear / softmax ----

    /// `x[N,D] * weight[K,D]^T + bias[K]`.
    pub fn linear(&mut self, x: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, d) = self.nodes[x].dims2()?;
        let (k, dw) = self.nodes[weight].dims2()?;
        if dw != d {
            return Err(Error::ShapeMismatch(format!(
                "linear: input dim {d} vs weight dim {dw}"
            )));
        }
        if self.nodes[bias].shape() != [k] {
            return Err(Error::ShapeMismatch(format!("linear: bias must have shape [{k}]")));
        }
        let mut out = vec![T::zero(); n * k];
        matmul_nt(n, d, k, self.nodes[x].data(), self.nodes[weight].data(), &mut out);
        let bd = self.nodes[bias].data();
        for row in out.chunks_mut(k) {
            for (o, &b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        let t = Tensor::new(vec![n, k], out)?;
        let out = self.push_result(t, &[x, weight, bias]);
        self.ops.push(Op::Linear { x, weight, bias, out });
        Ok(out)
    }

    /// Row-wise softmax of `[N,K]`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, k) = self.nodes[x].dims2()?;
        let mut out = vec![T::zero(); n * k];
        for (orow, xrow) in out.chunks_mut(k).zip(self.nodes[x].data().chunks(k)) {
            softmax_row(xrow, orow);
        }
        let t = Tensor::new(vec![n, k], out)?;
        let out = self.push_result(t, &[x]);
        self.ops.push(Op::Softmax { x, out });
        Ok(out)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (n, k) = self.nodes[logits].dims2()?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "softmax_cross_entropy: {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for ((xrow, prow), &label) in
            self.nodes[logits].data().chunks(k).zip(probs.chunks_mut(k)).zip(labels)
        {
            softmax_row(xrow, prow);
            // -log p = logsumexp(x - max) - (x[label] - max)
            let max = xrow.iter().copied().fold(T::neg_infinity(), T::max);
            let lse: T = xrow.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - (xrow[label] - max);
        }
        loss /= T::from_usize(n);
        let out = self.push_result(Tensor::scalar(loss), &[logits]);
        self.ops.push(Op::SoftmaxXent { logits, labels: labels.to_vec(), out, probs });
        Ok(out)
    }

    // ---- aggregation / shape ops ----

    /// Weighted mean over the rows of `x[N,D]` with fixed (non-differentiated)
    /// weights: `sum_i w_i x_i / sum_i w_i`, shape `[1,D]`.
    pub fn weighted_mean_rows(&mut self, x: TensorId, weights: &[T]) -> Result<TensorId> {
        let (n, d) = self.nodes[x].dims2()?;
        if weights.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "weighted_mean_rows: {n} rows but {} weights",
                weights.len()
            )));
        }
        let wsum: T = weights.iter().copied().sum();
        if wsum <= T::zero() {
            return Err(Error::InvalidArgument("weighted_mean_rows: weights must sum > 0".into()));
        }
        let mut out = vec![T::zero(); d];
        for (row, &wi) in self.nodes[x].data().chunks(d).zip(weights) {
            axpy(wi / wsum, row, &mut out);
        }
        let t = Tensor::new(vec![1, d], out)?;
        let out = self.push_result(t, &[x]);
        let norm: Vec<T> = weights.iter().map(|&w| w / wsum).collect();
        self.ops.push(Op::WeightedMeanRows { x, weights: norm, out });
        Ok(out)
    }

    /// `[N,Da] ++ [N,Db] -> [N,Da+Db]` along the feature axis.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, da) = self.nodes[a].dims2()?;
        let (nb, db) = self.nodes[b].dims2()?;
        if na != nb {
            return Err(Error::ShapeMismatch(format!("concat_cols: {na} vs {nb} rows")));
        }
        let mut out = Vec::with_capacity(na * (da + db));
        for i in 0..na {
            out.extend_from_slice(&self.nodes[a].data()[i * da..(i + 1) * da]);
            out.extend_from_slice(&self.nodes[b].data()[i * db..(i + 1) * db]);
        }
        let t = Tensor::new(vec![na, da + db], out)?;
        let out = self.push_result(t, &[a, b]);
        self.ops.push(Op::ConcatCols { a, b, out });
        Ok(out)
    }

    /// Stack along axis 0; all parts must agree on trailing dims.
    pub fn concat_batch(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_batch: no parts".into()));
        }
        let tail = self.nodes[parts[0]].shape()[1..].to_vec();
        let mut n_total = 0usize;
        for &p in parts {
            if self.nodes[p].shape()[1..] != tail[..] {
                return Err(Error::ShapeMismatch("concat_batch: trailing dims differ".into()));
            }
            n_total += self.nodes[p].shape()[0];
        }
        let mut data = Vec::with_capacity(n_total * tail.iter().product::<usize>());
        for &p in parts {
            data.extend_from_slice(self.nodes[p].data());
        }
        let mut shape = vec![n_total];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(shape, data)?;
        let out = self.push_result(t, parts);
        self.ops.push(Op::ConcatBatch { parts: parts.to_vec(), out });
        Ok(out)
    }

    /// Spatial crop of `[N,C,H,W]` starting at `(r0,c0)`.
    pub fn crop2d(&mut self, x: TensorId, r0: usize, c0: usize, h: usize, w: usize) -> Result<TensorId> {
        let (n, c, hx, wx) = self.nodes[x].dims4()?;
        if r0 + h > hx || c0 + w > wx {
            return Err(Error::ShapeMismatch(format!(
                "crop2d: window {h}x{w} at ({r0},{c0}) exceeds {hx}x{wx}"
            )));
        }
        let xd = self.nodes[x].data();
        let mut out = vec![T::zero(); n * c * h * w];
        for nc in 0..n * c {
            let src = &xd[nc * hx * wx..(nc + 1) * hx * wx];
            let dst = &mut out[nc * h * w..(nc + 1) * h * w];
            for i in 0..h {
                let srow = &src[(r0 + i) * wx + c0..(r0 + i) * wx + c0 + w];
                dst[i * w..(i + 1) * w].copy_from_slice(srow);
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        let out = self.push_result(t, &[x]);
        self.ops.push(Op::Crop2d { x, out, r0, c0 });
        Ok(out)
    }

    /// Zero-pad the bottom/right of `[N,C,H,W]`.
    pub fn zero_pad2d(&mut self, x: TensorId, bottom: usize, right: usize) -> Result<TensorId> {
        let (n, c, h, w) = self.nodes[x].dims4()?;
        let (ho, wo) = (h + bottom, w + right);
        let xd = self.nodes[x].data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for i in 0..h {
                dst[i * wo..i * wo + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        let out = self.push_result(t, &[x]);
        self.ops.push(Op::ZeroPad2d { x, out });
        Ok(out)
    }

    /// Single element by flat index, as a scalar node.
    pub fn index_scalar(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        if index >= self.nodes[x].numel() {
            return Err(Error::InvalidArgument(format!(
                "index_scalar: index {index} out of {}",
                self.nodes[x].numel()
            )));
        }
        let v = self.nodes[x].data()[index];
        let out = self.push_result(Tensor::scalar(v), &[x]);
        self.ops.push(Op::IndexScalar { x, index, out });
        Ok(out)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Populates `grad` on every node the
    /// loss depends on (subject to `requires_grad` reachability pruning).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::InvalidArgument(
                "backward called twice without tape reset".into(),
            ));
        }
        if self.nodes[loss].numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss].shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![T::one()]);

        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                node.grad = Some(g);
            }
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], id: TensorId, delta: &[T]) {
        match &mut grads[id] {
            Some(g) => axpy(T::one(), delta, g),
            None => grads[id] = Some(delta.to_vec()),
        }
    }

    /// Move-in variant for freshly computed gradients.
    fn accumulate_owned(grads: &mut [Option<Vec<T>>], id: TensorId, delta: Vec<T>) {
        match &mut grads[id] {
            Some(g) => axpy(T::one(), &delta, g),
            None => grads[id] = Some(delta),
        }
    }

    fn backward_op(&self, idx: usize, grads: &mut [Option<Vec<T>>]) {
        // Each node has exactly one producing op and ops run in reverse
        // order, so the producer may take the output gradient by move.
        macro_rules! upstream {
            ($out:expr) => {
                match grads[$out].take() {
                    Some(g) => g,
                    None => return,
                }
            };
        }
        match &self.ops[idx] {
            Op::Add { a, b, out } => {
                let dy = upstream!(*out);
                if self.needs[*a] && self.needs[*b] {
                    Self::accumulate(grads, *a, &dy);
                    Self::accumulate_owned(grads, *b, dy);
                } else if self.needs[*a] {
                    Self::accumulate_owned(grads, *a, dy);
                } else if self.needs[*b] {
                    Self::accumulate_owned(grads, *b, dy);
                }
            }
            Op::Mul { a, b, out } => {
                let dy = upstream!(*out);
                if self.needs[*a] {
                    let da: Vec<T> =
                        dy.iter().zip(self.nodes[*b].data()).map(|(&g, &v)| g * v).collect();
                    Self::accumulate_owned(grads, *a, da);
                }
                if self.needs[*b] {
                    let db: Vec<T> =
                        dy.iter().zip(self.nodes[*a].data()).map(|(&g, &v)| g * v).collect();
                    Self::accumulate_owned(grads, *b, db);
                }
            }
            Op::Scale { x, factor, out } => {
                if !self.needs[*x] {
                    return;
                }
                let dy = upstream!(*out);
                let dx: Vec<T> = dy.iter().map(|&g| g * *factor).collect();
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::Sum { x, out } => {
                if !self.needs[*x] {
                    return;
                }
                let dy = upstream!(*out)[0];
                let dx = vec![dy; self.nodes[*x].numel()];
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::Relu { x, out } => {
                if !self.needs[*x] {
                    return;
                }
                let dy = upstream!(*out);
                // Subgradient at 0 is taken as 0.
                let dx: Vec<T> = dy
                    .iter()
                    .zip(self.nodes[*x].data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::Conv2d { x, kernel, bias, out, stride, pad } => {
                let dy = upstream!(*out);
                self.backward_conv2d(*x, *kernel, *bias, *out, *stride, *pad, &dy, grads);
            }
            Op::BatchNorm { x, gamma, beta, out, mean, invstd, train } => {
                let dy = upstream!(*out);
                self.backward_batchnorm(*x, *gamma, *beta, mean, invstd, *train, &dy, grads);
            }
            Op::AvgPool2x2 { x, out } => {
                if !self.needs[*x] {
                    return;
                }
                let dy = upstream!(*out);
                let (n, c, h, w) = self.nodes[*x].dims4().expect("validated");
                let (_, _, ho, wo) = self.nodes[*out].dims4().expect("validated");
                let quarter = T::from_f64(0.25);
                let mut dx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let dsrc = &dy[nc * ho * wo..(nc + 1) * ho * wo];
                    let ddst = &mut dx[nc * h * w..(nc + 1) * h * w];
                    for i in 0..ho {
                        let r0 = 2 * i;
                        let r1 = (2 * i + 1).min(h - 1);
                        for j in 0..wo {
                            let c0 = 2 * j;
                            let c1 = (2 * j + 1).min(w - 1);
                            let g = dsrc[i * wo + j] * quarter;
                            ddst[r0 * w + c0] += g;
                            ddst[r0 * w + c1] += g;
                            ddst[r1 * w + c0] += g;
                            ddst[r1 * w + c1] += g;
                        }
                    }
                }
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::GlobalAvgPool { x, out } => {
                if !self.needs[*x] {
                    return;
                }
                let dy = upstream!(*out);
                let (n, c, h, w) = self.nodes[*x].dims4().expect("validated");
                let inv = T::one() / T::from_usize(h * w);
                let mut dx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let g = dy[nc] * inv;
                    for v in &mut dx[nc * h * w..(nc + 1) * h * w] {
                        *v = g;
                    }
                }
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::Linear { x, weight, bias, out } => {
                let dy = upstream!(*out);
                let (n, d) = self.nodes[*x].dims2().expect("validated");
                let (k, _) = self.nodes[*weight].dims2().expect("validated");
                if self.needs[*x] {
                    let mut dx = vec![T::zero(); n * d];
                    matmul_nn(n, k, d, &dy, self.nodes[*weight].data(), &mut dx);
                    Self::accumulate_owned(grads, *x, dx);
                }
                if self.needs[*weight] {
                    let mut dw = vec![T::zero(); k * d];
                    matmul_tn_acc(n, k, d, &dy, self.nodes[*x].data(), &mut dw);
                    Self::accumulate_owned(grads, *weight, dw);
                }
                if self.needs[*bias] {
                    let mut db = vec![T::zero(); k];
                    for row in dy.chunks(k) {
                        axpy(T::one(), row, &mut db);
                    }
                    Self::accumulate_owned(grads, *bias, db);
                }
            }
            Op::Softmax { x, out } => {
                if !self.needs[*x] {
                    return;
                }
                let dy = upstream!(*out);
                let (n, k) = self.nodes[*x].dims2().expect("validated");
                let p = self.nodes[*out].data();
                let mut dx = vec![T::zero(); n * k];
                for i in 0..n {
                    let prow = &p[i * k..(i + 1) * k];
                    let dyrow = &dy[i * k..(i + 1) * k];
                    let inner = dot(dyrow, prow);
                    for j in 0..k {
                        dx[i * k + j] = prow[j] * (dyrow[j] - inner);
                    }
                }
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::SoftmaxXent { logits, labels, out, probs } => {
                if !self.needs[*logits] {
                    return;
                }
                let dy = upstream!(*out)[0];
                let (n, k) = self.nodes[*logits].dims2().expect("validated");
                let scale = dy / T::from_usize(n);
                let mut dx = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    dx[i * k + label] -= T::one();
                }
                for v in &mut dx {
                    *v *= scale;
                }
                Self::accumulate_owned(grads, *logits, dx);
            }
            Op::WeightedMeanRows { x, weights, out } => {
                if !self.needs[*x] {
                    return;
                }
                let dy = upstream!(*out);
                let (n, d) = self.nodes[*x].dims2().expect("validated");
                let mut dx = vec![T::zero(); n * d];
                for i in 0..n {
                    axpy(weights[i], &dy, &mut dx[i * d..(i + 1) * d]);
                }
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::ConcatCols { a, b, out } => {
                let dy = upstream!(*out);
                let (n, da) = self.nodes[*a].dims2().expect("validated");
                let (_, db) = self.nodes[*b].dims2().expect("validated");
                if self.needs[*a] {
                    let mut dxa = vec![T::zero(); n * da];
                    for i in 0..n {
                        dxa[i * da..(i + 1) * da]
                            .copy_from_slice(&dy[i * (da + db)..i * (da + db) + da]);
                    }
                    Self::accumulate_owned(grads, *a, dxa);
                }
                if self.needs[*b] {
                    let mut dxb = vec![T::zero(); n * db];
                    for i in 0..n {
                        dxb[i * db..(i + 1) * db]
                            .copy_from_slice(&dy[i * (da + db) + da..(i + 1) * (da + db)]);
                    }
                    Self::accumulate_owned(grads, *b, dxb);
                }
            }
            Op::ConcatBatch { parts, out } => {
                let dy = upstream!(*out);
                let mut offset = 0usize;
                for &p in parts {
                    let len = self.nodes[p].numel();
                    if self.needs[p] {
                        Self::accumulate(grads, p, &dy[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Crop2d { x, out, r0, c0 } => {
                if !self.needs[*x] {
                    return;
                }
                let dy = upstream!(*out);
                let (n, c, hx, wx) = self.nodes[*x].dims4().expect("validated");
                let (_, _, h, w) = self.nodes[*out].dims4().expect("validated");
                let mut dx = vec![T::zero(); n * c * hx * wx];
                for nc in 0..n * c {
                    let dsrc = &dy[nc * h * w..(nc + 1) * h * w];
                    let ddst = &mut dx[nc * hx * wx..(nc + 1) * hx * wx];
                    for i in 0..h {
                        let drow = &mut ddst[(r0 + i) * wx + c0..(r0 + i) * wx + c0 + w];
                        axpy(T::one(), &dsrc[i * w..(i + 1) * w], drow);
                    }
                }
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::ZeroPad2d { x, out } => {
                if !self.needs[*x] {
                    return;
                }
                let dy = upstream!(*out);
                let (n, c, h, w) = self.nodes[*x].dims4().expect("validated");
                let (_, _, ho, wo) = self.nodes[*out].dims4().expect("validated");
                let mut dx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let dsrc = &dy[nc * ho * wo..(nc + 1) * ho * wo];
                    let ddst = &mut dx[nc * h * w..(nc + 1) * h * w];
                    for i in 0..h {
                        ddst[i * w..(i + 1) * w].copy_from_slice(&dsrc[i * wo..i * wo + w]);
                    }
                }
                Self::accumulate_owned(grads, *x, dx);
            }
            Op::IndexScalar { x, index, out } => {
                if !self.needs[*x] {
                    return;
                }
                let dy = upstream!(*out)[0];
                let mut dx = vec![T::zero(); self.nodes[*x].numel()];
                dx[*index] = dy;
                Self::accumulate_owned(grads, *x, dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &self,
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
        out: TensorId,
        stride: (usize, usize),
        pad: (usize, usize),
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (n, c, h, w) = self.nodes[x].dims4().expect("validated");
        let (f, _, kh, kw) = self.nodes[kernel].dims4().expect("validated");
        let (_, _, ho, wo) = self.nodes[out].dims4().expect("validated");
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        let xd = self.nodes[x].data();

        if self.needs[bias] {
            let mut db = vec![T::zero(); f];
            for ni in 0..n {
                for fi in 0..f {
                    let base = (ni * f + fi) * ho * wo;
                    db[fi] += dy[base..base + ho * wo].iter().copied().sum();
                }
            }
            Self::accumulate_owned(grads, bias, db);
        }
        if !self.needs[kernel] && !self.needs[x] {
            return;
        }

        let fast3 = use_stencil3x3(sh, sw, kh, kw, ph, pw, ho, wo);
        let fast1 = use_plane_axpy(sh, sw, kh, kw, ph, pw);
        if fast3 || fast1 {
            if self.needs[kernel] {
                let partials: Vec<Vec<T>> = xd
                    .par_chunks(c * h * w)
                    .zip(dy.par_chunks(f * ho * wo))
                    .map(|(xi, dyi)| {
                        let mut dk = vec![T::zero(); f * c * kh * kw];
                        if fast3 {
                            conv3x3_dk(xi, dyi, c, h, w, f, ph, pw, ho, wo, &mut dk);
                        } else {
                            conv1x1_dk(xi, dyi, c, h * w, f, &mut dk);
                        }
                        dk
                    })
                    .collect();
                let mut dk = vec![T::zero(); f * c * kh * kw];
                for part in &partials {
                    axpy(T::one(), part, &mut dk);
                }
                Self::accumulate_owned(grads, kernel, dk);
            }
            if self.needs[x] {
                let kd = self.nodes[kernel].data();
                let mut dx = vec![T::zero(); n * c * h * w];
                dx.par_chunks_mut(c * h * w)
                    .zip(dy.par_chunks(f * ho * wo))
                    .for_each(|(dxi, dyi)| {
                        if fast3 {
                            conv3x3_dx(dyi, kd, c, h, w, f, ph, pw, ho, wo, dxi);
                        } else {
                            conv1x1_dx(dyi, kd, c, h * w, f, dxi);
                        }
                    });
                Self::accumulate_owned(grads, x, dx);
            }
            return;
        }

        // Strided path: im2col in row-per-position layout.
        let ckk = c * kh * kw;
        let positions = n * ho * wo;
        let mut dy_t = vec![T::zero(); positions * f];
        dy_t.par_chunks_mut(ho * wo * f)
            .zip(dy.par_chunks(f * ho * wo))
            .for_each(|(rows, dyi)| {
                for (pos, row) in rows.chunks_mut(f).enumerate() {
                    for (fi, v) in row.iter_mut().enumerate() {
                        *v = dyi[fi * ho * wo + pos];
                    }
                }
            });

        if self.needs[kernel] {
            let mut col = vec![T::zero(); positions * ckk];
            col.par_chunks_mut(ho * wo * ckk)
                .zip(xd.par_chunks(c * h * w))
                .for_each(|(cols, xi)| {
                    im2col_rows(xi, c, h, w, kh, kw, sh, sw, ph, pw, ho, wo, cols);
                });
            let mut dk = vec![T::zero(); f * ckk];
            matmul_tn_acc(positions, f, ckk, &dy_t, &col, &mut dk);
            Self::accumulate_owned(grads, kernel, dk);
        }

        if self.needs[x] {
            let kd = self.nodes[kernel].data();
            let mut dcol = vec![T::zero(); positions * ckk];
            matmul_nn(positions, f, ckk, &dy_t, kd, &mut dcol);
            let mut dx = vec![T::zero(); n * c * h * w];
            dx.par_chunks_mut(c * h * w)
                .zip(dcol.par_chunks(ho * wo * ckk))
                .for_each(|(dxi, cols)| {
                    col2im_rows(cols, c, h, w, kh, kw, sh, sw, ph, pw, ho, wo, dxi);
                });
            Self::accumulate_owned(grads, x, dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_batchnorm(
        &self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[T],
        invstd: &[T],
        train: bool,
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (n, c, h, w) = self.nodes[x].dims4().expect("validated");
        let plane = h * w;
        let m = T::from_usize(n * plane);
        let xd = self.nodes[x].data();
        let gd = self.nodes[gamma].data();

        // Per-channel sums of dy and dy*xhat.
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let mu = mean[ci];
                let is = invstd[ci];
                let mut s = T::zero();
                let mut sx = T::zero();
                for (&g, &v) in dy[base..base + plane].iter().zip(&xd[base..base + plane]) {
                    s += g;
                    sx += g * (v - mu) * is;
                }
                sum_dy[ci] += s;
                sum_dy_xhat[ci] += sx;
            }
        }

        if self.needs[gamma] {
            Self::accumulate(grads, gamma, &sum_dy_xhat);
        }
        if self.needs[beta] {
            Self::accumulate(grads, beta, &sum_dy);
        }
        if self.needs[x] {
            let mut dx = vec![T::zero(); n * c * plane];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let mu = mean[ci];
                    let is = invstd[ci];
                    let scale = gd[ci] * is;
                    if train {
                        let mean_dy = sum_dy[ci] / m;
                        let mean_dy_xhat = sum_dy_xhat[ci] / m;
                        for ((o, &g), &v) in dx[base..base + plane]
                            .iter_mut()
                            .zip(&dy[base..base + plane])
                            .zip(&xd[base..base + plane])
                        {
                            let xhat = (v - mu) * is;
                            *o = scale * (g - mean_dy - xhat * mean_dy_xhat);
                        }
                    } else {
                        for (o, &g) in dx[base..base + plane].iter_mut().zip(&dy[base..base + plane])
                        {
                            *o = scale * g;
                        }
                    }
                }
            }
            Self::accumulate_owned(grads, x, dx);
        }
    }
}

fn softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Zero-pad every plane of one sample by `(ph, pw)` on each side.
fn pad_planes<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<T> {
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let mut xp = vec![T::zero(); c * hp * wp];
    for ci in 0..c {
        for i in 0..h {
            let src = &x[(ci * h + i) * w..(ci * h + i + 1) * w];
            let dst_base = ci * hp * wp + (i + ph) * wp + pw;
            xp[dst_base..dst_base + w].copy_from_slice(src);
        }
    }
    xp
}

/// `out[oi][oj] += sum_{ki,kj} w9[ki*3+kj] * xp[oi+ki][oj+kj]` over one
/// padded plane with row stride `wp`. The inner loop is a plain 9-tap
/// stencil, which vectorizes cleanly.
fn stencil3x3_add<T: Scalar>(xp: &[T], wp: usize, w9: &[T; 9], out: &mut [T], ho: usize, wo: usize) {
    for oi in 0..ho {
        let r0 = &xp[oi * wp..oi * wp + wo + 2];
        let r1 = &xp[(oi + 1) * wp..(oi + 1) * wp + wo + 2];
        let r2 = &xp[(oi + 2) * wp..(oi + 2) * wp + wo + 2];
        let dst = &mut out[oi * wo..(oi + 1) * wo];
        for j in 0..wo {
            dst[j] += w9[0] * r0[j]
                + w9[1] * r0[j + 1]
                + w9[2] * r0[j + 2]
                + w9[3] * r1[j]
                + w9[4] * r1[j + 1]
                + w9[5] * r1[j + 2]
                + w9[6] * r2[j]
                + w9[7] * r2[j + 1]
                + w9[8] * r2[j + 2];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let xp = pad_planes(x, c, h, w, ph, pw);
    let wp = w + 2 * pw;
    let hp = h + 2 * ph;
    for fi in 0..f {
        let oplane = &mut out[fi * ho * wo..(fi + 1) * ho * wo];
        let b = bias[fi];
        for v in oplane.iter_mut() {
            *v = b;
        }
        for ci in 0..c {
            let base = (fi * c + ci) * 9;
            let mut w9 = [T::zero(); 9];
            w9.copy_from_slice(&kernel[base..base + 9]);
            stencil3x3_add(&xp[ci * hp * wp..(ci + 1) * hp * wp], wp, &w9, oplane, ho, wo);
        }
    }
}

/// dx for the 3x3 stride-1 case: a flipped-kernel stencil over dy padded by
/// `(2-ph, 2-pw)` (requires pad <= 2, which the dispatch guarantees).
#[allow(clippy::too_many_arguments)]
fn conv3x3_dx<T: Scalar>(
    dy: &[T],
    kernel: &[T],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let (mh, mw) = (2 - ph, 2 - pw);
    let dyp = pad_planes(dy, f, ho, wo, mh, mw);
    let wp = wo + 2 * mw;
    let hp = ho + 2 * mh;
    for ci in 0..c {
        let dplane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for fi in 0..f {
            let base = (fi * c + ci) * 9;
            let mut w9 = [T::zero(); 9];
            for ki in 0..3 {
                for kj in 0..3 {
                    w9[ki * 3 + kj] = kernel[base + (2 - ki) * 3 + (2 - kj)];
                }
            }
            stencil3x3_add(&dyp[fi * hp * wp..(fi + 1) * hp * wp], wp, &w9, dplane, h, w);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_dk<T: Scalar>(
    x: &[T],
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    dk: &mut [T],
) {
    let xp = pad_planes(x, c, h, w, ph, pw);
    let wp = w + 2 * pw;
    let hp = h + 2 * ph;
    for fi in 0..f {
        let dyplane = &dy[fi * ho * wo..(fi + 1) * ho * wo];
        for ci in 0..c {
            let xplane = &xp[ci * hp * wp..(ci + 1) * hp * wp];
            let mut acc = [T::zero(); 9];
            for oi in 0..ho {
                let dyrow = &dyplane[oi * wo..(oi + 1) * wo];
                for ki in 0..3 {
                    let xrow = &xplane[(oi + ki) * wp..(oi + ki) * wp + wo + 2];
                    acc[ki * 3] += dot(dyrow, &xrow[0..wo]);
                    acc[ki * 3 + 1] += dot(dyrow, &xrow[1..wo + 1]);
                    acc[ki * 3 + 2] += dot(dyrow, &xrow[2..wo + 2]);
                }
            }
            dk[(fi * c + ci) * 9..(fi * c + ci + 1) * 9].copy_from_slice(&acc);
        }
    }
}

fn conv1x1_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    c: usize,
    plane: usize,
    f: usize,
    out: &mut [T],
) {
    for fi in 0..f {
        let oplane = &mut out[fi * plane..(fi + 1) * plane];
        let b = bias[fi];
        for v in oplane.iter_mut() {
            *v = b;
        }
        for ci in 0..c {
            axpy(kernel[fi * c + ci], &x[ci * plane..(ci + 1) * plane], oplane);
        }
    }
}

fn conv1x1_dx<T: Scalar>(dy: &[T], kernel: &[T], c: usize, plane: usize, f: usize, dx: &mut [T]) {
    for ci in 0..c {
        let dplane = &mut dx[ci * plane..(ci + 1) * plane];
        for fi in 0..f {
            axpy(kernel[fi * c + ci], &dy[fi * plane..(fi + 1) * plane], dplane);
        }
    }
}

fn conv1x1_dk<T: Scalar>(x: &[T], dy: &[T], c: usize, plane: usize, f: usize, dk: &mut [T]) {
    for fi in 0..f {
        let dyplane = &dy[fi * plane..(fi + 1) * plane];
        for ci in 0..c {
            dk[fi * c + ci] = dot(dyplane, &x[ci * plane..(ci + 1) * plane]);
        }
    }
}

/// Stencil path pays off only when the output plane is big enough to
/// amortize per-row setup; small planes go through the GEMM path.
#[inline]
fn use_stencil3x3(sh: usize, sw: usize, kh: usize, kw: usize, ph: usize, pw: usize, ho: usize, wo: usize) -> bool {
    sh == 1 && sw == 1 && kh == 3 && kw == 3 && ph <= 2 && pw <= 2 && ho * wo >= 100
}

#[inline]
fn use_plane_axpy(sh: usize, sw: usize, kh: usize, kw: usize, ph: usize, pw: usize) -> bool {
    sh == 1 && sw == 1 && kh == 1 && kw == 1 && ph == 0 && pw == 0
}

/// im2col with one row per output position: `col[pos][c*kh*kw]` for one
/// sample. Rows are contiguous, so the GEMM reads them sequentially and the
/// filter matrix stays cached.
#[allow(clippy::too_many_arguments)]
fn im2col_rows<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let ckk = c * kh * kw;
    for oi in 0..ho {
        for oj in 0..wo {
            let row = &mut col[(oi * wo + oj) * ckk..(oi * wo + oj + 1) * ckk];
            let mut idx = 0;
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for ki in 0..kh {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        idx += kw;
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    let jj0 = (oj * sw) as isize - pw as isize;
                    for kj in 0..kw {
                        let jj = jj0 + kj as isize;
                        row[idx] = if jj >= 0 && jj < w as isize {
                            src[jj as usize]
                        } else {
                            T::zero()
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add of the row-layout column gradient back onto one sample.
#[allow(clippy::too_many_arguments)]
fn col2im_rows<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let ckk = c * kh * kw;
    for oi in 0..ho {
        for oj in 0..wo {
            let row = &col[(oi * wo + oj) * ckk..(oi * wo + oj + 1) * ckk];
            let mut idx = 0;
            for ci in 0..c {
                let plane = &mut x[ci * h * w..(ci + 1) * h * w];
                for ki in 0..kh {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        idx += kw;
                        continue;
                    }
                    let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    let jj0 = (oj * sw) as isize - pw as isize;
                    for kj in 0..kw {
                        let jj = jj0 + kj as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Central finite differences of a scalar-valued function, one element at a
/// time: `(f(x + h e_i) - f(x - h e_i)) / 2h`. The test oracle for every
/// backward rule; run it at `f64`.
pub fn finite_diff_grad<T: Scalar>(
    f: &mut dyn FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: T,
) -> Tensor<T> {
    assert!(h > T::zero(), "finite_diff_grad: h must be > 0");
    let mut grad = vec![T::zero(); x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (h + h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor4(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(tensor4(1, 1, 3, 3, vec![1.0; 9]));
        let k = tape.constant(tensor4(1, 1, 1, 1, vec![1.0]));
        let b = tape.constant(Tensor::from_vec(vec![0.0]));
        let y = tape.conv2d(x, k, b, (1, 1), (0, 0)).unwrap();
        assert_eq!(tape.tensor(y).shape(), &[1, 1, 3, 3]);
        assert_eq!(tape.data(y), &[1.0f32; 9]);
    }

    #[test]
    fn conv2d_5x5_stride3_pad2_output_size() {
        // floor((256 + 4 - 5)/3) + 1 = 86
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(tensor4(1, 1, 256, 256, vec![0.5; 256 * 256]));
        let k = tape.constant(tensor4(1, 1, 5, 5, vec![0.1; 25]));
        let b = tape.constant(Tensor::from_vec(vec![0.0]));
        let y = tape.conv2d(x, k, b, (3, 3), (2, 2)).unwrap();
        assert_eq!(tape.tensor(y).shape(), &[1, 1, 86, 86]);
    }

    #[test]
    fn conv2d_direct_summation_example() {
        // [[1,2],[3,4]] * [[1,0],[0,1]] -> 1*1 + 4*1 = 5
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(tensor4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(tensor4(1, 1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(Tensor::from_vec(vec![0.0]));
        let y = tape.conv2d(x, k, b, (1, 1), (0, 0)).unwrap();
        assert_eq!(tape.tensor(y).shape(), &[1, 1, 1, 1]);
        assert!((tape.data(y)[0] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn conv2d_channel_mismatch_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(tensor4(1, 2, 3, 3, vec![0.0; 18]));
        let k = tape.constant(tensor4(1, 1, 1, 1, vec![1.0]));
        let b = tape.constant(Tensor::from_vec(vec![0.0]));
        assert!(tape.conv2d(x, k, b, (1, 1), (0, 0)).is_err());
    }

    #[test]
    fn batchnorm_constant_input_gives_zeros() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(tensor4(2, 1, 2, 2, vec![3.0; 8]));
        let g = tape.constant(Tensor::from_vec(vec![1.0]));
        let b = tape.constant(Tensor::from_vec(vec![0.0]));
        let mut rm = vec![0.0f32];
        let mut rv = vec![1.0f32];
        let y = tape
            .batchnorm2d(
                x,
                g,
                b,
                BnMode::Train { running_mean: &mut rm, running_var: &mut rv, momentum: 0.1 },
                1e-5,
            )
            .unwrap();
        for &v in tape.data(y) {
            assert!(v.abs() < 1e-3);
        }
        // Running stats moved toward the batch: mean 3, var 0.
        assert!((rm[0] - 0.3).abs() < 1e-6);
        assert!((rv[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_gamma_zero_beta_five() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(tensor4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let g = tape.constant(Tensor::from_vec(vec![0.0]));
        let b = tape.constant(Tensor::from_vec(vec![5.0]));
        let mut rm = vec![0.0f32];
        let mut rv = vec![1.0f32];
        let y = tape
            .batchnorm2d(
                x,
                g,
                b,
                BnMode::Train { running_mean: &mut rm, running_var: &mut rv, momentum: 0.1 },
                1e-5,
            )
            .unwrap();
        for &v in tape.data(y) {
            assert!((v - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_two_values_normalize_to_unit() {
        // Channel values {1,3}: mean 2, var 1 -> outputs {-1,+1} as eps -> 0.
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let x = tape.constant(x);
        let g = tape.constant(Tensor::from_vec(vec![1.0]));
        let b = tape.constant(Tensor::from_vec(vec![0.0]));
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let y = tape
            .batchnorm2d(
                x,
                g,
                b,
                BnMode::Train { running_mean: &mut rm, running_var: &mut rv, momentum: 0.1 },
                1e-12,
            )
            .unwrap();
        let out = tape.data(y);
        assert!((out[0] + 1.0).abs() < 1e-5);
        assert!((out[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batchnorm_rejects_bad_epsilon() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(tensor4(1, 1, 2, 2, vec![0.0; 4]));
        let g = tape.constant(Tensor::from_vec(vec![1.0]));
        let b = tape.constant(Tensor::from_vec(vec![0.0]));
        let mut rm = vec![0.0f32];
        let mut rv = vec![1.0f32];
        let r = tape.batchnorm2d(
            x,
            g,
            b,
            BnMode::Train { running_mean: &mut rm, running_var: &mut rv, momentum: 0.1 },
            0.0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn relu_avgpool_gap_examples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);

        let x = tape.constant(tensor4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.avgpool2x2(x).unwrap();
        assert_eq!(tape.tensor(y).shape(), &[1, 1, 1, 1]);
        assert!((tape.data(y)[0] - 2.5).abs() < 1e-6);

        let x = tape.constant(tensor4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.tensor(y).shape(), &[1, 1]);
        assert!((tape.data(y)[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn avgpool_odd_dims_replicate() {
        // 3x3 constant stays constant and maps to ceil(3/2)=2.
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(tensor4(1, 1, 3, 3, vec![7.0; 9]));
        let y = tape.avgpool2x2(x).unwrap();
        assert_eq!(tape.tensor(y).shape(), &[1, 1, 2, 2]);
        for &v in tape.data(y) {
            assert!((v - 7.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_cross_entropy_examples() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((tape.data(loss)[0] - std::f32::consts::LN_2).abs() < 1e-6);

        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, -1000.0]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        let v = tape.data(loss)[0];
        assert!(v.is_finite() && v.abs() < 1e-6);

        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        let expect = (1.0f32 + (-1.0f32).exp()).ln();
        assert!((tape.data(loss)[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn softmax_cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert!(tape.softmax_cross_entropy(logits, &[2]).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.variable(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0f32; 6]);
    }

    #[test]
    fn backward_relu_subgradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.variable(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = tape.relu(x);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_fanout_accumulates() {
        // loss = sum(x*x + x)  => dloss/dx = 2x + 1
        let mut tape = Tape::<f32>::new();
        let x = tape.variable(Tensor::from_vec(vec![3.0]));
        let sq = tape.mul(x, x).unwrap();
        let both = tape.add(sq, x).unwrap();
        let loss = tape.sum(both);
        tape.backward(loss).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 7.0).abs() < 1e-6);
    }

    #[test]
    fn backward_twice_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.variable(Tensor::from_vec(vec![1.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        // f = sum of squares at x=[3] -> grad ~ [6]
        let x = Tensor::<f64>::from_vec(vec![3.0]);
        let g = finite_diff_grad(
            &mut |t: &Tensor<f64>| t.data().iter().map(|&v| v * v).sum(),
            &x,
            1e-3,
        );
        assert!((g.data()[0] - 6.0).abs() < 1e-6);

        // constant f -> zeros
        let g = finite_diff_grad(&mut |_| 42.0, &x, 1e-3);
        assert_eq!(g.data(), &[0.0]);

        // f = x0*x1 at [2,5] -> [5,2]
        let x = Tensor::<f64>::from_vec(vec![2.0, 5.0]);
        let g = finite_diff_grad(&mut |t| t.data()[0] * t.data()[1], &x, 1e-3);
        assert!((g.data()[0] - 5.0).abs() < 1e-6);
        assert!((g.data()[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn weighted_mean_rows_examples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap());
        let y = tape.weighted_mean_rows(x, &[0.75, 0.75]).unwrap();
        assert!((tape.data(y)[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn crop_pad_concat_round_trip_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(tensor4(1, 1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let padded = tape.zero_pad2d(x, 1, 0).unwrap();
        assert_eq!(tape.tensor(padded).shape(), &[1, 1, 3, 3]);
        assert_eq!(tape.data(padded)[6..9], [0.0, 0.0, 0.0]);
        let crop = tape.crop2d(padded, 0, 1, 2, 2).unwrap();
        assert_eq!(tape.data(crop), &[2.0, 3.0, 5.0, 6.0]);

        let a = tape.constant(tensor4(1, 1, 1, 1, vec![1.0]));
        let b = tape.constant(tensor4(2, 1, 1, 1, vec![2.0, 3.0]));
        let cat = tape.concat_batch(&[a, b]).unwrap();
        assert_eq!(tape.tensor(cat).shape(), &[3, 1, 1, 1]);
        assert_eq!(tape.data(cat), &[1.0, 2.0, 3.0]);
    }
}
