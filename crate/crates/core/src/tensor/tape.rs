//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every forward method evaluates eagerly and appends a node; [`Tape::backward`]
//! walks the nodes in reverse, accumulating gradients additively into shared
//! inputs and into the [`ParamStore`] for parameter leaves.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

use super::{ParamId, ParamStore, Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const GEM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm running statistics (not trained by gradient).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Counters reported by the batch-hard triplet op.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TripletStats {
    pub anchors_used: usize,
    pub anchors_skipped: usize,
    pub active: usize,
}

enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        per_instance: bool,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Gem {
        x: Var,
        p: Var,
        dims: (usize, usize, usize),
        ln_mean: Vec<T>,
    },
    Triplet {
        f: Var,
        picks: Vec<(usize, usize, usize)>,
        used: usize,
    },
    Project {
        x: Var,
        weights: Vec<T>,
    },
    Broken {
        x: Var,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    branches: DefaultHasher,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branches: DefaultHasher::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Hash of every discrete choice made so far (ReLU masks, pooling
    /// argmaxes, hard-pair selections). Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branches.clone().finish()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (gradient checking).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (k, wc, kh, kw) = self.value(w).dims4()?;
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, kernel expects {wc}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument("conv2d: zero stride".into()));
        }
        let geo = ConvGeometry::new(c, h, wd, kh, kw, stride, pad)?;
        let (ho, wo) = (geo.ho, geo.wo);
        let ckk = c * kh * kw;
        let mut out = vec![T::zero(); n * k * ho * wo];
        let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { ckk * ho * wo }];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        for s in 0..n {
            let xin = &xs[s * c * h * wd..(s + 1) * c * h * wd];
            let colv: &[T] = if geo.is_pointwise() {
                xin
            } else {
                geo.im2col(xin, &mut cols);
                &cols
            };
            T::gemm(
                k,
                ckk,
                ho * wo,
                ws,
                false,
                colv,
                false,
                T::zero(),
                &mut out[s * k * ho * wo..(s + 1) * k * ho * wo],
            );
        }
        let value = Tensor::new(vec![n, k, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Conv2d { x, w, stride, pad }, rg))
    }

    /// Batch normalization over `[N, C, H, W]` (statistics per channel over
    /// N·H·W) or `[N, D]` (statistics per feature over N).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (n, c, s) = norm_layout(self.value(x))?;
        self.check_affine(gamma, beta, c)?;
        if stats.mean.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm: running stats for {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let eps = T::lit(NORM_EPS);
        let xs = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArgument(
                        "batch_norm: train mode needs a batch of at least 2".into(),
                    ));
                }
                let (mean, var) = channel_moments(xs, n, c, s);
                let m = T::lit(BN_MOMENTUM);
                let count = T::lit((n * s) as f64);
                for ch in 0..c {
                    let unbiased = var[ch] * count / (count - T::one());
                    stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * mean[ch];
                    stats.var[ch] = (T::one() - m) * stats.var[ch] + m * unbiased;
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    let xh = (xs[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                per_instance: false,
                batch_stats: mode == Mode::Train,
            },
            rg,
        ))
    }

    /// Instance normalization: statistics per sample and channel over H·W.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let s = h * w;
        if s < 2 {
            return Err(Error::InvalidArgument(
                "instance_norm: spatial map must hold at least 2 values".into(),
            ));
        }
        self.check_affine(gamma, beta, c)?;
        let eps = T::lit(NORM_EPS);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); n * c];
        let sf = T::lit(s as f64);
        for grp in 0..n * c {
            let ch = grp % c;
            let row = &xs[grp * s..(grp + 1) * s];
            let mean = row.iter().copied().sum::<T>() / sf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / sf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[grp] = is;
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat[grp * s + j] = xh;
                out[grp * s + j] = g[ch] * xh + b[ch];
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                per_instance: true,
                batch_stats: true,
            },
            rg,
        ))
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!(
                "normalization affine parameters must have {c} entries"
            )));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let mut h = self.branches.clone();
        for v in self.value(x).data() {
            (*v > T::zero()).hash(&mut h);
        }
        self.branches = h;
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Square-window max pooling with implicit `-inf` padding. Ties go to
    /// the first index in row-major window order.
    pub fn max_pool2d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: (usize, usize),
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if kernel == 0 || stride.0 == 0 || stride.1 == 0 || pad >= kernel {
            return Err(Error::InvalidArgument(format!(
                "max_pool2d: kernel {kernel}, stride {stride:?}, pad {pad}"
            )));
        }
        let ho = out_extent(h, kernel, stride.0, pad)?;
        let wo = out_extent(w, kernel, stride.1, pad)?;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride.0 + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride.1 + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if best_i == usize::MAX || xs[idx] > best {
                                best = xs[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        argmax.hash(&mut self.branches);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// `y = x · wᵀ (+ b)` for `x: [N, Din]`, `w: [Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(x).dims2()?;
        let (dout, wdin) = self.value(w).dims2()?;
        if din != wdin {
            return Err(Error::Shape(format!(
                "linear: input dim {din}, weight expects {wdin}"
            )));
        }
        let mut out = vec![T::zero(); n * dout];
        T::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bs = self.value(b).data();
            if bs.len() != dout {
                return Err(Error::Shape(format!(
                    "linear: bias has {} entries, expected {dout}",
                    bs.len()
                )));
            }
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bs) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(vec![n, dout], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "cross entropy: {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "cross entropy: label {bad} out of range for {c} classes"
            )));
        }
        let ls = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &ls[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            loss += z.ln() + max - row[label];
        }
        loss /= T::lit(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Channels `start..start + len` of an `[N, C, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || len == 0 || start + len > shape[1] {
            return Err(Error::Shape(format!(
                "slice_channels {start}..{} of {shape:?}",
                start + len
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * inner);
        for i in 0..n {
            let base = (i * c + start) * inner;
            out.extend_from_slice(&xs[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[1] = len;
        let value = Tensor::new(oshape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceChannels { x, start }, rg))
    }

    /// Splits `[N, C, ...]` into channels `0..at` and `at..C`.
    pub fn split_channels(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let c = self.shape(x).get(1).copied().unwrap_or(0);
        let lo = self.slice_channels(x, 0, at)?;
        let hi = self.slice_channels(x, at, c.saturating_sub(at))?;
        Ok((lo, hi))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!("concat_channels: {sa:?} vs {sb:?}")));
        }
        let n = sa[0];
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * inner);
        for i in 0..n {
            out.extend_from_slice(&xa[i * ca * inner..(i + 1) * ca * inner]);
            out.extend_from_slice(&xb[i * cb * inner..(i + 1) * cb * inner]);
        }
        let mut shape = sa;
        shape[1] = ca + cb;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Generalized-mean pooling over one axis:
    /// `y = (mean(x^p))^(1/p)` with `x^p = exp(p·ln(x + 1e-6))`.
    /// `p` is a one-element tensor.
    pub fn gem_axis(&mut self, x: Var, p: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("gem: axis {axis} of {shape:?}")));
        }
        if self.value(p).numel() != 1 {
            return Err(Error::Shape("gem: exponent must be a single value".into()));
        }
        let pv = self.value(p).item();
        if !(pv >= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "gem: exponent {pv} must be at least 1"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).data();
        let eps = T::lit(GEM_EPS);
        let ln_len = T::lit(len as f64).ln();
        let mut out = vec![T::zero(); outer * inner];
        let mut ln_mean = vec![T::zero(); outer * inner];
        let mut lns = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let mut mx = T::neg_infinity();
                for (l, slot) in lns.iter_mut().enumerate() {
                    let v = xs[(o * len + l) * inner + i];
                    if v < T::zero() {
                        return Err(Error::InvalidArgument(
                            "gem: input values must be nonnegative".into(),
                        ));
                    }
                    *slot = pv * (v + eps).ln();
                    mx = mx.max(*slot);
                }
                let se: T = lns.iter().map(|&s| (s - mx).exp()).sum();
                let lm = mx + se.ln() - ln_len;
                ln_mean[o * inner + i] = lm;
                out[o * inner + i] = (lm / pv).exp();
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let value = Tensor::new(oshape, out)?;
        let rg = self.rg(x) || self.rg(p);
        Ok(self.push(
            value,
            Op::Gem {
                x,
                p,
                dims: (outer, len, inner),
                ln_mean,
            },
            rg,
        ))
    }

    /// GeM over the spatial extent of `[N, K, H, W]`, giving `[N, K]`.
    pub fn gem_pool(&mut self, x: Var, p: Var) -> Result<Var> {
        let (n, k, h, w) = self.value(x).dims4()?;
        let flat = self.reshape(x, &[n, k, h * w])?;
        self.gem_axis(flat, p, 2)
    }

    /// Split GeM: time-then-frequency with `p_t` and frequency-then-time
    /// with `p_f`, concatenated into `[N, 2K]`.
    pub fn gem_pool_split(&mut self, x: Var, p_t: Var, p_f: Var) -> Result<Var> {
        self.value(x).dims4()?;
        let over_time = self.gem_axis(x, p_t, 3)?;
        let first = self.gem_axis(over_time, p_t, 2)?;
        let over_freq = self.gem_axis(x, p_f, 2)?;
        let second = self.gem_axis(over_freq, p_f, 2)?;
        self.concat_channels(first, second)
    }

    /// Batch-hard triplet loss with Euclidean distances. Anchors without a
    /// positive or a negative in the batch are left out of the mean and
    /// counted in [`TripletStats::anchors_skipped`].
    pub fn triplet_batch_hard(
        &mut self,
        f: Var,
        labels: &[usize],
        margin: T,
    ) -> Result<(Var, TripletStats)> {
        let (n, d) = self.value(f).dims2()?;
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "triplet: {n} rows but {} labels",
                labels.len()
            )));
        }
        let dist = pairwise_distances(self.value(f).data(), n, d);
        let mut stats = TripletStats::default();
        let mut picks = Vec::new();
        let mut total = T::zero();
        for a in 0..n {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let djj = dist[a * n + j];
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| djj > dist[a * n + p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| djj < dist[a * n + q]) {
                    neg = Some(j);
                }
            }
            let (Some(p), Some(q)) = (pos, neg) else {
                stats.anchors_skipped += 1;
                continue;
            };
            stats.anchors_used += 1;
            let z = dist[a * n + p] - dist[a * n + q] + margin;
            (a, p, q, z > T::zero()).hash(&mut self.branches);
            if z > T::zero() {
                stats.active += 1;
                total += z;
                picks.push((a, p, q));
            }
        }
        if stats.anchors_used == 0 {
            return Err(Error::InvalidArgument(
                "triplet: no anchor has both a positive and a negative".into(),
            ));
        }
        let loss = total / T::lit(stats.anchors_used as f64);
        let rg = self.rg(f);
        let v = self.push(
            Tensor::scalar(loss),
            Op::Triplet {
                f,
                picks,
                used: stats.anchors_used,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Scalar `Σ x ⊙ weights`.
    pub fn project(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if weights.numel() != self.value(x).numel() {
            return Err(Error::Shape(
                "project: weight count differs from input".into(),
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Project {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// Test fixture: computes `2x` but back-propagates as if it were `x`.
    #[doc(hidden)]
    pub fn broken_fixture(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v + v);
        let rg = self.rg(x);
        self.push(value, Op::Broken { x }, rg)
    }

    /// Back-propagates from `root` (seeded with ones). Parameter gradients
    /// are added into `params`; all other gradients are returned.
    pub fn backward(&self, root: Var, params: &mut ParamStore<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads, params);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        params: &mut ParamStore<T>,
    ) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.get_mut(*id).grad.add_assign(g),
            Op::Conv2d { x, w, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c, h, wd) = xv.dims4().expect("conv input is 4-D");
                let (k, _, kh, kw) = wv.dims4().expect("conv kernel is 4-D");
                let geo = ConvGeometry::new(c, h, wd, kh, kw, *stride, *pad)
                    .expect("geometry validated in forward");
                let ckk = c * kh * kw;
                let hw = geo.ho * geo.wo;
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut dw = vec![T::zero(); if need_w { k * ckk } else { 0 }];
                let mut dx = vec![T::zero(); if need_x { xv.numel() } else { 0 }];
                let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { ckk * hw }];
                let mut dcols = vec![T::zero(); ckk * hw];
                let xs = xv.data();
                for s in 0..n {
                    let gout = &gd[s * k * hw..(s + 1) * k * hw];
                    let xin = &xs[s * c * h * wd..(s + 1) * c * h * wd];
                    if need_w {
                        let colv: &[T] = if geo.is_pointwise() {
                            xin
                        } else {
                            geo.im2col(xin, &mut cols);
                            &cols
                        };
                        T::gemm(k, hw, ckk, gout, false, colv, true, T::one(), &mut dw);
                    }
                    if need_x {
                        let dxs = &mut dx[s * c * h * wd..(s + 1) * c * h * wd];
                        if geo.is_pointwise() {
                            T::gemm(ckk, k, hw, wv.data(), true, gout, false, T::one(), dxs);
                        } else {
                            T::gemm(
                                ckk,
                                k,
                                hw,
                                wv.data(),
                                true,
                                gout,
                                false,
                                T::zero(),
                                &mut dcols,
                            );
                            geo.col2im(&dcols, dxs);
                        }
                    }
                }
                if need_w {
                    accumulate(grads, *w, wv.shape(), dw);
                }
                if need_x {
                    accumulate(grads, *x, xv.shape(), dx);
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                per_instance,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let (n, c, s) = norm_layout(xv).expect("validated in forward");
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * s;
                        for j in base..base + s {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); xv.numel()];
                    if *per_instance {
                        let sf = T::lit(s as f64);
                        for grp in 0..n * c {
                            let ch = grp % c;
                            let r = grp * s..(grp + 1) * s;
                            let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
                            for j in r.clone() {
                                let dxh = gd[j] * gam[ch];
                                sum_d += dxh;
                                sum_dx += dxh * xhat[j];
                            }
                            let k = inv_std[grp] / sf;
                            for j in r {
                                let dxh = gd[j] * gam[ch];
                                dx[j] = k * (sf * dxh - sum_d - xhat[j] * sum_dx);
                            }
                        }
                    } else if *batch_stats {
                        let m = T::lit((n * s) as f64);
                        let mut sum_d = vec![T::zero(); c];
                        let mut sum_dx = vec![T::zero(); c];
                        for i in 0..n {
                            for ch in 0..c {
                                let base = (i * c + ch) * s;
                                for j in base..base + s {
                                    let dxh = gd[j] * gam[ch];
                                    sum_d[ch] += dxh;
                                    sum_dx[ch] += dxh * xhat[j];
                                }
                            }
                        }
                        for i in 0..n {
                            for ch in 0..c {
                                let k = inv_std[ch] / m;
                                let base = (i * c + ch) * s;
                                for j in base..base + s {
                                    let dxh = gd[j] * gam[ch];
                                    dx[j] = k * (m * dxh - sum_d[ch] - xhat[j] * sum_dx[ch]);
                                }
                            }
                        }
                    } else {
                        for i in 0..n {
                            for ch in 0..c {
                                let base = (i * c + ch) * s;
                                for j in base..base + s {
                                    dx[j] = gd[j] * gam[ch] * inv_std[ch];
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if self.rg(*gamma) {
                    let shape = self.shape(*gamma).to_vec();
                    accumulate(grads, *gamma, &shape, dgamma);
                }
                if self.rg(*beta) {
                    let shape = self.shape(*beta).to_vec();
                    accumulate(grads, *beta, &shape, dbeta);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.numel()];
                for (&i, &gv) in argmax.iter().zip(gd) {
                    dx[i] += gv;
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, din) = xv.dims2().expect("2-D");
                let dout = wv.shape()[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(
                        n,
                        dout,
                        din,
                        gd,
                        false,
                        wv.data(),
                        false,
                        T::zero(),
                        &mut dx,
                    );
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(dout, n, din, gd, true, xv.data(), false, T::zero(), &mut dw);
                    accumulate(grads, *w, wv.shape(), dw);
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    let mut db = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    let shape = self.shape(b).to_vec();
                    accumulate(grads, b, &shape, db);
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let shape = self.shape(*logits).to_vec();
                let c = shape[1];
                let scale = gd[0] / T::lit(labels.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * c + l] -= scale;
                }
                accumulate(grads, *logits, &shape, dl);
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        accumulate(grads, v, g.shape(), gd.to_vec());
                    }
                }
            }
            Op::SliceChannels { x, start } => {
                let shape = self.shape(*x).to_vec();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let len = g.shape()[1];
                let mut dx = vec![T::zero(); n * c * inner];
                for i in 0..n {
                    let dst = (i * c + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&gd[i * len * inner..(i + 1) * len * inner]);
                }
                accumulate(grads, *x, &shape, dx);
            }
            Op::Concat { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let n = sa[0];
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1], sb[1]);
                let mut da = Vec::with_capacity(n * ca * inner);
                let mut db = Vec::with_capacity(n * cb * inner);
                for row in gd.chunks((ca + cb) * inner) {
                    da.extend_from_slice(&row[..ca * inner]);
                    db.extend_from_slice(&row[ca * inner..]);
                }
                if self.rg(*a) {
                    accumulate(grads, *a, &sa, da);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, &sb, db);
                }
            }
            Op::Reshape { x } => {
                let shape = self.shape(*x).to_vec();
                accumulate(grads, *x, &shape, gd.to_vec());
            }
            Op::Gem {
                x,
                p,
                dims: (outer, len, inner),
                ln_mean,
            } => {
                let xv = self.value(*x);
                let xs = xv.data();
                let pv = self.value(*p).item();
                let eps = T::lit(GEM_EPS);
                let lenf = T::lit(*len as f64);
                let ln_len = lenf.ln();
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dp = T::zero();
                let yd = node.value.data();
                for o in 0..*outer {
                    for i in 0..*inner {
                        let oi = o * inner + i;
                        let (y, lm, gy) = (yd[oi], ln_mean[oi], gd[oi]);
                        let ln_y = lm / pv;
                        let mut weighted_ln = T::zero();
                        for l in 0..*len {
                            let idx = (o * len + l) * inner + i;
                            let lu = (xs[idx] + eps).ln();
                            // dy/dx = u^(p-1) · y / (len · m)
                            dx[idx] = gy * (ln_y - lm + (pv - T::one()) * lu - ln_len).exp();
                            weighted_ln += (pv * lu - lm - ln_len).exp() * lu;
                        }
                        dp += gy * y * (weighted_ln / pv - lm / (pv * pv));
                    }
                }
                if self.rg(*x) {
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if self.rg(*p) {
                    let shape = self.shape(*p).to_vec();
                    accumulate(grads, *p, &shape, vec![dp]);
                }
            }
            Op::Triplet { f, picks, used } => {
                let fv = self.value(*f);
                let (_, d) = fv.dims2().expect("2-D");
                let fs = fv.data();
                let scale = gd[0] / T::lit(*used as f64);
                let mut df = vec![T::zero(); fv.numel()];
                let tiny = T::lit(1e-12);
                for &(a, p, q) in picks {
                    for (other, sign) in [(p, T::one()), (q, -T::one())] {
                        let dist = (0..d)
                            .map(|k| (fs[a * d + k] - fs[other * d + k]).powi(2))
                            .sum::<T>()
                            .sqrt();
                        if dist < tiny {
                            continue;
                        }
                        let coef = sign * scale / dist;
                        for k in 0..d {
                            let diff = fs[a * d + k] - fs[other * d + k];
                            df[a * d + k] += coef * diff;
                            df[other * d + k] -= coef * diff;
                        }
                    }
                }
                accumulate(grads, *f, fv.shape(), df);
            }
            Op::Project { x, weights } => {
                let shape = self.shape(*x).to_vec();
                let dx = weights.iter().map(|&w| w * gd[0]).collect();
                accumulate(grads, *x, &shape, dx);
            }
            Op::Broken { x } => {
                let shape = self.shape(*x).to_vec();
                accumulate(grads, *x, &shape, gd.to_vec());
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(data) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape matches value"));
        }
    }
}

fn out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "window {kernel} larger than padded extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// `[N, C, H, W]` → `(N, C, H·W)`; `[N, D]` → `(N, D, 1)`.
fn norm_layout<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [n, c, h, w] => Ok((n, c, h * w)),
        [n, d] => Ok((n, d, 1)),
        _ => Err(Error::Shape(format!(
            "normalization expects [N, C, H, W] or [N, D], got {:?}",
            x.shape()
        ))),
    }
}

fn channel_moments<T: Scalar>(xs: &[T], n: usize, c: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let count = T::lit((n * s) as f64);
    let mut mean = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * s;
            mean[ch] += xs[base..base + s].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * s;
            var[ch] += xs[base..base + s]
                .iter()
                .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

pub(crate) fn pairwise_distances<T: Scalar>(f: &[T], n: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * n];
    for a in 0..n {
        for b in a + 1..n {
            let dist = (0..d)
                .map(|k| (f[a * d + k] - f[b * d + k]).powi(2))
                .sum::<T>()
                .sqrt();
            out[a * n + b] = dist;
            out[b * n + a] = dist;
        }
    }
    out
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let ho = out_extent(h, kh, stride.0, pad.0)?;
        let wo = out_extent(w, kw, stride.1, pad.1)?;
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }

    /// Input column (or `None` for padding) feeding output column `ox`.
    #[inline]
    fn src(&self, o: usize, k: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
        let i = (o * stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < size).then_some(i as usize)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let Some(iy) = self.src(oy, ky, self.stride.0, self.pad.0, self.h) else {
                            line.fill(T::zero());
                            continue;
                        };
                        let xrow = &x[(ci * self.h + iy) * self.w..(ci * self.h + iy + 1) * self.w];
                        for (ox, slot) in line.iter_mut().enumerate() {
                            *slot = match self.src(ox, kx, self.stride.1, self.pad.1, self.w) {
                                Some(ix) => xrow[ix],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let plane = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ky, self.stride.0, self.pad.0, self.h) else {
                            continue;
                        };
                        let base = (ci * self.h + iy) * self.w;
                        for ox in 0..self.wo {
                            if let Some(ix) = self.src(ox, kx, self.stride.1, self.pad.1, self.w) {
                                dx[base + ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
