//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends
//! a node holding its value; [`Tape::backward`] walks the nodes in reverse
//! and returns the gradient of a scalar with respect to every node that
//! depends on a tracked leaf. A tape is meant to be differentiated once.

use super::kernels;
use super::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 2.0;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    Scale(Var, f64),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
        width: usize,
    },
    Sum(Var),
    Mean(Var),
    Bce {
        pred: Var,
        target: Tensor,
        weight: Option<Tensor>,
        norm: f64,
    },
    Kl {
        mu: Var,
        log_var: Var,
    },
    Reparam {
        mu: Var,
        log_var: Var,
        noise: Tensor,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn inner_width(t: &Tensor) -> usize {
    t.len() / t.shape()[0]
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Gradient-tracking input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let value = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride);
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.any_tracked(&deps);
        self.push(value, Op::Conv2d { x, w, b, stride }, tracked)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let value = kernels::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.any_tracked(&deps);
        self.push(value, Op::ConvTranspose2d { x, w, b, stride }, tracked)
    }

    pub fn maxpool2d(&mut self, x: Var) -> Var {
        let (value, argmax) = kernels::maxpool2d(self.value(x));
        let tracked = self.tracked(x);
        self.push(value, Op::MaxPool2d { x, argmax }, tracked)
    }

    pub fn avgpool2d(&mut self, x: Var) -> Var {
        let value = kernels::avgpool2d(self.value(x));
        let tracked = self.tracked(x);
        self.push(value, Op::AvgPool2d(x), tracked)
    }

    /// `[N, C, H, W]` → `[N, C]` by spatial maximum.
    pub fn global_maxpool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        assert_eq!(s.len(), 4, "global_maxpool expects [N, C, H, W]");
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let base = p * plane;
            let mut best = base;
            for i in base + 1..base + plane {
                if t.data()[i] > t.data()[best] {
                    best = i;
                }
            }
            out.push(t.data()[best]);
            argmax.push(best);
        }
        let tracked = self.tracked(x);
        self.push(Tensor::new(vec![n, c], out), Op::GlobalMaxPool { x, argmax }, tracked)
    }

    /// `x: [N, ...]` flattened per sample, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let value = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.any_tracked(&deps);
        self.push(value, Op::Linear { x, w, b }, tracked)
    }

    /// Batch-statistics normalisation. Also returns the batch mean and
    /// biased variance so the caller can update running averages.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<f64>, Vec<f64>) {
        let (mean, var) = kernels::channel_stats(self.value(x));
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (xhat, y) = self.normalise(x, gamma, beta, &mean, &inv_std);
        let tracked = self.any_tracked(&[x, gamma, beta]);
        let v = self.push(
            y,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tracked,
        );
        (v, mean, var)
    }

    /// Normalisation with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        assert!(self.value(x).shape()[0] > 0, "batchnorm over an empty batch");
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (xhat, y) = self.normalise(x, gamma, beta, mean, &inv_std);
        let tracked = self.any_tracked(&[x, gamma, beta]);
        self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tracked,
        )
    }

    fn normalise(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor) {
        let xt = self.value(x);
        let s = xt.shape();
        assert_eq!(s.len(), 4, "batchnorm expects [N, C, H, W]");
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        assert_eq!(mean.len(), c, "batchnorm statistics have wrong channel count");
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = xt.clone();
        let mut y = xt.clone();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for k in off..off + plane {
                    let h = (xt.data()[k] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[k] = h;
                    y.data_mut()[k] = g[ch] * h + b[ch];
                }
            }
        }
        (xhat, y)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let tracked = self.tracked(x);
        self.push(value, Op::Act { x, kind }, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::LeakyRelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let tracked = self.any_tracked(&[a, b]);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let tracked = self.any_tracked(&[a, b]);
        self.push(value, Op::Sub(a, b), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let tracked = self.any_tracked(&[a, b]);
        self.push(value, Op::Mul(a, b), tracked)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), f64::max);
        let tracked = self.any_tracked(&[a, b]);
        self.push(value, Op::Max(a, b), tracked)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let tracked = self.tracked(x);
        self.push(value, Op::Scale(x, factor), tracked)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let tracked = self.tracked(x);
        self.push(value, Op::Clamp { x, lo, hi }, tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let tracked = self.tracked(x);
        self.push(value, Op::Reshape(x), tracked)
    }

    /// Concatenation along axis 1 of tensors sharing the leading axis and
    /// all trailing axes past 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.value(parts[0]).shape().to_vec();
        let n = first[0];
        let tail: Vec<usize> = first[2..].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        let mut channels = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s[0], n, "concat: leading axis mismatch");
            assert_eq!(&s[2..], &tail[..], "concat: trailing axes mismatch");
            channels += s[1];
            widths.push(inner_width(self.value(p)));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let mut shape = vec![n, channels];
        shape.extend(tail);
        let tracked = self.any_tracked(parts);
        self.push(
            Tensor::new(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            tracked,
        )
    }

    /// Columns `start..start + len` of a `[N, F]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 2, "slice_cols expects [N, F]");
        let (n, width) = (t.shape()[0], t.shape()[1]);
        assert!(start + len <= width, "slice {start}+{len} out of {width}");
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&t.data()[i * width + start..i * width + start + len]);
        }
        let tracked = self.tracked(x);
        self.push(
            Tensor::new(vec![n, len], data),
            Op::Slice { x, start, len, width },
            tracked,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(x);
        self.push(value, Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let tracked = self.tracked(x);
        self.push(value, Op::Mean(x), tracked)
    }

    /// Mean binary cross-entropy; predictions are clamped to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Var {
        self.bce_weighted(pred, target, None)
    }

    /// Weighted binary cross-entropy `Σ wᵢ·ℓᵢ / Σ wᵢ` (plain mean without weights).
    pub fn bce_weighted(&mut self, pred: Var, target: &Tensor, weight: Option<&Tensor>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "bce shape mismatch");
        if let Some(w) = weight {
            assert_eq!(w.shape(), target.shape(), "bce weight shape mismatch");
        }
        let norm = match weight {
            Some(w) => w.sum(),
            None => p.len() as f64,
        };
        let mut total = 0.0;
        for (i, (&pv, &t)) in p.data().iter().zip(target.data()).enumerate() {
            let w = weight.map_or(1.0, |w| w.data()[i]);
            if w == 0.0 {
                continue;
            }
            let q = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= w * (t * q.ln() + (1.0 - t) * (1.0 - q).ln());
        }
        let value = Tensor::scalar(if norm > 0.0 { total / norm } else { 0.0 });
        let tracked = self.tracked(pred);
        self.push(
            value,
            Op::Bce {
                pred,
                target: target.clone(),
                weight: weight.cloned(),
                norm,
            },
            tracked,
        )
    }

    /// KL divergence of `N(mu, exp(log_var))` from the unit Gaussian,
    /// summed over latent dimensions and averaged over the batch.
    pub fn kl_diag_gaussian(&mut self, mu: Var, log_var: Var) -> Var {
        let (m, lv) = (self.value(mu), self.value(log_var));
        assert_eq!(m.shape(), lv.shape(), "kl shape mismatch");
        let batch = m.shape()[0] as f64;
        let total: f64 = m
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&m, &l)| m * m + l.exp() - 1.0 - l)
            .sum();
        let tracked = self.any_tracked(&[mu, log_var]);
        self.push(Tensor::scalar(0.5 * total / batch), Op::Kl { mu, log_var }, tracked)
    }

    /// `mu + exp(log_var / 2) ⊙ noise`; the noise is a constant.
    pub fn reparameterize(&mut self, mu: Var, log_var: Var, noise: &Tensor) -> Var {
        let (m, lv) = (self.value(mu), self.value(log_var));
        assert_eq!(m.shape(), lv.shape(), "reparameterize shape mismatch");
        assert_eq!(m.shape(), noise.shape(), "noise shape mismatch");
        let mut value = m.clone();
        for ((a, &l), &e) in value.data_mut().iter_mut().zip(lv.data()).zip(noise.data()) {
            *a += (0.5 * l).exp() * e;
        }
        let tracked = self.any_tracked(&[mu, log_var]);
        self.push(
            value,
            Op::Reparam {
                mu,
                log_var,
                noise: noise.clone(),
            },
            tracked,
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Var {
        let p = self.value(pred);
        assert_eq!(p.len(), target.len(), "mse length mismatch");
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(total / p.len() as f64);
        let tracked = self.tracked(pred);
        self.push(
            value,
            Op::Mse {
                pred,
                target: target.clone(),
            },
            tracked,
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *stride,
                    g,
                    self.tracked(*x),
                    self.tracked(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *stride,
                    g,
                    self.tracked(*x),
                    self.tracked(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool2d { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[src] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool2d(x) => {
                let shape = self.value(*x).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = Tensor::zeros(&shape);
                let d = dx.data_mut();
                for (o, &gv) in g.data().iter().enumerate() {
                    let plane = o / (ho * wo);
                    let (oy, ox) = ((o % (ho * wo)) / wo, o % wo);
                    let i = plane * h * w + 2 * oy * w + 2 * ox;
                    for k in [i, i + 1, i + w, i + w + 1] {
                        d[k] += 0.25 * gv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (n, inp) = (xt.shape()[0], inner_width(xt));
                let out = wt.shape()[0];
                if self.tracked(*x) {
                    let mut dx = vec![0.0; n * inp];
                    kernels::gemm(n, out, inp, g.data(), false, wt.data(), false, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx));
                }
                if self.tracked(*w) {
                    let mut dw = vec![0.0; out * inp];
                    kernels::gemm(out, n, inp, g.data(), true, xt.data(), false, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(wt.shape().to_vec(), dw));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; out];
                    for row in g.data().chunks(out) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![out], db));
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = xhat.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let count = (n * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for k in off..off + plane {
                            dgamma[ch] += g.data()[k] * xhat.data()[k];
                            dbeta[ch] += g.data()[k];
                        }
                    }
                }
                if self.tracked(*x) {
                    let mut dx = Tensor::zeros(s);
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            // dxhat = g * gamma; sums of dxhat and dxhat*xhat are gamma*dbeta, gamma*dgamma
                            let k1 = gam[ch] * dbeta[ch] / count;
                            let k2 = gam[ch] * dgamma[ch] / count;
                            for k in off..off + plane {
                                dx.data_mut()[k] = inv_std[ch]
                                    * (gam[ch] * g.data()[k] - k1 - xhat.data()[k] * k2);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma));
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = xhat.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Tensor::zeros(s);
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for k in off..off + plane {
                            dgamma[ch] += g.data()[k] * xhat.data()[k];
                            dbeta[ch] += g.data()[k];
                            dx.data_mut()[k] = g.data()[k] * gam[ch] * inv_std[ch];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma));
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta));
            }
            Op::Act { x, kind } => {
                let xt = self.value(*x);
                let mut dx = g.clone();
                for ((d, &xv), &yv) in dx.data_mut().iter_mut().zip(xt.data()).zip(node.value.data()) {
                    *d *= kind.derivative(xv, yv);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::Max(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                let mut db = g.clone();
                for k in 0..g.len() {
                    if av.data()[k] >= bv.data()[k] {
                        db.data_mut()[k] = 0.0;
                    } else {
                        da.data_mut()[k] = 0.0;
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::Clamp { x, lo, hi } => {
                let xt = self.value(*x);
                let dx = g.zip_map(xt, |gv, xv| if xv < *lo || xv > *hi { 0.0 } else { gv });
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape));
            }
            Op::Concat { parts, widths } => {
                let n = g.shape()[0];
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.tracked(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.value(p).shape().to_vec(), d));
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start, len, width } => {
                let n = g.shape()[0];
                let mut dx = Tensor::zeros(&[n, *width]);
                for i in 0..n {
                    dx.data_mut()[i * width + start..i * width + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::filled(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let gv = g.item() / t.len() as f64;
                self.accumulate(grads, *x, Tensor::filled(t.shape(), gv));
            }
            Op::Bce {
                pred,
                target,
                weight,
                norm,
            } => {
                let p = self.value(*pred);
                let gv = g.item();
                let mut dp = Tensor::zeros(p.shape());
                if *norm > 0.0 {
                    for (k, (&pv, &t)) in p.data().iter().zip(target.data()).enumerate() {
                        let w = weight.as_ref().map_or(1.0, |w| w.data()[k]);
                        if w == 0.0 || pv <= BCE_CLAMP || pv >= 1.0 - BCE_CLAMP {
                            continue;
                        }
                        dp.data_mut()[k] = gv * w * ((1.0 - t) / (1.0 - pv) - t / pv) / norm;
                    }
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::Kl { mu, log_var } => {
                let (m, lv) = (self.value(*mu), self.value(*log_var));
                let scale = g.item() / m.shape()[0] as f64;
                self.accumulate(grads, *mu, m.map(|v| v * scale));
                self.accumulate(grads, *log_var, lv.map(|l| 0.5 * (l.exp() - 1.0) * scale));
            }
            Op::Reparam { mu, log_var, noise } => {
                self.accumulate(grads, *mu, g.clone());
                if self.tracked(*log_var) {
                    let lv = self.value(*log_var);
                    let mut d = g.clone();
                    for ((dv, &l), &e) in d.data_mut().iter_mut().zip(lv.data()).zip(noise.data()) {
                        *dv *= 0.5 * (0.5 * l).exp() * e;
                    }
                    self.accumulate(grads, *log_var, d);
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let scale = 2.0 * g.item() / p.len() as f64;
                let mut dp = p.clone();
                for (d, &t) in dp.data_mut().iter_mut().zip(target.data()) {
                    *d = scale * (*d - t);
                }
                self.accumulate(grads, *pred, dp);
            }
        }
    }
}
