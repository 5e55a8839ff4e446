//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs for the backward pass. Operands always precede their results, so a
//! single reverse sweep over the node list is a valid topological order.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward_input, conv2d_backward_weight, conv2d_forward, conv_transpose2d_backward_input,
    conv_transpose2d_backward_weight, conv_transpose2d_forward, gemm, ConvDims, ConvGeometry, Real,
    Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::LeakyRelu(slope) if !(slope > 0.0 && slope < 1.0) => Err(Error::Domain(
                format!("leaky relu slope {slope} outside (0, 1)"),
            )),
            _ => Ok(()),
        }
    }

    pub fn apply<T: Real>(&self, x: T) -> T {
        match *self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(slope)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Real>(&self, x: T, y: T) -> T {
        match *self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(slope)
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => f.write_str("RELU"),
            Activation::LeakyRelu(s) => write!(f, "LRELU({s})"),
            Activation::Tanh => f.write_str("TANH"),
            Activation::Sigmoid => f.write_str("SIGMOID"),
        }
    }
}

/// Running moments of a batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Weight of the old running value in each update.
    pub momentum: T,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize, momentum: T) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running moments are updated.
    Train,
    /// Batch statistics; running moments are left untouched.
    TrainFrozen,
    /// Running moments.
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
        geom: ConvGeometry,
    },
    AvgPool {
        x: Var,
        pool: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    LogClamped {
        x: Var,
        lo: T,
        hi: T,
    },
    ScaleShift {
        x: Var,
        scale: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn conv_dims(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeometry,
        transposed: bool,
    ) -> Result<ConvDims> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                op,
                format!("expected rank-4 input and weights, got {xs:?} and {ws:?}"),
            ));
        }
        if ws[2] != geom.kernel || ws[3] != geom.kernel {
            return Err(Error::shape(
                op,
                format!("weights {ws:?} do not match kernel {}", geom.kernel),
            ));
        }
        let (in_ch, filters) = if transposed {
            (ws[0], ws[1])
        } else {
            (ws[1], ws[0])
        };
        if xs[1] != in_ch {
            return Err(Error::shape(
                op,
                format!("input has {} channels but weights expect {in_ch}", xs[1]),
            ));
        }
        if self.shape(b) != [filters] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?}, expected [{filters}]", self.shape(b)),
            ));
        }
        let (out_h, out_w) = if transposed {
            (geom.transpose_output(xs[2])?, geom.transpose_output(xs[3])?)
        } else {
            (geom.conv_output(xs[2])?, geom.conv_output(xs[3])?)
        };
        Ok(ConvDims {
            batch: xs[0],
            in_channels: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            filters,
            out_h,
            out_w,
        })
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `w: [F,C,k,k]` plus per-filter bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let dims = self.conv_dims("conv2d", x, w, b, &geom, false)?;
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &dims,
            &geom,
        );
        let value = Tensor::new([dims.batch, dims.filters, dims.out_h, dims.out_w], out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                dims,
                geom,
            },
            rg,
        ))
    }

    /// Adjoint of [`Tape::conv2d`]; `w` is laid out `[C_in, F, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let dims = self.conv_dims("conv_transpose2d", x, w, b, &geom, true)?;
        let out = conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &dims,
            &geom,
        );
        let value = Tensor::new([dims.batch, dims.filters, dims.out_h, dims.out_w], out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                dims,
                geom,
            },
            rg,
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, pool: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(
                "avg_pool2d",
                format!("expected rank 4, got {s:?}"),
            ));
        }
        if pool == 0 || !s[2].is_multiple_of(pool) || !s[3].is_multiple_of(pool) {
            return Err(Error::Geometry(format!(
                "pool {pool} does not divide spatial size {}x{}",
                s[2], s[3]
            )));
        }
        let (oh, ow) = (s[2] / pool, s[3] / pool);
        let src = self.value(x).data();
        let scale = T::one() / T::lit((pool * pool) as f64);
        let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
        for (plane, dst) in src.chunks(s[2] * s[3]).zip(out.chunks_mut(oh * ow)) {
            for y in 0..s[2] {
                let row = &plane[y * s[3]..(y + 1) * s[3]];
                let drow = &mut dst[(y / pool) * ow..(y / pool + 1) * ow];
                for (xx, &v) in row.iter().enumerate() {
                    drow[xx / pool] += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= scale);
        }
        let value = Tensor::new([s[0], s[1], oh, ow], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::AvgPool { x, pool }, rg))
    }

    /// Per-channel normalization over every axis except axis 1.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: BnMode,
        eps: T,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("expected rank >= 2, got {s:?}"),
            ));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let m = n * inner;
        if m == 0 {
            return Err(Error::shape("batch_norm", "empty batch"));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} shape {:?}, expected [{c}]", self.shape(v)),
                ));
            }
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                "running moments do not match channels",
            ));
        }
        if !(eps > T::zero()) {
            return Err(Error::Domain("batch norm eps must be positive".into()));
        }
        let xs = self.value(x).data();
        let batch_stats = mode != BnMode::Eval;
        let (mean, var) = if batch_stats {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let seg = &xs[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                    mean[ch] += seg.iter().copied().sum::<T>();
                }
            }
            let mf = T::lit(m as f64);
            mean.iter_mut().for_each(|v| *v = *v / mf);
            for b in 0..n {
                for ch in 0..c {
                    let seg = &xs[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                    var[ch] += seg
                        .iter()
                        .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                        .sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v = *v / mf);
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        if mode == BnMode::Train {
            let mom = state.momentum;
            let unbias = if m > 1 {
                T::lit(m as f64 / (m - 1) as f64)
            } else {
                T::one()
            };
            for ch in 0..c {
                state.running_mean[ch] = mom * state.running_mean[ch] + (T::one() - mom) * mean[ch];
                state.running_var[ch] =
                    mom * state.running_var[ch] + (T::one() - mom) * var[ch] * unbias;
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut x_hat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                for i in r {
                    let h = (xs[i] - mean[ch]) * inv_std[ch];
                    x_hat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        kind.validate()?;
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Activation { x, kind }, rg))
    }

    /// `x·w + b` for `x: [N,D]`, `w: [D,M]`, `b: [M]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::shape(
                "affine",
                format!("input {xs:?}, weights {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(
            false,
            false,
            n,
            d,
            m,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            T::one(),
            &mut out,
        );
        let value = Tensor::new([n, m], out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Affine { x, w, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Mean { x }, rg)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient vanishes where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi).ln());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::LogClamped { x, lo, hi }, rg)
    }

    /// `scale·x + shift`
    pub fn scale_shift(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::ScaleShift { x, scale }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product of equally shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} for {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Domain(format!("label {bad} outside {k} classes")));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let nll: T = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[i * k + l].max(T::min_positive_value())).ln())
            .sum();
        let value = Tensor::scalar(nll / T::lit(labels.len() as f64));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Accumulates d`loss`/d`leaf` into every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[idx] {
                    Some(g) => g.data_mut().iter_mut().zip(&dy).for_each(|(a, &d)| *a += d),
                    slot => *slot = Some(Tensor::new(node.value.shape().to_vec(), dy)?),
                }
                continue;
            }
            for (operand, grad) in self.node_backward(idx, &dy) {
                if !self.nodes[operand.0].requires_grad {
                    continue;
                }
                match &mut adj[operand.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &g)| *a += g),
                    slot => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                dims,
                geom,
            } => {
                if wants(*x) {
                    out.push((*x, conv2d_backward_input(dy, val(*w), dims, geom)));
                }
                if wants(*w) || wants(*b) {
                    let (dw, db) = conv2d_backward_weight(val(*x), dy, dims, geom);
                    out.push((*w, dw));
                    out.push((*b, db));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                dims,
                geom,
            } => {
                if wants(*x) {
                    out.push((*x, conv_transpose2d_backward_input(dy, val(*w), dims, geom)));
                }
                if wants(*w) || wants(*b) {
                    let (dw, db) = conv_transpose2d_backward_weight(val(*x), dy, dims, geom);
                    out.push((*w, dw));
                    out.push((*b, db));
                }
            }
            Op::AvgPool { x, pool } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / pool, w / pool);
                let scale = T::one() / T::lit((pool * pool) as f64);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (dplane, gplane) in dx.chunks_mut(h * w).zip(dy.chunks(oh * ow)) {
                    for y in 0..h {
                        for xx in 0..w {
                            dplane[y * w + xx] = gplane[(y / pool) * ow + xx / pool] * scale;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let g = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                            dgamma[ch] += dy[i] * x_hat[i];
                            dbeta[ch] += dy[i];
                        }
                    }
                }
                if wants(*x) {
                    let mut dx = vec![T::zero(); dy.len()];
                    let mf = T::lit((n * inner) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                                dx[i] = if *batch_stats {
                                    // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                                    g[ch]
                                        * inv_std[ch]
                                        * (dy[i] - dbeta[ch] / mf - x_hat[i] * dgamma[ch] / mf)
                                } else {
                                    g[ch] * inv_std[ch] * dy[i]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Activation { x, kind } => {
                let dx = val(*x)
                    .iter()
                    .zip(node.value.data())
                    .zip(dy)
                    .map(|((&xi, &yi), &g)| g * kind.derivative(xi, yi))
                    .collect();
                out.push((*x, dx));
            }
            Op::Affine { x, w, b } => {
                let xs = self.shape(*x);
                let (n, d) = (xs[0], xs[1]);
                let m = self.shape(*w)[1];
                if wants(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    gemm(
                        false,
                        true,
                        n,
                        m,
                        d,
                        T::one(),
                        dy,
                        val(*w),
                        T::zero(),
                        &mut dx,
                    );
                    out.push((*x, dx));
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); d * m];
                    gemm(
                        true,
                        false,
                        d,
                        n,
                        m,
                        T::one(),
                        val(*x),
                        dy,
                        T::zero(),
                        &mut dw,
                    );
                    out.push((*w, dw));
                }
                let mut db = vec![T::zero(); m];
                for row in dy.chunks(m) {
                    db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                }
                out.push((*b, db));
            }
            Op::Reshape { x } => out.push((*x, dy.to_vec())),
            Op::Sum { x } => out.push((*x, vec![dy[0]; self.value(*x).len()])),
            Op::Mean { x } => {
                let len = self.value(*x).len();
                out.push((*x, vec![dy[0] / T::lit(len as f64); len]));
            }
            Op::LogClamped { x, lo, hi } => {
                let dx = val(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > *lo && v < *hi { g / v } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::ScaleShift { x, scale } => {
                out.push((*x, dy.iter().map(|&g| g * *scale).collect()));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                out.push((*a, dy.iter().zip(vb).map(|(&g, &q)| g * q).collect()));
                out.push((*b, dy.iter().zip(va).map(|(&g, &p)| g * p).collect()));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = dy[0] / T::lit(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= scale;
                }
                out.push((*logits, dx));
            }
        }
        out
    }
}

/// Numerically stable row-wise softmax of a `[rows, k]` buffer.
pub fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
        assert_eq!(tape.grad(x).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn relu_sum_backward_is_indicator() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[4], &[1.5, -0.5, 2.0, -3.0]));
        let r = tape.activation(x, Activation::Relu).unwrap();
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let y = tape.param(t(&[2], &[3.0, 4.0]));
        let z = tape.add(x, y).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(y).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::LeakyRelu(0.2).apply(-1.0f64), -0.2);
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert!(Activation::LeakyRelu(1.5).validate().is_err());
        assert!(Activation::LeakyRelu(0.0).validate().is_err());
    }

    #[test]
    fn avg_pool_means_each_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = tape.avg_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let x = tape.constant(Tensor::full([1, 1, 16, 16], 0.25));
        let y = tape.avg_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 8, 8]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
        let bad = tape.constant(Tensor::full([1, 1, 5, 4], 0.0));
        assert!(matches!(tape.avg_pool2d(bad, 2), Err(Error::Geometry(_))));
    }

    #[test]
    fn batch_norm_constant_channel_normalizes_to_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([4, 2, 3, 3], 7.0));
        let g = tape.constant(Tensor::full([2], 1.0));
        let b = tape.constant(Tensor::zeros([2]));
        let mut st = BatchNormState::new(2, 0.9);
        let y = tape
            .batch_norm(x, g, b, &mut st, BnMode::Train, 1e-5)
            .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!((st.running_mean[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_uses_running_moments() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 1], &[3.0, 5.0]));
        let g = tape.constant(Tensor::full([1], 2.0));
        let b = tape.constant(Tensor::full([1], 1.0));
        let mut st = BatchNormState {
            running_mean: vec![1.0],
            running_var: vec![4.0],
            momentum: 0.9,
        };
        let y = tape
            .batch_norm(x, g, b, &mut st, BnMode::Eval, 1e-12)
            .unwrap();
        let want = [2.0 * (2.0 / 2.0) + 1.0, 2.0 * (4.0 / 2.0) + 1.0];
        for (a, w) in tape.value(y).data().iter().zip(want) {
            assert!((a - w).abs() < 1e-9);
        }
        assert_eq!(st.running_mean, vec![1.0]);
    }

    #[test]
    fn softmax_cross_entropy_of_uniform_logits_is_log_k() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([3, 4]));
        let l = tape.softmax_cross_entropy(x, &[0, 1, 3]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        assert!(tape.softmax_cross_entropy(x, &[0, 1, 4]).is_err());
    }
}
