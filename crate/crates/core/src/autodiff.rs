//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every op appends a node whose parents already
//! exist, so node order is a topological order and [`Graph::backward`] is a
//! single reverse sweep. A graph is built per training step and dropped
//! afterwards; parameters enter as leaves and their gradients are read back
//! with [`Graph::grad`].

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    pub fn cast<U: Scalar>(&self) -> BnStats<U> {
        BnStats {
            mean: self.mean.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            var: self.var.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Hard Concrete shape parameters carried by the gate op.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StretchParams {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, geom: ConvGeom, cols: Vec<T> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    Relu { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: T },
    AddScalar { input: Var },
    Sigmoid { input: Var },
    Sum { input: Var },
    Mean { input: Var },
    Concat { inputs: Vec<(Var, usize)> },
    ChannelMul { input: Var, gate: Var },
    GlobalAvgPool { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SoftCrossEntropy { logits: Var, rows: usize, targets: Vec<T>, temperature: T, probs: Vec<T> },
    HardConcrete { log_alpha: Var, slope: Vec<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a rank-1, single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- ops ------------------------------------------------------------

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), stride, padding)?;
        let (y, cols) =
            kernels::conv2d_forward(self.value(input).data(), self.value(weight).data(), &geom);
        let out = Tensor::new_unchecked(vec![geom.n, geom.cout, geom.ho, geom.wo], y);
        Ok(self.push(out, Op::Conv2d { input, weight, geom, cols }, &[input, weight]))
    }

    /// Batch normalization over `(n, h, w)` per channel.
    ///
    /// In training mode the batch statistics normalize the input and update
    /// `stats` with momentum [`BN_MOMENTUM`] (unbiased variance); in eval mode
    /// `stats` normalizes and is left untouched.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        training: bool,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("batchnorm2d input")?;
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::Dimension(format!(
                    "batchnorm2d {what}: expected [{c}], got {:?}",
                    self.shape(v)
                )));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Dimension(format!("batchnorm2d running stats: expected {c} channels")));
        }
        let p = h * w;
        let m = n * p;
        let eps = T::from_f64(BN_EPS);
        let momentum = T::from_f64(BN_MOMENTUM);
        let x = self.value(input).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if training {
            let mf = T::from_f64(m as f64);
            for ci in 0..c {
                let mut s = T::zero();
                for ni in 0..n {
                    s = s + x[(ni * c + ci) * p..(ni * c + ci + 1) * p].iter().copied().sum::<T>();
                }
                let mu = s / mf;
                let mut ss = T::zero();
                for ni in 0..n {
                    for &v in &x[(ni * c + ci) * p..(ni * c + ci + 1) * p] {
                        ss = ss + (v - mu) * (v - mu);
                    }
                }
                mean[ci] = mu;
                var[ci] = ss / mf;
            }
            let unbias = if m > 1 { T::from_f64(m as f64 / (m as f64 - 1.0)) } else { T::one() };
            for ci in 0..c {
                stats.mean[ci] = (T::one() - momentum) * stats.mean[ci] + momentum * mean[ci];
                stats.var[ci] = (T::one() - momentum) * stats.var[ci] + momentum * var[ci] * unbias;
            }
        } else {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * p;
                for j in base..base + p {
                    xhat[j] = (x[j] - mean[ci]) * inv_std[ci];
                    y[j] = g[ci] * xhat[j] + b[ci];
                }
            }
        }
        let out = Tensor::new_unchecked(vec![n, c, h, w], y);
        Ok(self.push(out, Op::BatchNorm { input, gamma, beta, xhat, inv_std, training }, &[input, gamma, beta]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu { input }, &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new_unchecked(self.shape(a).to_vec(), data);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new_unchecked(self.shape(a).to_vec(), data);
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|x| x * factor);
        self.push(out, Op::Scale { input, factor }, &[input])
    }

    pub fn add_scalar(&mut self, input: Var, offset: T) -> Var {
        let out = self.value(input).map(|x| x + offset);
        self.push(out, Op::AddScalar { input }, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(sigmoid);
        self.push(out, Op::Sigmoid { input }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let out = Tensor::scalar(t.sum() / T::from_f64(t.numel() as f64));
        self.push(out, Op::Mean { input }, &[input])
    }

    /// Concatenates `[n, c_i, h, w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::Argument("concat_channels: no inputs".into()))?;
        let (n, _, h, w) = self.value(first).dims4("concat_channels input 0")?;
        let mut parts = Vec::with_capacity(inputs.len());
        for (i, &v) in inputs.iter().enumerate() {
            let (ni, ci, hi, wi) = self.value(v).dims4(&format!("concat_channels input {i}"))?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(Error::Dimension(format!(
                    "concat_channels input {i}: shape {:?} incompatible with {:?}",
                    self.shape(v),
                    self.shape(first)
                )));
            }
            parts.push((v, ci));
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let p = h * w;
        let mut data = Vec::with_capacity(n * total * p);
        for ni in 0..n {
            for &(v, c) in &parts {
                data.extend_from_slice(&self.value(v).data()[ni * c * p..(ni + 1) * c * p]);
            }
        }
        let out = Tensor::new_unchecked(vec![n, total, h, w], data);
        Ok(self.push(out, Op::Concat { inputs: parts }, inputs))
    }

    /// Multiplies channel `c` of a `[n, c, h, w]` tensor by `gate[c]`.
    pub fn channel_mul(&mut self, input: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("channel_mul input")?;
        if self.shape(gate) != [c] {
            return Err(Error::Dimension(format!(
                "channel_mul gate: expected [{c}], got {:?}",
                self.shape(gate)
            )));
        }
        let p = h * w;
        let z = self.value(gate).data();
        let x = self.value(input).data();
        let mut y = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * p;
                for j in base..base + p {
                    y[j] = x[j] * z[ci];
                }
            }
        }
        let out = Tensor::new_unchecked(vec![n, c, h, w], y);
        Ok(self.push(out, Op::ChannelMul { input, gate }, &[input, gate]))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("global_avg_pool input")?;
        let p = h * w;
        let inv = T::one() / T::from_f64(p as f64);
        let data = self.value(input).data().chunks(p).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new_unchecked(vec![n, c], data);
        Ok(self.push(out, Op::GlobalAvgPool { input }, &[input]))
    }

    /// `y = x W^T + b` with `x: [n, f]`, `W: [o, f]`, `b: [o]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, f) = match *self.shape(input) {
            [n, f] => (n, f),
            _ => return Err(Error::Dimension(format!("linear input: expected rank 2, got {:?}", self.shape(input)))),
        };
        let o = match *self.shape(weight) {
            [o, wf] if wf == f => o,
            _ => {
                return Err(Error::Dimension(format!(
                    "linear weight: expected [_, {f}], got {:?}",
                    self.shape(weight)
                )))
            }
        };
        if self.shape(bias) != [o] {
            return Err(Error::Dimension(format!("linear bias: expected [{o}], got {:?}", self.shape(bias))));
        }
        let mut y = Vec::with_capacity(n * o);
        for _ in 0..n {
            y.extend_from_slice(self.value(bias).data());
        }
        T::gemm(
            n,
            f,
            o,
            T::one(),
            self.value(input).data(),
            f as isize,
            1,
            self.value(weight).data(),
            1,
            f as isize,
            T::one(),
            &mut y,
            o as isize,
            1,
        );
        let out = Tensor::new_unchecked(vec![n, o], y);
        Ok(self.push(out, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    /// Mean cross-entropy of raw logits `[n, c]` against integer labels.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims("cross_entropy logits", logits)?;
        if labels.len() != n {
            return Err(Error::Dimension(format!("cross_entropy: {n} rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Argument(format!("cross_entropy: label {bad} >= num_classes {c}")));
        }
        let x = self.value(logits).data();
        let probs = kernels::softmax_rows(x, c, T::one());
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = &x[i * c..(i + 1) * c];
            loss = loss + log_sum_exp(row, T::one()) - row[l];
        }
        let out = Tensor::scalar(loss / T::from_f64(n as f64));
        Ok(self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Mean over rows of `-sum_c targets[c] * log softmax(logits / T)[c]`.
    /// `targets` are constant probability rows.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &[T], temperature: T) -> Result<Var> {
        let (n, c) = self.matrix_dims("soft_cross_entropy logits", logits)?;
        if targets.len() != n * c {
            return Err(Error::Dimension(format!(
                "soft_cross_entropy targets: expected {} values, got {}",
                n * c,
                targets.len()
            )));
        }
        let x = self.value(logits).data();
        let probs = kernels::softmax_rows(x, c, temperature);
        let mut loss = T::zero();
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let lse = log_sum_exp(row, temperature);
            for j in 0..c {
                loss = loss - targets[i * c + j] * (row[j] / temperature - lse);
            }
        }
        let out = Tensor::scalar(loss / T::from_f64(n as f64));
        Ok(self.push(
            out,
            Op::SoftCrossEntropy { logits, rows: n, targets: targets.to_vec(), temperature, probs },
            &[logits],
        ))
    }

    /// Stretched, clamped Binary Concrete sample
    /// `clamp01(sigmoid((noise + log_alpha) / beta) * (zeta - gamma) + gamma)`
    /// where `noise = log(eps) - log(1 - eps)` is fixed per element.
    /// The clamp passes no gradient outside `(0, 1)`.
    pub fn hard_concrete(&mut self, log_alpha: Var, noise: &[T], hc: StretchParams) -> Result<Var> {
        let la = self.value(log_alpha);
        if la.numel() != noise.len() {
            return Err(Error::Dimension(format!(
                "hard_concrete noise: expected {} values, got {}",
                la.numel(),
                noise.len()
            )));
        }
        let beta = T::from_f64(hc.beta);
        let gamma = T::from_f64(hc.gamma);
        let span = T::from_f64(hc.zeta - hc.gamma);
        let mut z = Vec::with_capacity(noise.len());
        let mut slope = Vec::with_capacity(noise.len());
        for (&a, &u) in la.data().iter().zip(noise) {
            let s = sigmoid((u + a) / beta);
            let pre = s * span + gamma;
            if pre <= T::zero() {
                z.push(T::zero());
                slope.push(T::zero());
            } else if pre >= T::one() {
                z.push(T::one());
                slope.push(T::zero());
            } else {
                z.push(pre);
                slope.push(span * s * (T::one() - s) / beta);
            }
        }
        let out = Tensor::new_unchecked(la.shape().to_vec(), z);
        Ok(self.push(out, Op::HardConcrete { log_alpha, slope }, &[log_alpha]))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, what: &str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [n, c] => Ok((n, c)),
            _ => Err(Error::Dimension(format!("{what}: expected rank 2, got {:?}", self.shape(v)))),
        }
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `root`. Previously accumulated gradients
    /// are cleared first, so repeated calls give identical results.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let shape = self.nodes[root.0].value.shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::full(&shape, T::one()));
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = node.grad.as_ref() else { continue };
            backprop(&node.op, &node.value, dy.data(), before);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sum_exp<T: Scalar>(row: &[T], temperature: T) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x / temperature));
    max + row.iter().map(|&x| (x / temperature - max).exp()).sum::<T>().ln()
}

/// Gradient buffer of `v`, allocated on first use. `None` when `v` does
/// not take part in differentiation.
fn grad_buf<T: Scalar>(nodes: &mut [Node<T>], v: Var) -> Option<&mut [T]> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let shape = node.value.shape().to_vec();
    Some(node.grad.get_or_insert_with(|| Tensor::zeros(&shape)).data_mut())
}

fn value_of<T: Scalar>(nodes: &[Node<T>], v: Var) -> &[T] {
    nodes[v.0].value.data()
}

fn backprop<T: Scalar>(op: &Op<T>, out: &Tensor<T>, dy: &[T], nodes: &mut [Node<T>]) {
    match op {
        Op::Leaf => {}
        Op::Conv2d { input, weight, geom, cols } => {
            let dyp = kernels::batch_major_to_channel_major(dy, geom.n, geom.cout, geom.out_area());
            if nodes[input.0].requires_grad {
                let w = value_of(nodes, *weight).to_vec();
                kernels::conv2d_backward_input(&dyp, &w, geom, grad_buf(nodes, *input).unwrap());
            }
            if let Some(dw) = grad_buf(nodes, *weight) {
                kernels::conv2d_backward_weight(&dyp, cols, geom, dw);
            }
        }
        Op::BatchNorm { input, gamma, beta, xhat, inv_std, training } => {
            let (n, c, h, w) = match *out.shape() {
                [n, c, h, w] => (n, c, h, w),
                _ => unreachable!(),
            };
            let p = h * w;
            let m = T::from_f64((n * p) as f64);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * p;
                    for j in base..base + p {
                        dgamma[ci] = dgamma[ci] + dy[j] * xhat[j];
                        dbeta[ci] = dbeta[ci] + dy[j];
                    }
                }
            }
            let g = value_of(nodes, *gamma).to_vec();
            if let Some(dx) = grad_buf(nodes, *input) {
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * p;
                        // eval mode is a plain affine map
                        if *training {
                            let k = g[ci] * inv_std[ci] / m;
                            for j in base..base + p {
                                dx[j] = dx[j] + k * (m * dy[j] - dbeta[ci] - xhat[j] * dgamma[ci]);
                            }
                        } else {
                            let k = g[ci] * inv_std[ci];
                            for j in base..base + p {
                                dx[j] = dx[j] + k * dy[j];
                            }
                        }
                    }
                }
            }
            if let Some(dg) = grad_buf(nodes, *gamma) {
                dg.iter_mut().zip(&dgamma).for_each(|(a, &b)| *a = *a + b);
            }
            if let Some(db) = grad_buf(nodes, *beta) {
                db.iter_mut().zip(&dbeta).for_each(|(a, &b)| *a = *a + b);
            }
        }
        Op::Relu { input } => {
            if let Some(dx) = grad_buf(nodes, *input) {
                for ((d, &g), &y) in dx.iter_mut().zip(dy).zip(out.data()) {
                    if y > T::zero() {
                        *d = *d + g;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if let Some(dx) = grad_buf(nodes, v) {
                    dx.iter_mut().zip(dy).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::Mul { a, b } => {
            let av = value_of(nodes, *a).to_vec();
            let bv = value_of(nodes, *b).to_vec();
            if let Some(da) = grad_buf(nodes, *a) {
                for ((d, &g), &y) in da.iter_mut().zip(dy).zip(&bv) {
                    *d = *d + g * y;
                }
            }
            if let Some(db) = grad_buf(nodes, *b) {
                for ((d, &g), &x) in db.iter_mut().zip(dy).zip(&av) {
                    *d = *d + g * x;
                }
            }
        }
        Op::Scale { input, factor } => {
            if let Some(dx) = grad_buf(nodes, *input) {
                dx.iter_mut().zip(dy).for_each(|(d, &g)| *d = *d + g * *factor);
            }
        }
        Op::AddScalar { input } => {
            if let Some(dx) = grad_buf(nodes, *input) {
                dx.iter_mut().zip(dy).for_each(|(d, &g)| *d = *d + g);
            }
        }
        Op::Sigmoid { input } => {
            if let Some(dx) = grad_buf(nodes, *input) {
                for ((d, &g), &s) in dx.iter_mut().zip(dy).zip(out.data()) {
                    *d = *d + g * s * (T::one() - s);
                }
            }
        }
        Op::Sum { input } => {
            if let Some(dx) = grad_buf(nodes, *input) {
                dx.iter_mut().for_each(|d| *d = *d + dy[0]);
            }
        }
        Op::Mean { input } => {
            if let Some(dx) = grad_buf(nodes, *input) {
                let k = dy[0] / T::from_f64(dx.len() as f64);
                dx.iter_mut().for_each(|d| *d = *d + k);
            }
        }
        Op::Concat { inputs } => {
            let (n, total, h, w) = match *out.shape() {
                [n, c, h, w] => (n, c, h, w),
                _ => unreachable!(),
            };
            let p = h * w;
            let mut offset = 0;
            for &(v, c) in inputs {
                if let Some(dx) = grad_buf(nodes, v) {
                    for ni in 0..n {
                        let src = &dy[(ni * total + offset) * p..(ni * total + offset + c) * p];
                        let dst = &mut dx[ni * c * p..(ni + 1) * c * p];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                    }
                }
                offset += c;
            }
        }
        Op::ChannelMul { input, gate } => {
            let (n, c, h, w) = match *out.shape() {
                [n, c, h, w] => (n, c, h, w),
                _ => unreachable!(),
            };
            let p = h * w;
            let z = value_of(nodes, *gate).to_vec();
            if nodes[gate.0].requires_grad {
                let x = value_of(nodes, *input);
                let mut dz = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * p;
                        let s: T = (base..base + p).map(|j| dy[j] * x[j]).sum();
                        dz[ci] = dz[ci] + s;
                    }
                }
                let g = grad_buf(nodes, *gate).unwrap();
                g.iter_mut().zip(&dz).for_each(|(a, &b)| *a = *a + b);
            }
            if let Some(dx) = grad_buf(nodes, *input) {
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * p;
                        for j in base..base + p {
                            dx[j] = dx[j] + dy[j] * z[ci];
                        }
                    }
                }
            }
        }
        Op::GlobalAvgPool { input } => {
            if let Some(dx) = grad_buf(nodes, *input) {
                let p = dx.len() / dy.len();
                let inv = T::one() / T::from_f64(p as f64);
                for (chunk, &g) in dx.chunks_mut(p).zip(dy) {
                    chunk.iter_mut().for_each(|d| *d = *d + g * inv);
                }
            }
        }
        Op::Linear { input, weight, bias } => {
            let (n, o) = match *out.shape() {
                [n, o] => (n, o),
                _ => unreachable!(),
            };
            let f = nodes[weight.0].value.shape()[1];
            let x = value_of(nodes, *input).to_vec();
            let w = value_of(nodes, *weight).to_vec();
            if let Some(dx) = grad_buf(nodes, *input) {
                T::gemm(n, o, f, T::one(), dy, o as isize, 1, &w, f as isize, 1, T::one(), dx, f as isize, 1);
            }
            if let Some(dw) = grad_buf(nodes, *weight) {
                T::gemm(o, n, f, T::one(), dy, 1, o as isize, &x, f as isize, 1, T::one(), dw, f as isize, 1);
            }
            if let Some(db) = grad_buf(nodes, *bias) {
                for row in dy.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            if let Some(dx) = grad_buf(nodes, *logits) {
                let n = labels.len();
                let c = probs.len() / n;
                let k = dy[0] / T::from_f64(n as f64);
                for (i, &l) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == l { T::one() } else { T::zero() };
                        dx[i * c + j] = dx[i * c + j] + k * (probs[i * c + j] - target);
                    }
                }
            }
        }
        Op::SoftCrossEntropy { logits, rows, targets, temperature, probs } => {
            if let Some(dx) = grad_buf(nodes, *logits) {
                let c = probs.len() / rows;
                let k = dy[0] / (T::from_f64(*rows as f64) * *temperature);
                for i in 0..*rows {
                    let mass: T = targets[i * c..(i + 1) * c].iter().copied().sum();
                    for j in 0..c {
                        let idx = i * c + j;
                        dx[idx] = dx[idx] + k * (probs[idx] * mass - targets[idx]);
                    }
                }
            }
        }
        Op::HardConcrete { log_alpha, slope } => {
            if let Some(dx) = grad_buf(nodes, *log_alpha) {
                for ((d, &g), &s) in dx.iter_mut().zip(dy).zip(slope) {
                    *d = *d + g * s;
                }
            }
        }
    }
}
