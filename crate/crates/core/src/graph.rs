//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order, so the tape is already topologically sorted. [`Graph::backward`]
//! walks it once in reverse, accumulating gradients into every node that
//! requires them. Only leaf gradients are retained afterwards.
//!
//! ```
//! use irrcnn::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let w = g.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let x = g.constant(Tensor::new([3], vec![4.0, 5.0, 6.0]).unwrap());
//! let wx = g.mul(w, x).unwrap();
//! let loss = g.sum(wx);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap().data(), &[4.0, 5.0, 6.0]);
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Padding, Window};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities below this are clamped inside the cross-entropy log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// Exponential linear unit with alpha = 1.
    Elu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics and hyper-parameters of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub epsilon: f64,
    /// Weight of the current batch in the running average.
    pub momentum: f64,
    /// False until a training-mode pass or an explicit initialisation has set the statistics.
    pub initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    pub const DEFAULT_EPSILON: f64 = 1e-6;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    /// Fresh statistics that must be populated by a training pass before eval use.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros([channels]),
            var: Tensor::ones([channels]),
            epsilon: Self::DEFAULT_EPSILON,
            momentum: Self::DEFAULT_MOMENTUM,
            initialized: false,
        }
    }

    /// Statistics explicitly set to zero mean and unit variance.
    pub fn identity(channels: usize) -> Self {
        Self {
            initialized: true,
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        window: Window,
        out_channels: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        window: Window,
    },
    Relu(Var),
    Elu(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    Sum(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// A recorded computation.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is available after [`backward`](Self::backward).
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

    /// Smallest `|x|` over every ReLU input recorded so far, or `None` if the
    /// graph has no ReLU. A finite-difference step larger than this may cross
    /// the kink.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(input) => Some(&self.nodes[input.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|x| x.as_f64().abs()))
            .reduce(f64::min)
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Clears gradients so that [`backward`](Self::backward) may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        let (o, ic, kh, kw) = self.value(weight).dims4(OP)?;
        if ic != c {
            return Err(Error::shape(
                OP,
                format!("input has {c} channels but weight expects in_ch = {ic}"),
            ));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [o] {
                return Err(Error::shape(
                    OP,
                    format!("bias shape {bs:?} does not match out_ch = {o}"),
                ));
            }
        }
        let window = Window::new(OP, (c, h, w), (kh, kw), stride, padding)?;
        let data = kernels::conv_forward(
            self.value(input).data(),
            n,
            &window,
            self.value(weight).data(),
            o,
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new([n, o, window.out_h, window.out_w], data)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                window,
                out_channels: o,
            },
            &inputs,
        ))
    }

    pub fn pool2d(
        &mut self,
        input: Var,
        kind: PoolKind,
        window: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        const OP: &str = "pool2d";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        let geom = Window::new(OP, (c, h, w), (window, window), (stride, stride), padding)?;
        let shape = [n, c, geom.out_h, geom.out_w];
        let src = self.value(input).data();
        Ok(match kind {
            PoolKind::Max => {
                let (data, argmax) = kernels::max_pool_forward(src, n, &geom);
                self.push(Tensor::new(shape, data)?, Op::MaxPool { input, argmax }, &[input])
            }
            PoolKind::Avg => {
                let data = kernels::avg_pool_forward(src, n, &geom);
                self.push(
                    Tensor::new(shape, data)?,
                    Op::AvgPool {
                        input,
                        window: geom,
                    },
                    &[input],
                )
            }
        })
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => {
                let value = self.value(input).map(|x| x.max(T::zero()));
                self.push(value, Op::Relu(input), &[input])
            }
            Activation::Elu => {
                let value = self
                    .value(input)
                    .map(|x| if x > T::zero() { x } else { x.exp_m1() });
                self.push(value, Op::Elu(input), &[input])
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn elu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Elu)
    }

    /// Per-channel batch normalization of an NCHW tensor.
    ///
    /// In training mode the batch statistics (biased variance over batch,
    /// height and width) normalize the input and are folded into `stats`
    /// (unbiased variance). In eval mode the running statistics are used and
    /// must have been initialised.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    OP,
                    format!(
                        "{name} shape {:?} does not match {c} channels",
                        self.value(v).shape()
                    ),
                ));
            }
        }
        if stats.channels() != c {
            return Err(Error::shape(
                OP,
                format!("running stats cover {} channels, input has {c}", stats.channels()),
            ));
        }
        if !(stats.epsilon > 0.0) {
            return Err(Error::invalid(OP, "epsilon must be positive"));
        }
        let plane = h * w;
        let m = n * plane;
        let x = self.value(input).data();
        let eps = T::from_f64(stats.epsilon);

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        acc += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0.0f64;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        sq += x[off..off + plane]
                            .iter()
                            .map(|v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = T::from_f64(mu);
                    var[ch] = T::from_f64(sq / m as f64);
                }
                (mean, var)
            }
            Mode::Eval => {
                if !stats.initialized {
                    return Err(Error::invalid(
                        OP,
                        "eval mode requested before running statistics were set",
                    ));
                }
                if stats.var.data().iter().any(|v| *v <= T::zero()) {
                    return Err(Error::invalid(OP, "running variance must be strictly positive"));
                }
                (stats.mean.data().to_vec(), stats.var.data().to_vec())
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }

        if mode == Mode::Train {
            let mom = T::from_f64(stats.momentum);
            let correction = if m > 1 {
                T::from_f64(m as f64 / (m - 1) as f64)
            } else {
                T::one()
            };
            for ch in 0..c {
                let rm = &mut stats.mean.data_mut()[ch];
                *rm = (T::one() - mom) * *rm + mom * mean[ch];
                let rv = &mut stats.var.data_mut()[ch];
                *rv = (T::one() - mom) * *rv + mom * var[ch] * correction;
            }
            stats.initialized = true;
        }

        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            &[input, gamma, beta],
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`; eval mode is
    /// the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(input).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let src = self.value(input);
        let data = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { input, mask }, &[input]))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *inputs.first().ok_or_else(|| Error::invalid(OP, "no inputs"))?;
        let (n, _, h, w) = self.value(first).dims4(OP)?;
        let mut total = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4(OP)?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    OP,
                    format!("operand is {vn}x{vc}x{vh}x{vw}, expected batch {n} and spatial {h}x{w}"),
                ));
            }
            total += vc;
        }
        if inputs.len() == 1 {
            return Ok(first);
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape()[1] * plane;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let value = Tensor::new([n, total, h, w], data)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec()), inputs))
    }

    /// Elementwise sum of two identically shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.zip_values(a, b, |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Residual connection `x + f`; the operands must already agree in shape.
    pub fn residual_add(&mut self, x: Var, f: Var) -> Result<Var> {
        self.same_shape("residual_add", x, f)?;
        self.add(x, f)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.zip_values(a, b, |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Affine map `input * weight^T + bias` with `input: N x F`, `weight: O x F`, `bias: O`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "dense";
        let (n, f) = self.value(input).dims2(OP)?;
        let (o, wf) = self.value(weight).dims2(OP)?;
        if wf != f {
            return Err(Error::shape(
                OP,
                format!("input has {f} features but weight expects {wf}"),
            ));
        }
        if self.value(bias).shape() != [o] {
            return Err(Error::shape(
                OP,
                format!("bias shape {:?} does not match {o} outputs", self.value(bias).shape()),
            ));
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            f,
            o,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            &mut out,
            false,
        );
        let b = self.value(bias).data();
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
        }
        let value = Tensor::new([n, o], out)?;
        Ok(self.push(value, Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    /// Row-wise softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        let k = *t.shape().last().ok_or_else(|| Error::shape("softmax", "rank 0"))?;
        if k < 2 {
            return Err(Error::shape("softmax", format!("class axis has extent {k}, need >= 2")));
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(logits), &[logits]))
    }

    /// Mean negative log-probability of the labelled class, with probabilities
    /// clamped at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let (n, k) = self.value(probs).dims2(OP)?;
        if labels.len() != n {
            return Err(Error::shape(OP, format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(OP, format!("label {bad} outside [0, {k})")));
        }
        let p = self.value(probs).data();
        let floor = T::from_f64(PROB_FLOOR);
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                // `max` would swallow a NaN probability and hide divergence.
                let pl = p[i * k + l];
                if pl.is_nan() { pl } else { -pl.max(floor).ln() }
            })
            .sum();
        let value = Tensor::scalar(total / T::from_f64(n as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum(input), &[input])
    }

    /// Spatial mean of an NCHW tensor, giving `N x C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("global_avg_pool")?;
        let plane = h * w;
        let scale = T::from_f64(1.0 / plane as f64);
        let data = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new([n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(input), &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    /// Reverse pass from a one-element `loss`.
    ///
    /// Fails if `loss` is not a scalar or if a previous backward pass has not
    /// been cleared with [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(loss_shape));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &dy)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += b),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, g).expect("gradient shape matches value"));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, id: usize, dy: &Tensor<T>) -> Result<()> {
        let dy = dy.data();
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                window,
                out_channels,
            } => {
                let n = self.value(*input).shape()[0];
                let grads = kernels::conv_backward(
                    self.value(*input).data(),
                    n,
                    window,
                    self.value(*weight).data(),
                    *out_channels,
                    dy,
                    (
                        self.wants(*input),
                        self.wants(*weight),
                        bias.is_some_and(|b| self.wants(b)),
                    ),
                );
                out.extend(grads.input.map(|g| (*input, g)));
                out.extend(grads.weight.map(|g| (*weight, g)));
                if let (Some(b), Some(g)) = (bias, grads.bias) {
                    out.push((*b, g));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    dx[src] += g;
                }
                out.push((*input, dx));
            }
            Op::AvgPool { input, window } => {
                let n = self.value(*input).shape()[0];
                out.push((*input, kernels::avg_pool_backward(dy, n, window)));
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*input, dx));
            }
            Op::Elu(input) => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > T::zero() { g } else { g * x.exp() })
                    .collect();
                out.push((*input, dx));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*input).dims4("batch_norm")?;
                let plane = h * w;
                let m = T::from_f64((n * plane) as f64);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] += dy[i] * xhat[i];
                            dbeta[ch] += dy[i];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); dy.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            for i in off..off + plane {
                                dx[i] = if *batch_stats {
                                    gm[ch] * inv_std[ch] / m
                                        * (m * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    dy[i] * gm[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Dropout { input, mask } => {
                out.push((*input, dy.iter().zip(mask).map(|(&g, &m)| g * m).collect()));
            }
            Op::Concat(inputs) => {
                let (n, total, h, w) = node.value.dims4("concat_channels")?;
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let vc = self.value(v).shape()[1];
                    let mut g = Vec::with_capacity(n * vc * plane);
                    for b in 0..n {
                        let start = (b * total + offset) * plane;
                        g.extend_from_slice(&dy[start..start + vc * plane]);
                    }
                    offset += vc;
                    out.push((v, g));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, dy.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                out.push((*b, dy.iter().zip(av).map(|(&g, &x)| g * x).collect()));
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (n, f) = self.value(*input).dims2("dense")?;
                let o = self.value(*weight).shape()[0];
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(n, o, f, dy, false, self.value(*weight).data(), false, &mut dx, false);
                    out.push((*input, dx));
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); o * f];
                    T::gemm(o, n, f, dy, true, self.value(*input).data(), false, &mut dw, false);
                    out.push((*weight, dw));
                }
                let mut db = vec![T::zero(); o];
                for row in dy.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                }
                out.push((*bias, db));
            }
            Op::Softmax(input) => {
                let y = node.value.data();
                let k = *node.value.shape().last().expect("softmax output has a class axis");
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(k).zip(dy.chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yy), &g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yy * (g - dot);
                    }
                }
                out.push((*input, dx));
            }
            Op::CrossEntropy { probs, labels } => {
                let (n, k) = self.value(*probs).dims2("cross_entropy")?;
                let p = self.value(*probs).data();
                let scale = dy[0] / T::from_f64(n as f64);
                let floor = T::from_f64(PROB_FLOOR);
                let mut dp = vec![T::zero(); n * k];
                for (i, &l) in labels.iter().enumerate() {
                    let pi = p[i * k + l];
                    if pi > floor {
                        dp[i * k + l] = -scale / pi;
                    }
                }
                out.push((*probs, dp));
            }
            Op::Sum(input) => {
                out.push((*input, vec![dy[0]; self.value(*input).len()]));
            }
            Op::GlobalAvgPool(input) => {
                let (_, _, h, w) = self.value(*input).dims4("global_avg_pool")?;
                let plane = h * w;
                let scale = T::from_f64(1.0 / plane as f64);
                let dx = dy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * scale, plane))
                    .collect();
                out.push((*input, dx));
            }
            Op::Reshape(input) => out.push((*input, dy.to_vec())),
        }
        for (v, g) in out {
            self.accumulate(v, g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_without_reset_is_an_error() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::ones([2]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Autodiff(_))));
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::ones([2]));
        assert!(matches!(g.backward(w), Err(Error::Autodiff(_))));
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let used = g.param(Tensor::ones([2]));
        let unused = g.param(Tensor::ones([3]));
        let s = g.sum(used);
        g.backward(s).unwrap();
        let zero = g.grad(unused).map_or(0.0, |t| t.data().iter().map(|v| v.abs()).sum());
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn shared_node_accumulates_gradient() {
        // loss = sum(x + x) -> d/dx = 2
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn eval_batch_norm_needs_initialised_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 2, 2, 2]));
        let gamma = g.constant(Tensor::ones([2]));
        let beta = g.constant(Tensor::zeros([2]));
        let mut stats = RunningStats::new(2);
        assert!(g.batch_norm(x, gamma, beta, &mut stats, Mode::Eval).is_err());
        g.batch_norm(x, gamma, beta, &mut stats, Mode::Train).unwrap();
        assert!(stats.initialized);
        g.batch_norm(x, gamma, beta, &mut stats, Mode::Eval).unwrap();
    }
}
