//! Forward-only functional wrappers around the graph operations.
//!
//! Each function records a single operation on a throwaway [`Graph`] and
//! returns its value, so the forward path is shared with the differentiable one.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Mode, PoolKind, RunningStats};
use crate::kernels::Padding;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights of a 2-D convolution: `weight` is `out_ch x in_ch x kh x kw`.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: (usize, usize), padding: Padding) -> Result<Self> {
        let (o, _, kh, kw) = weight.dims4("conv2d")?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel {kh}x{kw} must have odd extents")));
        }
        if bias.shape() != [o] {
            return Err(Error::shape("conv2d", format!("bias {:?} vs out_ch {o}", bias.shape())));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
    pub mode: Mode,
}

impl<T: Scalar> BatchNormParams<T> {
    /// Unit scale, zero shift, uninitialised running statistics.
    pub fn new(channels: usize, mode: Mode) -> Self {
        Self {
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            stats: RunningStats::new(channels),
            mode,
        }
    }
}

fn unary<T: Scalar>(input: &Tensor<T>, f: impl FnOnce(&mut Graph<T>, crate::graph::Var) -> Result<crate::graph::Var>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = f(&mut g, x)?;
    Ok(g.value(y).clone())
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(params.weight.clone());
    let b = g.constant(params.bias.clone());
    let y = g.conv2d(x, w, Some(b), params.stride, params.padding)?;
    Ok(g.value(y).clone())
}

pub fn pool2d<T: Scalar>(
    input: &Tensor<T>,
    kind: PoolKind,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    unary(input, |g, x| g.pool2d(x, kind, window, stride, padding))
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    unary(input, |g, x| Ok(g.activation(x, kind))).expect("activation is infallible")
}

/// Batch normalization; training mode updates `params.stats` in place.
pub fn batch_norm<T: Scalar>(input: &Tensor<T>, params: &mut BatchNormParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let gamma = g.constant(params.gamma.clone());
    let beta = g.constant(params.beta.clone());
    let y = g.batch_norm(x, gamma, beta, &mut params.stats, params.mode)?;
    Ok(g.value(y).clone())
}

pub fn dropout<T: Scalar, R: Rng + ?Sized>(input: &Tensor<T>, p: f64, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
    unary(input, |g, x| g.dropout(x, p, mode, rng))
}

pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let y = g.concat_channels(&vars)?;
    Ok(g.value(y).clone())
}

pub fn residual_add<T: Scalar>(x: &Tensor<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(f.clone());
    let y = g.residual_add(a, b)?;
    Ok(g.value(y).clone())
}

pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let y = g.dense(x, w, b)?;
    Ok(g.value(y).clone())
}

pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    unary(logits, |g, x| g.softmax(x))
}
