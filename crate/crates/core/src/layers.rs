//! Differentiable building blocks: affine projector, activations, inverted
//! dropout and adaptive average pooling. Each layer caches what its backward
//! pass needs during forward and accumulates parameter gradients in place.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Forward-pass mode. Only `Train` draws dropout masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor paired with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f64> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer<T = f64> {
    /// `[out × in]`
    pub weight: Param<T>,
    /// `[out]`, absent for bias-free maps.
    pub bias: Option<Param<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> LinearLayer<T> {
    /// Zero-initialized layer.
    pub fn new(in_dim: usize, out_dim: usize, with_bias: bool) -> Self {
        LinearLayer {
            weight: Param::new(Tensor::zeros(&[out_dim, in_dim])),
            bias: with_bias.then(|| Param::new(Tensor::zeros(&[out_dim]))),
            cache: None,
        }
    }

    /// Weights uniform in ±√(6/(fan_in+fan_out)); bias zero.
    pub fn xavier<R: Rng>(in_dim: usize, out_dim: usize, with_bias: bool, rng: &mut R) -> Self {
        let mut layer = Self::new(in_dim, out_dim, with_bias);
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        for w in layer.weight.value.data_mut() {
            *w = T::lit(rng.random_range(-bound..=bound));
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// `x·Wᵀ + b` for `x: [batch × in]`.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 || x.cols() != self.in_dim() {
            return Err(Error::shape("linear_forward", x.shape(), self.weight.value.shape()));
        }
        let out = tensor::affine_nt(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value))?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    /// Accumulates parameter gradients and, if requested, returns `up·W`.
    /// Consumes the cached input, so each forward supports one backward.
    pub fn backward(&mut self, upstream: &Tensor<T>, input_grad: bool) -> Result<Option<Tensor<T>>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::State("linear backward without a matching forward".into()))?;
        if upstream.rank() != 2 || upstream.rows() != x.rows() || upstream.cols() != self.out_dim()
        {
            return Err(Error::shape("linear_backward", upstream.shape(), &[x.rows(), self.out_dim()]));
        }
        let gw = tensor::matmul_tn(upstream, &x)?;
        self.weight.grad.add_assign(&gw)?;
        if let Some(bias) = &mut self.bias {
            let gb = tensor::reduce_sum(upstream, 0)?;
            bias.grad.add_assign(&gb)?;
        }
        if input_grad {
            Ok(Some(tensor::matmul(upstream, &self.weight.value)?))
        } else {
            Ok(None)
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn forward<T: Scalar>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Identity => Ok(x.clone()),
        }
    }

    pub fn backward<T: Scalar>(
        self,
        input: &Tensor<T>,
        output: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut grad = upstream.clone();
        self.backward_in_place(input, output, &mut grad)?;
        Ok(grad)
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => tensor::relu_scalar(x),
            Activation::Sigmoid => tensor::sigmoid_scalar(x),
            Activation::Identity => x,
        }
    }

    /// `g` times the derivative at input `x`, whose output was `y`.
    pub fn grad<T: Scalar>(self, x: T, y: T, g: T) -> T {
        match self {
            Activation::Relu if x > T::zero() => g,
            Activation::Relu => T::zero(),
            Activation::Sigmoid => g * y * (T::one() - y),
            Activation::Identity => g,
        }
    }

    /// Whether [`Activation::grad`] reads the forward output.
    pub fn grad_needs_output(self) -> bool {
        self == Activation::Sigmoid
    }

    /// [`Activation::backward`] overwriting `grad` instead of allocating.
    pub fn backward_in_place<T: Scalar>(self, input: &Tensor<T>, output: &Tensor<T>, grad: &mut Tensor<T>) -> Result<()> {
        match self {
            Activation::Relu => tensor::relu_backward_in_place(input, grad),
            Activation::Sigmoid => tensor::sigmoid_backward_in_place(output, grad),
            Activation::Identity => Ok(()),
        }
    }
}

/// Inverted dropout: kept elements are scaled by `1/(1−p)` at train time,
/// and eval mode is the exact identity.
#[derive(Clone, Debug)]
pub struct DropoutLayer<T = f64> {
    rate: f64,
    /// Kept positions of the last train-mode forward.
    mask: Option<Vec<bool>>,
    scale: T,
}

impl<T: Scalar> DropoutLayer<T> {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(DropoutLayer {
            rate,
            mask: None,
            scale: T::lit(1.0 / (1.0 - rate)),
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward<R: Rng>(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut R) -> Tensor<T> {
        if self.sample_mask(x.len(), mode, rng).is_none() {
            return x.clone();
        }
        let mask = self.mask().expect("mask just drawn");
        let out = x.data().iter().zip(mask).map(|(&v, &kept)| v * self.factor(kept)).collect();
        Tensor::new(x.shape().to_vec(), out).expect("same shape as input")
    }

    /// Draws and keeps a fresh mask of `len` elements in train mode; clears
    /// it and returns `None` when dropout is the identity.
    pub fn sample_mask<R: Rng>(&mut self, len: usize, mode: Mode, rng: &mut R) -> Option<&[bool]> {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.mask = None;
            return None;
        }
        // One 32-bit draw per element; kept iff it falls below (1−p)·2³².
        let cut = ((1.0 - self.rate) * 4_294_967_296.0) as u64;
        let mut draws = [0u32; 1024];
        let mut keep = Vec::with_capacity(len);
        let mut left = len;
        while left > 0 {
            let draws = &mut draws[..left.min(1024)];
            rng.fill(&mut *draws);
            keep.extend(draws.iter().map(|&u| u64::from(u) < cut));
            left -= draws.len();
        }
        self.mask = Some(keep);
        self.mask.as_deref()
    }

    /// Mask of the last train-mode forward, if any.
    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// Multiplier for one element: `1/(1−p)` if kept, else 0.
    pub fn factor(&self, kept: bool) -> T {
        if kept {
            self.scale
        } else {
            T::zero()
        }
    }

    pub fn backward(&self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let mut grad = upstream.clone();
        self.backward_in_place(&mut grad)?;
        Ok(grad)
    }

    pub fn backward_in_place(&self, grad: &mut Tensor<T>) -> Result<()> {
        let Some(mask) = &self.mask else {
            return Ok(());
        };
        if mask.len() != grad.len() {
            return Err(Error::shape("dropout_backward", grad.shape(), &[mask.len()]));
        }
        for (g, &kept) in grad.data_mut().iter_mut().zip(mask) {
            *g = *g * self.factor(kept);
        }
        grad.ensure_finite("dropout_backward")
    }
}

/// Row range `[floor(i·L/T), ceil((i+1)·L/T))` of output bin `i`.
pub fn pool_bin(i: usize, len: usize, target: usize) -> (usize, usize) {
    let start = i * len / target;
    let end = ((i + 1) * len).div_ceil(target);
    (start, end)
}

/// Resamples `x: [L × d]` to `[T × d]` by averaging each bin of rows.
/// Works for both `L ≥ T` and `L < T` (bins then overlap and repeat rows).
pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "adaptive_avg_pool needs [L × d], got {:?}",
            x.shape()
        )));
    }
    if target == 0 {
        return Err(Error::InvalidArgument("pool target length must be ≥ 1".into()));
    }
    let (len, dim) = (x.rows(), x.cols());
    let mut out = vec![T::zero(); target * dim];
    for (i, out_row) in out.chunks_exact_mut(dim).enumerate() {
        let (start, end) = pool_bin(i, len, target);
        for r in start..end {
            for (o, &v) in out_row.iter_mut().zip(x.row(r)) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::from_usize_lossy(end - start);
        for o in out_row.iter_mut() {
            *o = *o * inv;
        }
    }
    Tensor::new(vec![target, dim], out)
}

/// Pools raw row-major `f32` frames (as stored on disk) into an `f64` tensor.
pub fn adaptive_avg_pool_f32(rows: usize, dim: usize, data: &[f32], target: usize) -> Result<Tensor<f64>> {
    if rows == 0 {
        return Err(Error::Data("cannot pool an empty sequence".into()));
    }
    let x = Tensor::new(vec![rows, dim], data.iter().map(|&v| f64::from(v)).collect())?;
    adaptive_avg_pool(&x, target)
}

pub fn adaptive_avg_pool_backward<T: Scalar>(upstream: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
    if upstream.rank() != 2 || len == 0 {
        return Err(Error::InvalidArgument(format!(
            "adaptive_avg_pool_backward: upstream {:?}, len {len}",
            upstream.shape()
        )));
    }
    let (target, dim) = (upstream.rows(), upstream.cols());
    let mut grad = Tensor::zeros(&[len, dim]);
    for i in 0..target {
        let (start, end) = pool_bin(i, len, target);
        let inv = T::one() / T::from_usize_lossy(end - start);
        for r in start..end {
            let up = upstream.row(i);
            for (g, &u) in grad.row_mut(r).iter_mut().zip(up) {
                *g = *g + u * inv;
            }
        }
    }
    Ok(grad)
}
