//! AdamW with decoupled weight decay, cosine learning-rate annealing, global
//! gradient-norm clipping, and EMA shadow weights.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipOutcome {
    /// Global L2 norm before clipping.
    pub norm: f64,
    /// Factor every gradient was multiplied by (1 when not clipped).
    pub factor: f64,
}

impl ClipOutcome {
    pub fn clipped(&self) -> bool {
        self.factor < 1.0
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm<T: Scalar>(params: &mut [&mut Param<T>], max_norm: f64) -> Result<ClipOutcome> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(params.iter().map(|p| &p.grad));
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    let mut factor = 1.0;
    if norm > max_norm {
        factor = max_norm / norm;
        let f = T::lit(factor);
        for p in params.iter_mut() {
            p.grad.scale_in_place(f);
        }
    }
    Ok(ClipOutcome { norm, factor })
}

pub fn global_norm<'a, T: Scalar>(grads: impl Iterator<Item = &'a Tensor<T>>) -> f64 {
    grads
        .map(|g| g.sum_squares().to_f64_lossy())
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T = f64> {
    pub config: AdamWConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Param<T>>) -> Self {
        let first: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`:
    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be ≥ 0, got {lr}")));
        }
        let c = &self.config;
        let t = self.step + 1;
        let bc1 = T::lit(1.0 - c.beta1.powi(t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(t as i32));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (eps, wd, lr_t) = (T::lit(c.eps), T::lit(c.weight_decay), T::lit(lr));

        // Compute into scratch first so a non-finite update leaves state untouched.
        let mut updates = Vec::with_capacity(params.len());
        for ((p, m), v) in params.iter().zip(&self.first).zip(&self.second) {
            if p.value.shape() != m.shape() {
                return Err(Error::shape("adamw_step", p.value.shape(), m.shape()));
            }
            let mut m_new = m.clone();
            let mut v_new = v.clone();
            let mut theta = p.value.clone();
            for (((mi, vi), th), &g) in m_new
                .data_mut()
                .iter_mut()
                .zip(v_new.data_mut())
                .zip(theta.data_mut())
                .zip(p.grad.data())
            {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *th = *th - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *th);
            }
            theta.ensure_finite("adamw update")?;
            updates.push((m_new, v_new, theta));
        }
        for (i, (m, v, theta)) in updates.into_iter().enumerate() {
            self.first[i] = m;
            self.second[i] = v;
            params[i].value = theta;
        }
        self.step = t;
        Ok(())
    }
}

/// `η_min + ½(η₀ − η_min)(1 + cos(π·t/T))`.
pub fn cosine_lr(t: f64, total: f64, lr0: f64, lr_min: f64) -> Result<f64> {
    if !(total > 0.0) {
        return Err(Error::Config("cosine schedule horizon must be positive".into()));
    }
    if !(0.0..=total).contains(&t) {
        return Err(Error::InvalidArgument(format!("schedule position {t} outside [0, {total}]")));
    }
    if t == 0.0 {
        return Ok(lr0);
    }
    if t == total {
        return Ok(lr_min);
    }
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t / total).cos()))
}

/// Shadow parameters updated as `s ← d·s + (1−d)·θ`.
#[derive(Clone, Debug)]
pub struct Ema<T = f64> {
    pub decay: f64,
    shadows: Vec<Tensor<T>>,
}

impl<T: Scalar> Ema<T> {
    /// Shadows start as copies of the current parameters.
    pub fn new(decay: f64, params: &[Tensor<T>]) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay must be in [0, 1], got {decay}")));
        }
        Ok(Ema {
            decay,
            shadows: params.to_vec(),
        })
    }

    pub fn from_shadows(decay: f64, shadows: Vec<Tensor<T>>) -> Self {
        Ema { decay, shadows }
    }

    pub fn shadows(&self) -> &[Tensor<T>] {
        &self.shadows
    }

    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<()> {
        let d = T::lit(self.decay);
        let keep = T::lit(1.0 - self.decay);
        let mut count = 0;
        for (s, p) in self.shadows.iter_mut().zip(params) {
            if s.shape() != p.shape() {
                return Err(Error::shape("ema_update", s.shape(), p.shape()));
            }
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + keep * pv;
            }
            count += 1;
        }
        if count != self.shadows.len() {
            return Err(Error::State(format!("EMA tracks {} tensors, got {count}", self.shadows.len())));
        }
        Ok(())
    }
}
