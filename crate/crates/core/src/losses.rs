//! Training objectives and their analytic gradients.
//!
//! total = mse + λ_corr·corr + λ_aux·(λ_v·L_v + λ_a·L_a + λ_t·L_t) + λ_vad·vad

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOutputs, OutputGrads};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance floor below which a Pearson dimension counts as degenerate.
pub const PEARSON_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub corr: f64,
    pub aux: f64,
    pub vad: f64,
    pub visual: f64,
    pub audio: f64,
    pub text: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            corr: 0.5,
            aux: 0.3,
            vad: 0.1,
            visual: 1.0,
            audio: 1.0,
            text: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            corr: 0.0,
            aux: 0.0,
            vad: 0.0,
            visual: 0.0,
            audio: 0.0,
            text: 0.0,
        }
    }

    pub fn branch(&self) -> [f64; 3] {
        [self.visual, self.audio, self.text]
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.corr, self.aux, self.vad, self.visual, self.audio, self.text];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

/// How the batch correlation objective treats the six target dimensions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrMode {
    /// Pearson per dimension over the batch, averaged over dimensions.
    #[default]
    PerDim,
    /// One Pearson over all batch×6 entries.
    Flattened,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T = f64> {
    pub mse: T,
    pub corr: T,
    pub aux: T,
    pub aux_visual: T,
    pub aux_audio: T,
    pub aux_text: T,
    pub vad: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    /// Weighted composition of already-computed terms.
    pub fn compose(mse: T, corr: T, aux_terms: [T; 3], vad: T, w: &LossWeights) -> Self {
        let bw = w.branch();
        let aux = aux_terms
            .iter()
            .zip(bw)
            .fold(T::zero(), |acc, (&l, lam)| acc + T::lit(lam) * l);
        let total = mse + T::lit(w.corr) * corr + T::lit(w.aux) * aux + T::lit(w.vad) * vad;
        LossBreakdown {
            mse,
            corr,
            aux,
            aux_visual: aux_terms[0],
            aux_audio: aux_terms[1],
            aux_text: aux_terms[2],
            vad,
            total,
        }
    }

    pub fn recompute_total(&self, w: &LossWeights) -> T {
        self.mse + T::lit(w.corr) * self.corr + T::lit(w.aux) * self.aux + T::lit(w.vad) * self.vad
    }
}

fn check_same<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean squared error over all entries (per-sample mean over the six dims,
/// then batch mean), with gradient `2(ŷ−y)/(6·batch)`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    check_same("mse_loss", pred, target)?;
    let n = T::from_usize_lossy(pred.len());
    let diff = pred.sub(target)?;
    let value = diff.sum_squares() / n;
    let grad = diff.scale(T::lit(2.0) / n)?;
    Ok((value, grad))
}

/// Pearson correlation of two centered columns and its gradient w.r.t. the
/// first one. Degenerate columns (variance below `eps`) give `(0, 0)`.
fn pearson_with_grad<T: Scalar>(pred: &[T], target: &[T], eps: T) -> (T, Vec<T>) {
    let n = T::from_usize_lossy(pred.len());
    let mp = pred.iter().copied().sum::<T>() / n;
    let mt = target.iter().copied().sum::<T>() / n;
    let a: Vec<T> = pred.iter().map(|&v| v - mp).collect();
    let b: Vec<T> = target.iter().map(|&v| v - mt).collect();
    let saa = a.iter().fold(T::zero(), |s, &v| s + v * v);
    let sbb = b.iter().fold(T::zero(), |s, &v| s + v * v);
    if saa / n < eps || sbb / n < eps {
        return (T::zero(), vec![T::zero(); pred.len()]);
    }
    let sab = a.iter().zip(&b).fold(T::zero(), |s, (&x, &y)| s + x * y);
    let norm = (saa * sbb).sqrt();
    let r = sab / norm;
    // Centering drops out of the gradient because Σb = 0 and Σa = 0.
    let grad = a.iter().zip(&b).map(|(&ak, &bk)| bk / norm - r * ak / saa).collect();
    (r, grad)
}

/// `1 − PCC(ŷ, y)` over the batch. Per-dimension mode averages the six
/// correlations; degenerate dimensions count as `PCC = 0`.
pub fn pearson_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    eps: T,
    mode: CorrMode,
) -> Result<(T, Tensor<T>)> {
    check_same("pearson_loss", pred, target)?;
    if pred.rank() != 2 {
        return Err(Error::InvalidArgument(format!("pearson_loss needs [batch × dims], got {:?}", pred.shape())));
    }
    let (batch, dims) = (pred.rows(), pred.cols());
    if batch < 2 {
        return Err(Error::BatchSize { got: batch, need: 2 });
    }
    match mode {
        CorrMode::Flattened => {
            let (r, g) = pearson_with_grad(pred.data(), target.data(), eps);
            let grad = Tensor::new(pred.shape().to_vec(), g.into_iter().map(|v| -v).collect())?;
            Ok((T::one() - r, grad))
        }
        CorrMode::PerDim => {
            let inv_dims = T::one() / T::from_usize_lossy(dims);
            let mut grad = Tensor::zeros(pred.shape());
            let mut total = T::zero();
            for d in 0..dims {
                let p: Vec<T> = (0..batch).map(|r| pred.row(r)[d]).collect();
                let y: Vec<T> = (0..batch).map(|r| target.row(r)[d]).collect();
                let (r, g) = pearson_with_grad(&p, &y, eps);
                total = total + r;
                for (row, gk) in g.into_iter().enumerate() {
                    grad.row_mut(row)[d] = -gk * inv_dims;
                }
            }
            Ok((T::one() - total * inv_dims, grad))
        }
    }
}

/// Per-branch MSE terms and their λ_m-weighted gradients.
pub fn aux_loss<T: Scalar>(
    aux_preds: &[Tensor<T>; 3],
    target: &Tensor<T>,
    weights: &LossWeights,
) -> Result<(T, [T; 3], [Tensor<T>; 3])> {
    let bw = weights.branch();
    let mut terms = [T::zero(); 3];
    let mut grads = Vec::with_capacity(3);
    let mut total = T::zero();
    for (m, pred) in aux_preds.iter().enumerate() {
        let (l, g) = mse_loss(pred, target)?;
        terms[m] = l;
        total = total + T::lit(bw[m]) * l;
        grads.push(g.scale(T::lit(bw[m]))?);
    }
    let grads: [Tensor<T>; 3] = grads.try_into().map_err(|_| Error::State("aux count".into()))?;
    Ok((total, terms, grads))
}

/// Batch mean of `‖v̂ − 0.5‖²`.
pub fn vad_reg_loss<T: Scalar>(vad: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if vad.rank() != 2 {
        return Err(Error::InvalidArgument(format!("vad_reg_loss needs [batch × 3], got {:?}", vad.shape())));
    }
    let batch = T::from_usize_lossy(vad.rows());
    let centered = vad.map(|v| v - T::lit(0.5));
    let value = centered.sum_squares() / batch;
    let grad = centered.scale(T::lit(2.0) / batch)?;
    Ok((value, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub corr_mode: CorrMode,
    pub pearson_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            corr_mode: CorrMode::PerDim,
            pearson_eps: PEARSON_EPS,
        }
    }
}

/// Evaluates every term on one batch and returns gradients w.r.t. the model
/// outputs, ready for [`crate::model::Model::backward`].
///
/// The correlation term needs at least two samples; on a single-sample batch
/// it is reported as 0 and contributes no gradient.
pub fn total_loss<T: Scalar>(
    outputs: &ForwardOutputs<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown<T>, OutputGrads<T>)> {
    let w = &cfg.weights;
    let (mse, mut pred_grad) = mse_loss(&outputs.pred, target)?;

    let mut corr = T::zero();
    if outputs.pred.rows() >= 2 {
        let (c, g) = pearson_loss(&outputs.pred, target, T::lit(cfg.pearson_eps), cfg.corr_mode)?;
        corr = c;
        if w.corr != 0.0 {
            pred_grad.add_assign(&g.scale(T::lit(w.corr))?)?;
        }
    }

    let (_, aux_terms, aux_grads) = aux_loss(&outputs.aux, target, w)?;
    let aux_grads = aux_grads.map(|g| g.scale(T::lit(w.aux)).expect("finite aux gradient"));

    let (vad, vad_grad) = match &outputs.vad {
        Some(v) => {
            let (l, g) = vad_reg_loss(v)?;
            (l, Some(g.scale(T::lit(w.vad))?))
        }
        None => (T::zero(), None),
    };

    let breakdown = LossBreakdown::compose(mse, corr, aux_terms, vad, w);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok((
        breakdown,
        OutputGrads {
            pred: pred_grad,
            aux: aux_grads,
            vad: vad_grad,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn mse_cases() {
        let y = Tensor::full(&[3, 6], 0.3);
        assert_eq!(mse_loss(&y, &y).unwrap().0, 0.0);
        let ones = Tensor::full(&[2, 6], 1.0);
        assert_eq!(mse_loss(&ones, &Tensor::zeros(&[2, 6])).unwrap().0, 1.0);
        let mut pred: Tensor = Tensor::zeros(&[1, 6]);
        pred.data_mut()[2] = 0.3;
        let (l, _): (f64, _) = mse_loss(&pred, &Tensor::zeros(&[1, 6])).unwrap();
        assert!((l - 0.015).abs() < 1e-15);
        assert!(mse_loss(&pred, &Tensor::zeros(&[2, 6])).is_err());
    }

    #[test]
    fn pearson_loss_perfect_anti_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = random(&[8, 6], 0.0, 1.0, &mut rng);
        let (l, _) = pearson_loss(&y, &y, 1e-8, CorrMode::PerDim).unwrap();
        assert!(l.abs() < 1e-12);
        let anti = y.map(|v| 1.0 - v);
        let (l, _) = pearson_loss(&anti, &y, 1e-8, CorrMode::PerDim).unwrap();
        assert!((l - 2.0).abs() < 1e-12);
        let (l, g) = pearson_loss(&Tensor::full(&[8, 6], 0.4), &y, 1e-8, CorrMode::PerDim).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g.sum_squares(), 0.0);
        assert!(matches!(
            pearson_loss(&Tensor::zeros(&[1, 6]), &Tensor::zeros(&[1, 6]), 1e-8, CorrMode::PerDim),
            Err(Error::BatchSize { got: 1, need: 2 })
        ));
    }

    #[test]
    fn aux_cases() {
        let y: Tensor = Tensor::zeros(&[1, 6]);
        let mut p: Tensor = Tensor::zeros(&[1, 6]);
        p.data_mut()[0] = 0.3;
        let preds = [p.clone(), p.clone(), p];
        let (l, terms, _) = aux_loss(&preds, &y, &LossWeights::default()).unwrap();
        assert!((l - 0.045).abs() < 1e-15);
        assert!(terms.iter().all(|t| (t - 0.015).abs() < 1e-15));
        let (l, _, _) = aux_loss(&preds, &y, &LossWeights::zero()).unwrap();
        assert_eq!(l, 0.0);
        let exact = [y.clone(), y.clone(), y.clone()];
        assert_eq!(aux_loss(&exact, &y, &LossWeights::default()).unwrap().0, 0.0);
    }

    #[test]
    fn vad_cases() {
        let v = |a: [f64; 3]| Tensor::from_rows(&[a]).unwrap();
        assert_eq!(vad_reg_loss(&v([0.5, 0.5, 0.5])).unwrap().0, 0.0);
        assert_eq!(vad_reg_loss(&v([1.0, 1.0, 1.0])).unwrap().0, 0.75);
        assert_eq!(vad_reg_loss(&v([0.0, 0.5, 1.0])).unwrap().0, 0.5);
    }

    #[test]
    fn compose_cases() {
        let w = LossWeights {
            corr: 1.0,
            aux: 1.0,
            vad: 1.0,
            visual: 1.0,
            audio: 0.0,
            text: 0.0,
        };
        let b: LossBreakdown = LossBreakdown::compose(0.1, 0.5, [0.2, 0.0, 0.0], 0.3, &w);
        assert!((b.total - 1.1).abs() < 1e-15);
        let b = LossBreakdown::compose(0.1, 0.5, [0.2, 0.1, 0.4], 0.3, &LossWeights::zero());
        assert_eq!(b.total, 0.1);
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..10 {
            let batch = 4 + seed % 3;
            let y = random(&[batch, 6], 0.0, 1.0, &mut rng);
            let x = random(&[batch, 6], 0.05, 0.95, &mut rng);
            let err = grad_check(|p: &Tensor| mse_loss(p, &y), &x, 1e-5).unwrap();
            assert!(err < 1e-6);
            for mode in [CorrMode::PerDim, CorrMode::Flattened] {
                let err = grad_check(|p: &Tensor| pearson_loss(p, &y, 1e-8, mode), &x, 1e-5).unwrap();
                assert!(err < 1e-6, "{mode:?} {err}");
            }
            let v = random(&[batch, 3], 0.05, 0.95, &mut rng);
            let err = grad_check(vad_reg_loss, &v, 1e-5).unwrap();
            assert!(err < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn pearson_loss_affine_invariance(seed in 0u64..500, a in 0.1f64..5.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random(&[10, 6], 0.0, 1.0, &mut rng);
            let p = random(&[10, 6], 0.0, 1.0, &mut rng);
            let (base, _) = pearson_loss(&p, &y, 1e-8, CorrMode::PerDim).unwrap();
            let (moved, _) = pearson_loss(&p.map(|v| a * v + b), &y, 1e-8, CorrMode::PerDim).unwrap();
            prop_assert!((base - moved).abs() < 1e-10);
            // Negating every dimension maps the loss to 2 − loss.
            let (neg, _) = pearson_loss(&p.map(|v| -v), &y, 1e-8, CorrMode::PerDim).unwrap();
            prop_assert!((neg - (2.0 - base)).abs() < 1e-10);
        }

        #[test]
        fn mse_nonnegative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random(&[5, 6], 0.0, 1.0, &mut rng);
            let p = random(&[5, 6], 0.0, 1.0, &mut rng);
            prop_assert!(mse_loss(&p, &y).unwrap().0 > 0.0);
        }

        #[test]
        fn vad_reg_bounded_by_corner_value(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random(&[4, 3], 1e-9, 1.0 - 1e-9, &mut rng);
            prop_assert!(vad_reg_loss(&v).unwrap().0 < 0.75);
        }

        #[test]
        fn breakdown_total_is_additive(mse in 0.0f64..1.0, corr in 0.0f64..2.0, a in 0.0f64..1.0, v in 0.0f64..0.75) {
            let w = LossWeights::default();
            let b = LossBreakdown::compose(mse, corr, [a, a / 2.0, a / 3.0], v, &w);
            prop_assert!((b.recompute_total(&w) - b.total).abs() <= 1e-15);
        }
    }
}
