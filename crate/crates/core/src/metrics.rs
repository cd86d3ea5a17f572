//! Evaluation metric (mean of per-dimension Pearson correlations) and
//! validation bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NUM_TARGETS;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance floor for the evaluation metric.
pub const METRIC_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

/// Population Pearson correlation, computed in one pass with running
/// co-moments. Near-constant inputs yield `0` flagged as degenerate.
pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::BatchSize { got: x.len(), need: 2 });
    }
    let (mut mx, mut my) = (0.0f64, 0.0f64);
    let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
    for (k, (&xv, &yv)) in x.iter().zip(y).enumerate() {
        let (xv, yv) = (xv.to_f64_lossy(), yv.to_f64_lossy());
        let n = (k + 1) as f64;
        let dx = xv - mx;
        let dy = yv - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (xv - mx);
        syy += dy * (yv - my);
        sxy += dx * (yv - my);
    }
    let n = x.len() as f64;
    if !(sxx / n > METRIC_EPS && syy / n > METRIC_EPS) {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    let value = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    if !value.is_finite() {
        return Err(Error::NonFinite("pearson".into()));
    }
    Ok(Correlation {
        value,
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub p: [f64; NUM_TARGETS],
    pub p_mean: f64,
    pub n: usize,
    pub degenerate_dims: Vec<usize>,
}

/// Per-column Pearson of `[N × 6]` predictions against targets, and their mean.
pub fn mean_pcc<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<EvalReport> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mean_pcc", pred.shape(), target.shape()));
    }
    if pred.rank() != 2 || pred.cols() != NUM_TARGETS {
        return Err(Error::InvalidArgument(format!("mean_pcc needs [N × 6], got {:?}", pred.shape())));
    }
    let n = pred.rows();
    if n < 2 {
        return Err(Error::BatchSize { got: n, need: 2 });
    }
    let mut p = [0.0; NUM_TARGETS];
    let mut degenerate_dims = Vec::new();
    for (d, slot) in p.iter_mut().enumerate() {
        let x: Vec<T> = (0..n).map(|r| pred.row(r)[d]).collect();
        let y: Vec<T> = (0..n).map(|r| target.row(r)[d]).collect();
        let c = pearson(&x, &y)?;
        if c.degenerate {
            degenerate_dims.push(d);
        }
        *slot = c.value;
    }
    let p_mean = p.iter().sum::<f64>() / NUM_TARGETS as f64;
    Ok(EvalReport {
        p,
        p_mean,
        n,
        degenerate_dims,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once the score has failed to strictly beat the best so far for
/// `patience` consecutive observations.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("patience must be ≥ 1".into()));
        }
        Ok(EarlyStopping {
            patience,
            best: None,
            stale: 0,
        })
    }

    /// Records the score for `epoch`; returns whether it improved and the decision.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, StopDecision) {
        let improved = match self.best {
            None => true,
            Some((_, best)) => score > best,
        };
        if improved {
            self.best = Some((epoch, score));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let decision = if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        (improved, decision)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}
