//! Linear-prediction losses φ(xᵀw, y), full objectives with optional ridge
//! penalties, and the curvature constants used by step-size and schedule rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{Dataset, FeatureStats};

/// Numerically stable sigmoid 1/(1+e^{-u}).
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// ½(xᵀw − y)², real labels.
    Squared,
    /// log(1 + exp(−y·xᵀw)), labels in {−1, +1}.
    Logistic,
}

impl LossKind {
    pub fn value(self, pred: f64, label: f64) -> f64 {
        match self {
            LossKind::Squared => {
                let r = pred - label;
                0.5 * r * r
            }
            LossKind::Logistic => {
                let t = -label * pred;
                // log(1+e^t) without overflow for large t.
                if t > 35.0 {
                    t
                } else {
                    t.exp().ln_1p()
                }
            }
        }
    }

    /// dφ/d(pred). The per-example gradient in `w` is this scalar times the
    /// feature vector.
    pub fn derivative(self, pred: f64, label: f64) -> f64 {
        match self {
            LossKind::Squared => pred - label,
            LossKind::Logistic => -label * sigmoid(-label * pred),
        }
    }

    /// Uniform upper bound on φ'' (1 for squared, 1/4 for logistic).
    pub fn smoothness(self) -> f64 {
        match self {
            LossKind::Squared => 1.0,
            LossKind::Logistic => 0.25,
        }
    }

    /// Whether labels are class signs (error measured as misclassification)
    /// rather than real targets (error measured as mean squared error).
    pub fn is_classification(self) -> bool {
        matches!(self, LossKind::Logistic)
    }
}

/// Lower bound on the logistic φ'' over margins with |xᵀw| ≤ `max_abs_margin`.
/// φ'' = σ(z)(1−σ(z)) is smallest at the extreme margin.
pub fn logistic_curvature_floor(max_abs_margin: f64) -> f64 {
    let s = sigmoid(max_abs_margin.abs());
    s * (1.0 - s)
}

/// Geometry of the ridge penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Metric {
    /// (l2/2)·‖w‖².
    Identity,
    /// (l2/2)·Σₖ p(k)·w(k)², weighting coordinates by activity probability.
    DiagP,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Regularizer {
    pub l2: f64,
    pub metric: L2Metric,
}

impl Regularizer {
    pub fn none() -> Self {
        Regularizer { l2: 0.0, metric: L2Metric::Identity }
    }

    pub fn new(l2: f64, metric: L2Metric) -> Self {
        Regularizer { l2, metric }
    }

    /// Per-coordinate metric weight (1 or p(k)).
    pub fn weight(&self, k: usize, stats: Option<&FeatureStats>) -> f64 {
        match self.metric {
            L2Metric::Identity => 1.0,
            L2Metric::DiagP => stats.map(|s| s.p(k)).unwrap_or(0.0),
        }
    }

    /// Penalty value (l2/2)·‖w‖²_metric.
    pub fn penalty(&self, w: &[f64], stats: Option<&FeatureStats>) -> Result<f64> {
        if self.l2 == 0.0 {
            return Ok(0.0);
        }
        if matches!(self.metric, L2Metric::DiagP) && stats.is_none() {
            return Err(Error::InvalidConfig(
                "diag-p regularization metric needs feature statistics".into(),
            ));
        }
        let mut acc = 0.0;
        for (k, &wk) in w.iter().enumerate() {
            acc += self.weight(k, stats) * wk * wk;
        }
        Ok(0.5 * self.l2 * acc)
    }
}

/// Mean loss over a dataset plus the ridge penalty.
pub fn full_objective(
    data: &Dataset,
    kind: LossKind,
    w: &[f64],
    reg: &Regularizer,
    stats: Option<&FeatureStats>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = 0.0;
    for ex in data.examples() {
        acc += kind.value(ex.features.dot(w), ex.label);
    }
    Ok(acc / data.len() as f64 + reg.penalty(w, stats)?)
}

/// Mean squared per-example gradient norm E‖φ'(xᵀw)·x‖² over the dataset
/// (data term only). Reported as the gradient-variance proxy σ².
pub fn gradient_variance(data: &Dataset, kind: LossKind, w: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = 0.0;
    for ex in data.examples() {
        let d = kind.derivative(ex.features.dot(w), ex.label);
        acc += d * d * ex.features.squared_norm();
    }
    Ok(acc / data.len() as f64)
}

/// Curvature constants for sparse linear prediction.
///
/// `curv_lo`/`curv_hi` bound φ'' on the working region; `g2` bounds ‖x‖²;
/// the composites are `mu = curv_lo·(1−pmax)`, `l = curv_hi·(1+Σp)`,
/// `r2 = g2·curv_hi`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvatureConstants {
    pub curv_lo: f64,
    pub curv_hi: f64,
    pub g2: f64,
    pub mu: f64,
    pub l: f64,
    pub r2: f64,
}

impl CurvatureConstants {
    /// Replaces the φ'' lower bound (e.g. a logistic floor from a margin
    /// bound, or an l2 strength) and recomputes `mu`.
    pub fn with_curvature_floor(mut self, curv_lo: f64, pmax: f64) -> Self {
        self.curv_lo = curv_lo;
        self.mu = curv_lo * (1.0 - pmax);
        self
    }

    /// Folds a ridge term into (mu, l). A diag-p penalty adds exactly l2 to
    /// both; an identity penalty adds l2 to mu and l2/pmin to l (p(k) ≤ 1
    /// below, p(k) ≥ pmin above).
    pub fn with_l2(mut self, reg: &Regularizer, stats: &FeatureStats) -> Self {
        if reg.l2 > 0.0 {
            match reg.metric {
                L2Metric::DiagP => {
                    self.mu += reg.l2;
                    self.l += reg.l2;
                }
                L2Metric::Identity => {
                    self.mu += reg.l2;
                    self.l += reg.l2 / stats.pmin();
                }
            }
        }
        self
    }
}

/// Computes the curvature constants from data statistics. For the logistic
/// loss the φ'' lower bound is not derivable from data alone and defaults to
/// 0; callers with a margin bound can install one via `with_curvature_floor`
/// (see `logistic_curvature_floor`), and schedules that need strong convexity
/// typically take it from the l2 strength instead.
pub fn curvature_constants(
    kind: LossKind,
    data: &Dataset,
    stats: &FeatureStats,
) -> CurvatureConstants {
    let curv_hi = kind.smoothness();
    let curv_lo = match kind {
        LossKind::Squared => 1.0,
        LossKind::Logistic => 0.0,
    };
    let g2 = data
        .examples()
        .iter()
        .map(|e| e.features.squared_norm())
        .fold(0.0f64, f64::max);
    CurvatureConstants {
        curv_lo,
        curv_hi,
        g2,
        mu: curv_lo * (1.0 - stats.pmax()),
        l: curv_hi * (1.0 + stats.sum_p()),
        r2: g2 * curv_hi,
    }
}
