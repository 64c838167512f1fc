//! Run metrics: checkpoint series, evaluation helpers, CSV/JSON emission.
//!
//! Checkpoints are taken at geometrically spaced sample counts. Wall-clock
//! covers training work only — engines pause their timer while evaluating —
//! so reported throughput excludes evaluation cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{full_objective, LossKind, Regularizer};
use crate::sparse::{Dataset, FeatureStats};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub samples: u64,
    pub seconds: f64,
    pub objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_loss: Option<f64>,
    /// objective − F_* when the optimal value is known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub config: serde_json::Value,
    pub checkpoints: Vec<Checkpoint>,
    /// Mean squared per-example gradient norm at the final iterate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    pub train_seconds: f64,
    pub samples_per_sec: f64,
}

impl RunMetrics {
    pub fn new(method: impl Into<String>, config: serde_json::Value) -> Self {
        RunMetrics {
            method: method.into(),
            config,
            checkpoints: Vec::new(),
            sigma2: None,
            train_seconds: 0.0,
            samples_per_sec: 0.0,
        }
    }

    pub fn final_checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    /// Checkpoints must be ordered by samples with non-decreasing seconds.
    pub fn validate(&self) -> Result<()> {
        for pair in self.checkpoints.windows(2) {
            if pair[1].samples < pair[0].samples {
                return Err(Error::InvalidInput("checkpoints out of order".into()));
            }
            if pair[1].seconds < pair[0].seconds {
                return Err(Error::InvalidInput("wall-clock went backwards".into()));
            }
        }
        Ok(())
    }

    /// CSV table: always `samples,seconds,objective,test_error`; `test_loss`
    /// and `gap` columns appear when any checkpoint carries them. Missing
    /// optional cells serialize as `nan` so the table re-parses as floats.
    pub fn to_csv(&self) -> String {
        let with_loss = self.checkpoints.iter().any(|c| c.test_loss.is_some());
        let with_gap = self.checkpoints.iter().any(|c| c.gap.is_some());
        let mut out = String::from("samples,seconds,objective,test_error");
        if with_loss {
            out.push_str(",test_loss");
        }
        if with_gap {
            out.push_str(",gap");
        }
        out.push('\n');
        // Lowercase non-finite tokens (nan/inf/-inf) parse back as floats.
        let cell = |v: f64| {
            if v.is_finite() {
                v.to_string()
            } else {
                v.to_string().to_lowercase()
            }
        };
        for c in &self.checkpoints {
            let te = c.test_error.unwrap_or(f64::NAN);
            out.push_str(&format!(
                "{},{:.6},{},{}",
                c.samples,
                c.seconds,
                cell(c.objective),
                cell(te)
            ));
            if with_loss {
                out.push_str(&format!(",{}", cell(c.test_loss.unwrap_or(f64::NAN))));
            }
            if with_gap {
                out.push_str(&format!(",{}", cell(c.gap.unwrap_or(f64::NAN))));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("metrics serialization failed: {e}")))
    }
}

/// Parses a numeric CSV table produced by `to_csv` (or any header + float
/// rows). Returns the header names and row-major values.
pub fn parse_numeric_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, message: "empty table".into() })?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(names.len());
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad number `{cell}`"),
            })?;
            row.push(v);
        }
        if row.len() != names.len() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {} cells, got {}", names.len(), row.len()),
            });
        }
        rows.push(row);
    }
    Ok((names, rows))
}

/// Sample counts {0, start, 2·start, 4·start, …} ∪ {budget}.
pub fn geometric_schedule(start: u64, budget: u64) -> Vec<u64> {
    let mut points = vec![0];
    let mut s = start.max(1);
    while s < budget {
        points.push(s);
        s = s.saturating_mul(2);
    }
    points.push(budget);
    points.dedup();
    points
}

/// Fraction of misclassified examples using sign(xᵀw) against sign(label).
pub fn misclassification(data: &Dataset, w: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let wrong = data
        .examples()
        .iter()
        .filter(|ex| {
            let pred = if ex.features.dot(w) >= 0.0 { 1.0 } else { -1.0 };
            pred * ex.label < 0.0
        })
        .count();
    Ok(wrong as f64 / data.len() as f64)
}

/// Mean squared residual (regression test error).
pub fn mean_squared_error(data: &Dataset, w: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sum: f64 = data
        .examples()
        .iter()
        .map(|ex| {
            let r = ex.features.dot(w) - ex.label;
            r * r
        })
        .sum();
    Ok(sum / data.len() as f64)
}

/// Mean loss value on a dataset (no penalty).
pub fn mean_loss(data: &Dataset, kind: LossKind, w: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sum: f64 = data
        .examples()
        .iter()
        .map(|ex| kind.value(ex.features.dot(w), ex.label))
        .sum();
    Ok(sum / data.len() as f64)
}

/// Shared checkpoint evaluator: training objective, optional held-out error
/// and loss, optional gap to a known optimum.
pub struct Evaluator<'a> {
    pub train: &'a Dataset,
    pub kind: LossKind,
    pub reg: Regularizer,
    pub stats: Option<&'a FeatureStats>,
    pub test: Option<&'a Dataset>,
    pub fstar: Option<f64>,
}

impl Evaluator<'_> {
    pub fn checkpoint(&self, samples: u64, seconds: f64, w: &[f64]) -> Result<Checkpoint> {
        let objective = full_objective(self.train, self.kind, w, &self.reg, self.stats)?;
        let (test_error, test_loss) = match self.test {
            Some(test) if !test.is_empty() => {
                let err = if self.kind.is_classification() {
                    misclassification(test, w)?
                } else {
                    mean_squared_error(test, w)?
                };
                (Some(err), Some(mean_loss(test, self.kind, w)?))
            }
            _ => (None, None),
        };
        Ok(Checkpoint {
            samples,
            seconds,
            objective,
            test_error,
            test_loss,
            gap: self.fstar.map(|f| objective - f),
        })
    }
}
