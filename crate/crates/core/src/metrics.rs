//! Confusion matrices, per-class IoU, mIoU and the effectiveness score.

use serde::Serialize;

use crate::error::{Error, Result};

/// `k x k` counts; entry `(i, j)` is pixels of true class `i` predicted `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        crate::error::check_dim("confusion_matrix", crate::error::Axis::Length, k * k, counts.len())?;
        Ok(Self { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one labelled image. Pixels with `valid[i] == false` are skipped.
    pub fn accumulate(&mut self, truth: &[u8], pred: &[u8], valid: Option<&[bool]>) -> Result<()> {
        crate::error::check_dim("confusion_matrix", crate::error::Axis::Length, truth.len(), pred.len())?;
        if let Some(v) = valid {
            crate::error::check_dim("confusion_matrix.valid", crate::error::Axis::Length, truth.len(), v.len())?;
        }
        for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
            if valid.is_some_and(|v| !v[i]) {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.k || p >= self.k {
                return Err(Error::Config(format!(
                    "label {} out of range for {} classes",
                    t.max(p),
                    self.k
                )));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        crate::error::check_dim("confusion_matrix.merge", crate::error::Axis::Length, self.k, other.k)?;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class IoU (`None` when the class is absent from both truth and
/// prediction) and the mean over the defined classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    if cm.k < 2 {
        return Err(Error::UndefinedMetric(format!("mIoU needs at least 2 classes, got {}", cm.k)));
    }
    if cm.total() == 0 {
        return Err(Error::UndefinedMetric("confusion matrix is empty".into()));
    }
    let per_class: Vec<Option<f64>> = (0..cm.k)
        .map(|i| {
            let tp = cm.get(i, i);
            let row: u64 = (0..cm.k).map(|j| cm.get(i, j)).sum();
            let col: u64 = (0..cm.k).map(|j| cm.get(j, i)).sum();
            let denom = row + col - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(IouReport {
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
    })
}

/// `diff / (log10(params_m) * gflops) * 100`.
pub fn effectiveness(diff_miou: f64, params_millions: f64, gflops: f64) -> Result<f64> {
    if !(params_millions > 1.0) {
        return Err(Error::Domain(format!(
            "effectiveness needs more than 1M parameters (log10 must be positive), got {params_millions}M"
        )));
    }
    if !(gflops > 0.0) {
        return Err(Error::Domain(format!("effectiveness needs positive GFLOPs, got {gflops}")));
    }
    Ok(diff_miou / (params_millions.log10() * gflops) * 100.0)
}
