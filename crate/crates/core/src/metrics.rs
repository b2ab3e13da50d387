//! Per-epoch run metrics and their CSV form.
//!
//! The first line of every file is a `#` comment naming the producing config hash; the
//! second is the column header. Floats use Rust's shortest round-trip formatting, so a
//! written file parses back to the same values and identical runs give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::IOU_BINS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub total_loss: f64,
    pub ce_loss: f64,
    /// Mean squared center error (before the `beta` weight).
    pub reg_loss: f64,
    /// Mean attention divergence (before the distillation weight); zero when disabled.
    pub ada_loss: f64,
    pub accuracy: f64,
    pub center_error: f64,
    /// Mean |dL/dF| at the shallow fusion input, averaged over the epoch's minibatches.
    pub grad_shallow: f64,
    pub grad_deep: f64,
    /// Fusion weight at the end of the epoch; NaN for a plain concatenation.
    pub alpha: f64,
    pub iou_at_half: f64,
    pub iou_histogram: [usize; IOU_BINS],
}

impl EpochMetrics {
    pub fn grad_ratio(&self) -> f64 {
        self.grad_deep / self.grad_shallow
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config_hash: String,
    pub epochs: Vec<EpochMetrics>,
}

const SCALAR_COLUMNS: [&str; 12] = [
    "epoch",
    "total_loss",
    "ce_loss",
    "reg_loss",
    "ada_loss",
    "accuracy",
    "center_error",
    "grad_shallow",
    "grad_deep",
    "alpha",
    "iou_at_half",
    "iou_total",
];

pub fn columns() -> Vec<String> {
    SCALAR_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..IOU_BINS).map(|i| format!("iou_{i}")))
        .collect()
}

impl RunMetrics {
    pub fn new(config_hash: impl Into<String>) -> Self {
        RunMetrics {
            config_hash: config_hash.into(),
            epochs: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    /// Mean deep/shallow gradient ratio over the last third of the epochs (at least one).
    pub fn final_third_grad_ratio(&self) -> Option<f64> {
        let n = self.epochs.len();
        if n == 0 {
            return None;
        }
        let k = n.div_ceil(3);
        let tail = &self.epochs[n - k..];
        Some(tail.iter().map(EpochMetrics::grad_ratio).sum::<f64>() / k as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# config_hash={}", self.config_hash);
        let _ = writeln!(out, "{}", columns().join(","));
        for e in &self.epochs {
            let total: usize = e.iou_histogram.iter().sum();
            let mut row = vec![
                e.epoch.to_string(),
                e.total_loss.to_string(),
                e.ce_loss.to_string(),
                e.reg_loss.to_string(),
                e.ada_loss.to_string(),
                e.accuracy.to_string(),
                e.center_error.to_string(),
                e.grad_shallow.to_string(),
                e.grad_deep.to_string(),
                e.alpha.to_string(),
                e.iou_at_half.to_string(),
                total.to_string(),
            ];
            row.extend(e.iou_histogram.iter().map(|c| c.to_string()));
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Config(format!("metrics line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
        let config_hash = first
            .strip_prefix("# config_hash=")
            .ok_or_else(|| bad(1, "missing config hash comment"))?
            .to_string();
        let (_, header) = lines.next().ok_or_else(|| bad(2, "missing header"))?;
        if header != columns().join(",") {
            return Err(bad(2, "unexpected columns"));
        }
        let mut epochs = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != SCALAR_COLUMNS.len() + IOU_BINS {
                return Err(bad(i + 1, "wrong field count"));
            }
            let f = |k: usize| fields[k].parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
            let u = |k: usize| fields[k].parse::<usize>().map_err(|_| bad(i + 1, "bad count"));
            let mut iou_histogram = [0usize; IOU_BINS];
            for (b, slot) in iou_histogram.iter_mut().enumerate() {
                *slot = u(SCALAR_COLUMNS.len() + b)?;
            }
            epochs.push(EpochMetrics {
                epoch: u(0)?,
                total_loss: f(1)?,
                ce_loss: f(2)?,
                reg_loss: f(3)?,
                ada_loss: f(4)?,
                accuracy: f(5)?,
                center_error: f(6)?,
                grad_shallow: f(7)?,
                grad_deep: f(8)?,
                alpha: f(9)?,
                iou_at_half: f(10)?,
                iou_histogram,
            });
        }
        Ok(RunMetrics { config_hash, epochs })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}
