//! Per-branch gradient magnitudes at the fusion node.

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::{scene_input, SyntheticScene};
use crate::error::{Error, Result};
use crate::model::{task_loss_tape, ToyDetector};

/// Mean absolute gradient of the shallow and deep fusion inputs, read from a finished
/// backward pass. Nodes the loss never reached report zero.
pub fn branch_gradient_magnitudes(grads: &Gradients, shallow: Var, deep: Var) -> (f64, f64) {
    let mag = |v: Var| grads.get_ref(v).map_or(0.0, |g| g.mean_abs());
    (mag(shallow), mag(deep))
}

/// Running average of branch gradient magnitudes over minibatches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientProbe {
    sum_shallow: f64,
    sum_deep: f64,
    count: usize,
}

impl GradientProbe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, shallow: f64, deep: f64) {
        self.sum_shallow += shallow;
        self.sum_deep += deep;
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `(g_shallow, g_deep)` averaged over recorded minibatches.
    pub fn read(&self) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(Error::ProbeNotReady);
        }
        let n = self.count as f64;
        Ok((self.sum_shallow / n, self.sum_deep / n))
    }
}

/// Probe the task-loss gradient of `model` on one minibatch. The batch loss is the mean
/// over samples, so each per-sample gradient carries a `1 / B` factor.
pub fn probe_fusion_gradients(model: &ToyDetector, batch: &[SyntheticScene], beta: f64) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut probe = GradientProbe::new();
    let mut sum = (0.0, 0.0);
    for scene in batch {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, true);
        let x = tape.constant(scene_input(scene));
        let (_, head) = model.forward(&mut tape, &b, x)?;
        let loss = task_loss_tape(&mut tape, &head, &[scene], beta)?;
        let grads = tape.backward(loss.total)?;
        let (s, d) = branch_gradient_magnitudes(&grads, head.fusion_shallow, head.fusion_deep);
        sum.0 += s;
        sum.1 += d;
    }
    let n = batch.len() as f64;
    probe.record(sum.0 / (n * n), sum.1 / (n * n));
    probe.read()
}
