//! Gradient-aware balanced feature fusion.
//!
//! The shallow branch is scaled by `alpha = sigmoid(alpha_logit)`, the deep branch by
//! `1 - alpha`, the two are concatenated along channels and every spatial position is
//! normalized across all channels without affine parameters. The normalization
//! re-centers and rescales the gradient reaching both branches.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance floor inside the square root of the position-wise normalization.
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionNode {
    pub alpha_logit: f64,
    /// Position-wise normalization after concatenation.
    pub normalize: bool,
    /// `false` reduces the node to a plain channel concatenation (the baseline).
    pub balanced: bool,
    pub shallow_channels: usize,
    pub deep_channels: usize,
}

impl FusionNode {
    pub fn balanced(shallow_channels: usize, deep_channels: usize) -> Self {
        FusionNode {
            alpha_logit: 0.0,
            normalize: true,
            balanced: true,
            shallow_channels,
            deep_channels,
        }
    }

    pub fn plain_concat(shallow_channels: usize, deep_channels: usize) -> Self {
        FusionNode {
            alpha_logit: 0.0,
            normalize: false,
            balanced: false,
            shallow_channels,
            deep_channels,
        }
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.alpha_logit)
    }

    pub fn out_channels(&self) -> usize {
        self.shallow_channels + self.deep_channels
    }
}

/// Fuse shallow `[B,Cs,H,W]` and deep `[B,Cd,H,W]` features. `alpha_logit` is the tape
/// variable holding the node's logit; it is ignored for a plain concatenation.
pub fn fuse(tape: &mut Tape, shallow: Var, deep: Var, node: &FusionNode, alpha_logit: Var) -> Result<Var> {
    let (ss, ds) = (tape.shape(shallow).to_vec(), tape.shape(deep).to_vec());
    if ss.len() != 4 || ds.len() != 4 || ss[0] != ds[0] || ss[2..] != ds[2..] {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: ss,
            rhs: ds,
        });
    }
    if ss[1] != node.shallow_channels || ds[1] != node.deep_channels {
        return Err(Error::InvalidShape {
            op: "fuse",
            detail: format!(
                "node expects ({}, {}) channels, got ({}, {})",
                node.shallow_channels, node.deep_channels, ss[1], ds[1]
            ),
        });
    }
    if !node.balanced {
        return tape.concat_channels(shallow, deep);
    }
    let alpha = tape.sigmoid(alpha_logit)?;
    let neg = tape.scale(alpha, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let fs = tape.mul(shallow, alpha)?;
    let fd = tape.mul(deep, one_minus)?;
    let cat = tape.concat_channels(fs, fd)?;
    if node.normalize {
        layernorm_positionwise(tape, cat)
    } else {
        Ok(cat)
    }
}

/// Normalize each `(b, :, i, j)` channel vector to zero mean and unit (population) variance.
pub fn layernorm_positionwise(tape: &mut Tape, h: Var) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 4 || shape[1] < 2 {
        return Err(Error::InvalidShape {
            op: "layernorm_positionwise",
            detail: format!("need [B, C>=2, H, W], got {shape:?}"),
        });
    }
    let (mean, var) = tape.reduce_stats(h, &[1])?;
    let mean = tape.expand(mean, &shape)?;
    let centered = tape.sub(h, mean)?;
    let var = tape.add_scalar(var, LN_EPS)?;
    let std = tape.sqrt(var)?;
    let std = tape.expand(std, &shape)?;
    tape.div(centered, std)
}

/// Forward-only convenience wrapper over [`layernorm_positionwise`].
pub fn layernorm_positionwise_tensor(h: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(h.clone());
    let out = layernorm_positionwise(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

/// Per-position `(mu, sigma)` over channels of `[B,C,H,W]`, in position order.
fn position_stats(h: &Tensor) -> Vec<(f64, f64)> {
    let s = h.shape();
    let (batch, ch, plane) = (s[0], s[1], s[2] * s[3]);
    let d = h.data();
    let mut out = Vec::with_capacity(batch * plane);
    for b in 0..batch {
        for p in 0..plane {
            let at = |c: usize| d[(b * ch + c) * plane + p];
            let mu = (0..ch).map(at).sum::<f64>() / ch as f64;
            let var = (0..ch).map(|c| (at(c) - mu).powi(2)).sum::<f64>() / ch as f64;
            out.push((mu, (var + LN_EPS).sqrt()));
        }
    }
    out
}

fn check_pair(op: &'static str, upstream: &Tensor, h: &Tensor) -> Result<()> {
    if upstream.shape() != h.shape() || h.ndim() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: upstream.shape().to_vec(),
            rhs: h.shape().to_vec(),
        });
    }
    Ok(())
}

/// The closed-form normalization gradient with only the mean-subtraction term:
/// `dL/dh_k = (g_k - mean_j g_j) / sigma`. The full gradient additionally carries the
/// term through `sigma`, see [`layernorm_sigma_path_term`].
pub fn layernorm_backward_analytic(upstream: &Tensor, h: &Tensor) -> Result<Tensor> {
    check_pair("layernorm_backward_analytic", upstream, h)?;
    let s = h.shape();
    let (batch, ch, plane) = (s[0], s[1], s[2] * s[3]);
    let stats = position_stats(h);
    let g = upstream.data();
    let mut out = Tensor::zeros(s);
    for b in 0..batch {
        for p in 0..plane {
            let (_, sigma) = stats[b * plane + p];
            let idx = |c: usize| (b * ch + c) * plane + p;
            let mean_g = (0..ch).map(|c| g[idx(c)]).sum::<f64>() / ch as f64;
            for c in 0..ch {
                out.data_mut()[idx(c)] = (g[idx(c)] - mean_g) / sigma;
            }
        }
    }
    Ok(out)
}

/// The gradient contribution through `sigma` that the mean-only form omits:
/// `-LN(h_k) * mean_j(g_j LN(h_j)) / sigma`. Zero when the upstream gradient is
/// orthogonal to `LN(h)` at every position.
pub fn layernorm_sigma_path_term(upstream: &Tensor, h: &Tensor) -> Result<Tensor> {
    check_pair("layernorm_sigma_path_term", upstream, h)?;
    let s = h.shape();
    let (batch, ch, plane) = (s[0], s[1], s[2] * s[3]);
    let stats = position_stats(h);
    let (g, hd) = (upstream.data(), h.data());
    let mut out = Tensor::zeros(s);
    for b in 0..batch {
        for p in 0..plane {
            let (mu, sigma) = stats[b * plane + p];
            let idx = |c: usize| (b * ch + c) * plane + p;
            let norm = |c: usize| (hd[idx(c)] - mu) / sigma;
            let proj = (0..ch).map(|c| g[idx(c)] * norm(c)).sum::<f64>() / ch as f64;
            for c in 0..ch {
                out.data_mut()[idx(c)] = -norm(c) * proj / sigma;
            }
        }
    }
    Ok(out)
}

/// Models exposing fusion nodes.
pub trait FusionSites {
    fn fusion_nodes(&self) -> Vec<&FusionNode>;
    fn fusion_nodes_mut(&mut self) -> Vec<&mut FusionNode>;
}

pub fn toggle_normalization<M: FusionSites>(model: &mut M) {
    for node in model.fusion_nodes_mut() {
        node.normalize = !node.normalize;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StripReport {
    /// `(metric name, with normalization, without normalization)`.
    pub rows: Vec<(String, f64, f64)>,
}

impl StripReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Disable normalization on every fusion node and measure what that costs.
/// `evaluate` returns named metrics for a model.
pub fn strip_normalization<M, F>(model: &M, evaluate: F) -> Result<(M, StripReport)>
where
    M: FusionSites + Clone,
    F: Fn(&M) -> Result<Vec<(String, f64)>>,
{
    let mut stripped = model.clone();
    if model.fusion_nodes().is_empty() {
        return Ok((stripped, StripReport::default()));
    }
    for node in stripped.fusion_nodes_mut() {
        node.normalize = false;
    }
    let before = evaluate(model)?;
    let after = evaluate(&stripped)?;
    let rows = before
        .into_iter()
        .zip(after)
        .map(|((name, b), (_, a))| (name, b, a))
        .collect();
    Ok((stripped, StripReport { rows }))
}
