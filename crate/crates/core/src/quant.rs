//! Fake quantization with straight-through gradients: uniform, PACT, LSQ and LSQ+.
//!
//! All quantizers share one forward map,
//! `q(x) = clamp(round((x - offset) / step), q_min, q_max) * step + offset`,
//! with ties rounded to even. They differ in which of `step`, `clip` and `offset`
//! are learned and how their gradients are formed:
//!
//! * uniform: nothing learned, step fixed at calibration;
//! * PACT: the clip bound is learned and `step = clip / q_max`;
//! * LSQ: the step is learned with the gradient-scale `1 / sqrt(N q_max)`;
//! * LSQ+: LSQ plus a learned offset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound enforced on every step size after an update.
pub const STEP_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantTarget {
    Weights,
    Activations,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantizerKind {
    Uniform,
    Pact,
    Lsq,
    #[serde(rename = "lsq+")]
    LsqPlus,
}

impl QuantizerKind {
    pub fn name(self) -> &'static str {
        match self {
            QuantizerKind::Uniform => "uniform",
            QuantizerKind::Pact => "pact",
            QuantizerKind::Lsq => "lsq",
            QuantizerKind::LsqPlus => "lsq+",
        }
    }
}

impl std::str::FromStr for QuantizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(QuantizerKind::Uniform),
            "pact" => Ok(QuantizerKind::Pact),
            "lsq" => Ok(QuantizerKind::Lsq),
            "lsq+" | "lsq-plus" => Ok(QuantizerKind::LsqPlus),
            other => Err(Error::Config(format!("unknown quantizer kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub signed: bool,
    pub target: QuantTarget,
}

impl QuantConfig {
    pub fn new(bits: u32, signed: bool, target: QuantTarget) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::InvalidArgument(format!("bit-width {bits} outside [2, 8]")));
        }
        Ok(QuantConfig { bits, signed, target })
    }

    pub fn weights(bits: u32) -> Result<Self> {
        Self::new(bits, true, QuantTarget::Weights)
    }

    pub fn activations(bits: u32) -> Result<Self> {
        Self::new(bits, false, QuantTarget::Activations)
    }

    pub fn levels(&self) -> u64 {
        1 << self.bits
    }

    pub fn q_min(&self) -> f64 {
        if self.signed {
            -((1u64 << (self.bits - 1)) as f64)
        } else {
            0.0
        }
    }

    pub fn q_max(&self) -> f64 {
        if self.signed {
            ((1u64 << (self.bits - 1)) - 1) as f64
        } else {
            ((1u64 << self.bits) - 1) as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub step: f64,
    pub clip: f64,
    pub offset: f64,
    pub config: QuantConfig,
    pub kind: QuantizerKind,
}

impl QuantizerState {
    pub fn new(config: QuantConfig, kind: QuantizerKind, step: f64) -> Self {
        QuantizerState {
            step,
            clip: step * config.q_max(),
            offset: 0.0,
            config,
            kind,
        }
    }

    /// Initialize from observed values: `step = max|x| / q_max` (floored), `clip` at the
    /// 99.9th percentile, zero offset.
    pub fn calibrate(config: QuantConfig, kind: QuantizerKind, observed: &[f64]) -> Result<Self> {
        if observed.is_empty() {
            return Err(Error::Uncalibrated);
        }
        let max_abs = observed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let step = (max_abs / config.q_max()).max(STEP_FLOOR);
        let clip = percentile(observed, 0.999).max(STEP_FLOOR);
        Ok(QuantizerState {
            step,
            clip,
            offset: 0.0,
            config,
            kind,
        })
    }

    /// PACT drives its grid from the clip bound; weights under PACT fall back to uniform.
    pub fn uses_clip(&self) -> bool {
        self.kind == QuantizerKind::Pact && self.config.target == QuantTarget::Activations
    }

    pub fn effective_step(&self) -> f64 {
        if self.uses_clip() {
            self.clip / self.config.q_max()
        } else {
            self.step
        }
    }

    pub fn learns_step(&self) -> bool {
        matches!(self.kind, QuantizerKind::Lsq | QuantizerKind::LsqPlus)
    }

    pub fn learns_offset(&self) -> bool {
        self.kind == QuantizerKind::LsqPlus && self.config.target == QuantTarget::Activations
    }

    /// Keep step and clip strictly positive after an optimizer update.
    pub fn project(&mut self) {
        self.step = self.step.max(STEP_FLOOR);
        self.clip = self.clip.max(STEP_FLOOR);
    }

    /// Tape-level description of this quantizer for a tensor of `numel` elements.
    pub fn spec(&self, numel: usize) -> FakeQuantSpec {
        let (qmin, qmax) = (self.config.q_min(), self.config.q_max());
        let mode = if self.uses_clip() {
            FakeQuantMode::Clip
        } else {
            FakeQuantMode::Step {
                grad_scale: lsq_grad_scale(numel, qmax),
            }
        };
        FakeQuantSpec { qmin, qmax, mode }
    }

    /// The scalar the tape treats as this quantizer's range parameter.
    pub fn range_param(&self) -> f64 {
        if self.uses_clip() {
            self.clip
        } else {
            self.step
        }
    }
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    let (_, nth, _) = v.select_nth_unstable_by(rank, |a, b| a.total_cmp(b));
    *nth
}

/// LSQ gradient scale `1 / sqrt(N q_max)`.
pub fn lsq_grad_scale(numel: usize, q_max: f64) -> f64 {
    1.0 / (numel as f64 * q_max).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FakeQuantMode {
    /// Range parameter is the step size; its gradient carries the LSQ scale.
    Step { grad_scale: f64 },
    /// Range parameter is the PACT clip bound.
    Clip,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FakeQuantSpec {
    pub qmin: f64,
    pub qmax: f64,
    pub mode: FakeQuantMode,
}

impl FakeQuantSpec {
    fn step_and_offset(&self, param: f64, offset: f64) -> (f64, f64) {
        match self.mode {
            FakeQuantMode::Step { .. } => (param, offset),
            FakeQuantMode::Clip => (param / self.qmax, 0.0),
        }
    }
}

pub(crate) struct FakeQuantGrads {
    pub input: Vec<f64>,
    pub param: f64,
    pub offset: f64,
}

pub(crate) fn fake_quant_forward(spec: &FakeQuantSpec, x: &[f64], param: f64, offset: f64) -> Result<Vec<f64>> {
    let (step, offset) = spec.step_and_offset(param, offset);
    if !(step > 0.0) {
        return Err(Error::NonPositiveStep(step));
    }
    Ok(x.iter()
        .map(|&v| ((v - offset) / step).round_ties_even().clamp(spec.qmin, spec.qmax) * step + offset)
        .collect())
}

pub(crate) fn fake_quant_backward(
    spec: &FakeQuantSpec,
    x: &[f64],
    param: f64,
    offset: f64,
    upstream: &[f64],
) -> FakeQuantGrads {
    let (step, off) = spec.step_and_offset(param, offset);
    let mut input = vec![0.0; x.len()];
    let (mut dparam, mut doffset) = (0.0, 0.0);
    for ((&xv, &g), gi) in x.iter().zip(upstream).zip(input.iter_mut()) {
        let v = (xv - off) / step;
        let inside = v >= spec.qmin && v <= spec.qmax;
        if inside {
            *gi = g;
        }
        match spec.mode {
            FakeQuantMode::Step { .. } => {
                dparam += g * if inside {
                    v.round_ties_even() - v
                } else if v < spec.qmin {
                    spec.qmin
                } else {
                    spec.qmax
                };
                if !inside {
                    doffset += g;
                }
            }
            FakeQuantMode::Clip => {
                if xv >= param {
                    dparam += g;
                }
            }
        }
    }
    if let FakeQuantMode::Step { grad_scale } = spec.mode {
        dparam *= grad_scale;
        doffset *= grad_scale;
    }
    FakeQuantGrads {
        input,
        param: dparam,
        offset: doffset,
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn fake_quantize(x: &Tensor, q: &QuantizerState) -> Result<Tensor> {
    let spec = q.spec(x.numel());
    let data = fake_quant_forward(&spec, x.data(), q.range_param(), q.offset)?;
    Tensor::new(x.shape().to_vec(), data)
}

/// Straight-through input gradient: upstream where `(x - offset) / step` lies in
/// `[q_min, q_max]`, zero elsewhere.
pub fn ste_backward(upstream: &Tensor, x: &Tensor, q: &QuantizerState) -> Result<Tensor> {
    check_same("ste_backward", upstream, x)?;
    let g = fake_quant_backward(&q.spec(x.numel()), x.data(), q.range_param(), q.offset, upstream.data());
    Tensor::new(x.shape().to_vec(), g.input)
}

/// PACT clip gradient: sum of upstream over positions with `x >= clip`.
pub fn pact_clip_gradient(upstream: &Tensor, x: &Tensor, q: &QuantizerState) -> Result<f64> {
    check_same("pact_clip_gradient", upstream, x)?;
    if q.config.target != QuantTarget::Activations {
        return Err(Error::InvalidArgument("PACT clipping applies to activations".into()));
    }
    Ok(x.data()
        .iter()
        .zip(upstream.data())
        .filter(|(&xv, _)| xv >= q.clip)
        .map(|(_, &g)| g)
        .sum())
}

/// LSQ step gradient, including the `1 / sqrt(N q_max)` gradient scale.
pub fn lsq_step_gradient(upstream: &Tensor, x: &Tensor, q: &QuantizerState) -> Result<f64> {
    check_same("lsq_step_gradient", upstream, x)?;
    if !(q.step > 0.0) {
        return Err(Error::NonPositiveStep(q.step));
    }
    let spec = FakeQuantSpec {
        qmin: q.config.q_min(),
        qmax: q.config.q_max(),
        mode: FakeQuantMode::Step {
            grad_scale: lsq_grad_scale(x.numel(), q.config.q_max()),
        },
    };
    Ok(fake_quant_backward(&spec, x.data(), q.step, q.offset, upstream.data()).param)
}
