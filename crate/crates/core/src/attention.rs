//! Attention distribution alignment between a full-precision teacher and a quantized student.
//!
//! A parameter-free (SimAM) attention map is computed per channel from each feature map,
//! turned into a probability distribution, and the student is pulled towards the teacher
//! with a KL or Jensen-Shannon divergence.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default SimAM balancing constant.
pub const SIMAM_LAMBDA: f64 = 1e-4;
/// Added to attention values before normalization so no probability is zero.
pub const EPS_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    #[default]
    None,
    Kl,
    Js,
}

impl Divergence {
    pub fn name(self) -> &'static str {
        match self {
            Divergence::None => "none",
            Divergence::Kl => "kl",
            Divergence::Js => "js",
        }
    }
}

impl std::str::FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Divergence::None),
            "kl" => Ok(Divergence::Kl),
            "js" => Ok(Divergence::Js),
            other => Err(Error::Config(format!("unknown divergence `{other}`"))),
        }
    }
}

/// Over which axes a map is normalized into a distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormDomain {
    /// One distribution per `(batch, channel)` over spatial positions.
    #[default]
    PerChannel,
    /// One distribution per batch item over channels and positions.
    Joint,
}

impl NormDomain {
    fn axes(self) -> &'static [usize] {
        match self {
            NormDomain::PerChannel => &[2, 3],
            NormDomain::Joint => &[1, 2, 3],
        }
    }

    /// Number of distributions in a `[B,C,H,W]` tensor.
    fn count(self, shape: &[usize]) -> usize {
        match self {
            NormDomain::PerChannel => shape[0] * shape[1],
            NormDomain::Joint => shape[0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub values: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDistribution {
    pub probs: Tensor,
    pub domain: NormDomain,
}

impl AttentionDistribution {
    /// Validate that every distribution sums to one and respects the floor.
    pub fn new(probs: Tensor, domain: NormDomain) -> Result<Self> {
        if probs.ndim() != 4 {
            return Err(Error::InvalidShape {
                op: "attention_distribution",
                detail: format!("{:?}", probs.shape()),
            });
        }
        let n = domain.count(probs.shape());
        let per = probs.numel() / n;
        for (i, chunk) in probs.data().chunks(per).enumerate() {
            let s: f64 = chunk.iter().sum();
            if (s - 1.0).abs() > 1e-9 || chunk.iter().any(|&p| p < EPS_FLOOR) {
                return Err(Error::InvalidArgument(format!(
                    "distribution {i} sums to {s} or is below floor"
                )));
            }
        }
        Ok(AttentionDistribution { probs, domain })
    }
}

fn check_feature(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[2] * shape[3] < 2 {
        return Err(Error::InvalidShape {
            op,
            detail: format!("need [B,C,H,W] with H*W >= 2, got {shape:?}"),
        });
    }
    Ok(())
}

/// SimAM attention: per channel, `sigmoid((x - mu)^2 / (4 (var + lambda)) + 0.5)`.
pub fn simam(tape: &mut Tape, x: Var, lambda: f64) -> Result<Var> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "SimAM lambda must be positive, got {lambda}"
        )));
    }
    let shape = tape.shape(x).to_vec();
    check_feature("simam", &shape)?;
    let (mean, var) = tape.reduce_stats(x, &[2, 3])?;
    let mean = tape.expand(mean, &shape)?;
    let centered = tape.sub(x, mean)?;
    let dev = tape.square(centered)?;
    let denom = tape.add_scalar(var, lambda)?;
    let denom = tape.scale(denom, 4.0)?;
    let denom = tape.expand(denom, &shape)?;
    let energy = tape.div(dev, denom)?;
    let energy = tape.add_scalar(energy, 0.5)?;
    tape.sigmoid(energy)
}

/// `(A + eps) / sum(A + eps)` over the normalization domain.
pub fn normalize(tape: &mut Tape, attention: Var, domain: NormDomain) -> Result<Var> {
    let shape = tape.shape(attention).to_vec();
    check_feature("normalize", &shape)?;
    let lifted = tape.add_scalar(attention, EPS_FLOOR)?;
    let total = tape.sum_axes(lifted, domain.axes())?;
    let total = tape.expand(total, &shape)?;
    tape.div(lifted, total)
}

fn check_pair(tape: &Tape, p: Var, q: Var) -> Result<()> {
    if tape.shape(p) != tape.shape(q) {
        return Err(Error::ShapeMismatch {
            op: "divergence",
            lhs: tape.shape(p).to_vec(),
            rhs: tape.shape(q).to_vec(),
        });
    }
    Ok(())
}

/// `sum P ln(P / Q)` per distribution, averaged over distributions.
pub fn kl(tape: &mut Tape, p: Var, q: Var, domain: NormDomain) -> Result<Var> {
    check_pair(tape, p, q)?;
    let n = domain.count(tape.shape(p));
    let lp = tape.ln(p)?;
    let lq = tape.ln(q)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum_all(terms)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Jensen-Shannon divergence with `M = (P + Q) / 2`, averaged over distributions.
/// Each element's two terms are added before summation so swapping `P` and `Q`
/// reproduces the same value bit for bit.
pub fn js(tape: &mut Tape, p: Var, q: Var, domain: NormDomain) -> Result<Var> {
    check_pair(tape, p, q)?;
    let n = domain.count(tape.shape(p));
    let sum = tape.add(p, q)?;
    let m = tape.scale(sum, 0.5)?;
    let lm = tape.ln(m)?;
    let lp = tape.ln(p)?;
    let lq = tape.ln(q)?;
    let dp = tape.sub(lp, lm)?;
    let dq = tape.sub(lq, lm)?;
    let tp = tape.mul(p, dp)?;
    let tq = tape.mul(q, dq)?;
    let terms = tape.add(tp, tq)?;
    let total = tape.sum_all(terms)?;
    tape.scale(total, 0.5 / n as f64)
}

pub fn divergence(tape: &mut Tape, metric: Divergence, p: Var, q: Var, domain: NormDomain) -> Result<Var> {
    match metric {
        Divergence::Kl => kl(tape, p, q, domain),
        Divergence::Js => js(tape, p, q, domain),
        Divergence::None => Err(Error::InvalidArgument("no divergence selected".into())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaSettings {
    pub metric: Divergence,
    pub lambda: f64,
    pub weight: f64,
    pub domain: NormDomain,
}

impl Default for AdaSettings {
    fn default() -> Self {
        AdaSettings {
            metric: Divergence::Js,
            lambda: SIMAM_LAMBDA,
            weight: 1.0,
            domain: NormDomain::PerChannel,
        }
    }
}

/// Weighted sum over feature pairs of `D(P_teacher || Q_student)`. Teacher features enter
/// the tape as constants, so only the student side receives gradients.
pub fn ada_loss(tape: &mut Tape, teacher: &[Tensor], student: &[Var], settings: &AdaSettings) -> Result<Var> {
    if teacher.len() != student.len() {
        return Err(Error::InvalidArgument(format!(
            "{} teacher features vs {} student features",
            teacher.len(),
            student.len()
        )));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (t, &s) in teacher.iter().zip(student) {
        if t.shape() != tape.shape(s) {
            return Err(Error::ShapeMismatch {
                op: "ada_loss",
                lhs: t.shape().to_vec(),
                rhs: tape.shape(s).to_vec(),
            });
        }
        let tv = tape.constant(t.clone());
        let at = simam(tape, tv, settings.lambda)?;
        let p = normalize(tape, at, settings.domain)?;
        let as_ = simam(tape, s, settings.lambda)?;
        let q = normalize(tape, as_, settings.domain)?;
        let d = divergence(tape, settings.metric, p, q, settings.domain)?;
        total = tape.add(total, d)?;
    }
    tape.scale(total, settings.weight)
}

pub fn simam_attention(x: &Tensor, lambda: f64) -> Result<AttentionMap> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let a = simam(&mut tape, v, lambda)?;
    Ok(AttentionMap {
        values: tape.value(a).clone(),
    })
}

pub fn normalize_to_distribution(a: &AttentionMap, domain: NormDomain) -> Result<AttentionDistribution> {
    let mut tape = Tape::new();
    let v = tape.constant(a.values.clone());
    let p = normalize(&mut tape, v, domain)?;
    Ok(AttentionDistribution {
        probs: tape.value(p).clone(),
        domain,
    })
}

fn eval_divergence(metric: Divergence, p: &AttentionDistribution, q: &AttentionDistribution) -> Result<f64> {
    if p.domain != q.domain {
        return Err(Error::InvalidArgument("distributions use different domains".into()));
    }
    let mut tape = Tape::new();
    let pv = tape.constant(p.probs.clone());
    let qv = tape.constant(q.probs.clone());
    let d = divergence(&mut tape, metric, pv, qv, p.domain)?;
    Ok(tape.value(d).item())
}

pub fn kl_divergence(p: &AttentionDistribution, q: &AttentionDistribution) -> Result<f64> {
    eval_divergence(Divergence::Kl, p, q)
}

pub fn js_divergence(p: &AttentionDistribution, q: &AttentionDistribution) -> Result<f64> {
    eval_divergence(Divergence::Js, p, q)
}
