//! Layer-wise quantization error and a check of its first-order propagation model.
//!
//! For each layer `l` the analyzer compares paired full-precision and fake-quantized
//! forwards and records `|delta_l| / |x_l|`. It then checks that the fusion-and-head
//! map `f` is well described by its Jacobian: for a perturbation `t d`, the residual
//! `|f(x + t d) - f(x) - t J d|` should scale as `t^2`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{scene_input, SyntheticScene};
use crate::error::{Error, Result};
use crate::model::{init_quantizers, QuantSetup, ToyDetector};
use crate::quant::QuantizerKind;
use crate::tensor::Tensor;

/// Bit-width meaning "no quantization".
pub const FULL_PRECISION_BITS: u32 = 32;
/// Perturbation sizes relative to `|x|` used for the scaling sweep.
pub const SWEEP: [f64; 4] = [0.04, 0.02, 0.01, 0.005];
/// Central-difference step for the directional derivative, relative to `|x|`.
const JVP_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub name: String,
    /// `|delta_l| / |x_l|` per input.
    pub relative: Vec<f64>,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderCheck {
    pub scales: Vec<f64>,
    /// Median residual over inputs at each scale, relative to `|f(x)|`.
    pub residuals: Vec<f64>,
    /// Least-squares slope of log residual against log scale, one per input.
    pub exponents: Vec<f64>,
    pub median_exponent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub bits: u32,
    pub layers: Vec<LayerError>,
    pub first_order: FirstOrderCheck,
}

impl ErrorReport {
    pub fn layer(&self, name: &str) -> Option<&LayerError> {
        self.layers.iter().find(|l| l.name == name)
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

struct Trace {
    layers: Vec<(String, Tensor)>,
    shallow: Tensor,
    deep: Tensor,
}

fn trace(model: &ToyDetector, scene: &SyntheticScene) -> Result<Trace> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let x = tape.constant(scene_input(scene));
    let (bb, head) = model.forward(&mut tape, &b, x)?;
    let mut layers: Vec<(String, Tensor)> = bb
        .layers
        .iter()
        .map(|(n, v)| (n.clone(), tape.value(*v).clone()))
        .collect();
    let out: Vec<f64> = tape
        .value(head.logits)
        .data()
        .iter()
        .chain(tape.value(head.reg_pre).data())
        .copied()
        .collect();
    layers.push(("head".into(), Tensor::new(vec![out.len()], out)?));
    Ok(Trace {
        layers,
        shallow: tape.value(bb.shallow).clone(),
        deep: tape.value(bb.deep).clone(),
    })
}

/// Class probabilities and center from given fusion inputs.
fn head_map(model: &ToyDetector, shallow: &Tensor, deep: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let s = tape.constant(shallow.clone());
    let d = tape.constant(deep.clone());
    let h = model.head(&mut tape, &b, s, d)?;
    Ok(tape
        .value(h.probs)
        .data()
        .iter()
        .chain(tape.value(h.center).data())
        .copied()
        .collect())
}

fn axpy(x: &Tensor, t: f64, d: &Tensor) -> Tensor {
    x.zip_map(d, |a, b| a + t * b).expect("same shape")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Paired full-precision / quantized forwards over `inputs` at `bits` (weights and
/// activations; 32 disables quantization), plus the first-order check on the
/// fusion-and-head sub-path. All layers, including the first, use `bits`.
pub fn analyze_error_propagation(
    model: &ToyDetector,
    inputs: &[SyntheticScene],
    bits: u32,
    kind: QuantizerKind,
) -> Result<ErrorReport> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if bits != FULL_PRECISION_BITS && !(2..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bits must be in [2, 8] or 32, got {bits}"
        )));
    }
    let fp = model.without_quantizers();
    let quantized = if bits == FULL_PRECISION_BITS {
        fp.clone()
    } else {
        let setup = QuantSetup {
            weight_bits: bits,
            act_bits: bits,
            kind,
            extremes_8bit: false,
        };
        init_quantizers(&fp, &setup, inputs)?
    };

    let mut layers: Vec<LayerError> = Vec::new();
    let mut exponents = Vec::with_capacity(inputs.len());
    let mut residuals: Vec<Vec<f64>> = vec![Vec::new(); SWEEP.len()];
    for (i, scene) in inputs.iter().enumerate() {
        let a = trace(&fp, scene)?;
        let b = trace(&quantized, scene)?;
        for (k, ((name, x), (_, xq))) in a.layers.iter().zip(&b.layers).enumerate() {
            if layers.len() <= k {
                layers.push(LayerError {
                    name: name.clone(),
                    relative: Vec::new(),
                    median: 0.0,
                });
            }
            let delta = norm(&x.zip_map(xq, |u, v| v - u)?.into_data());
            let base = norm(x.data());
            layers[k].relative.push(if base > 0.0 { delta / base } else { delta });
        }

        // Direction: the quantization error reaching the fusion inputs, or a fixed
        // pseudo-random direction when there is none.
        let (ds, dd) = {
            let ds = a.shallow.zip_map(&b.shallow, |u, v| v - u)?;
            let dd = a.deep.zip_map(&b.deep, |u, v| v - u)?;
            if norm(ds.data()) + norm(dd.data()) > 0.0 {
                (ds, dd)
            } else {
                let wave = |j: usize| ((j * 7919 + i * 104729) as f64).sin();
                (
                    Tensor::from_fn(a.shallow.shape(), wave),
                    Tensor::from_fn(a.deep.shape(), |j| wave(j + 17)),
                )
            }
        };
        let xnorm = (norm(a.shallow.data()).powi(2) + norm(a.deep.data()).powi(2)).sqrt();
        let dnorm = (norm(ds.data()).powi(2) + norm(dd.data()).powi(2)).sqrt();
        let (ds, dd) = (ds.map(|v| v / dnorm), dd.map(|v| v / dnorm));
        let f0 = head_map(&fp, &a.shallow, &a.deep)?;
        let h = JVP_STEP * xnorm;
        let fp_plus = head_map(&fp, &axpy(&a.shallow, h, &ds), &axpy(&a.deep, h, &dd))?;
        let fp_minus = head_map(&fp, &axpy(&a.shallow, -h, &ds), &axpy(&a.deep, -h, &dd))?;
        let jvp: Vec<f64> = fp_plus
            .iter()
            .zip(&fp_minus)
            .map(|(p, m)| (p - m) / (2.0 * h))
            .collect();
        let mut r = Vec::with_capacity(SWEEP.len());
        for (k, &s) in SWEEP.iter().enumerate() {
            let t = s * xnorm;
            let ft = head_map(&fp, &axpy(&a.shallow, t, &ds), &axpy(&a.deep, t, &dd))?;
            let res: Vec<f64> = ft
                .iter()
                .zip(&f0)
                .zip(&jvp)
                .map(|((y, y0), j)| y - y0 - t * j)
                .collect();
            let rel = norm(&res) / norm(&f0);
            residuals[k].push(rel);
            r.push(rel);
        }
        exponents.push(log_log_slope(&SWEEP, &r));
    }
    for l in &mut layers {
        l.median = median(&l.relative);
    }
    Ok(ErrorReport {
        bits,
        layers,
        first_order: FirstOrderCheck {
            scales: SWEEP.to_vec(),
            residuals: residuals.iter().map(|r| median(r)).collect(),
            median_exponent: median(&exponents),
            exponents,
        },
    })
}
