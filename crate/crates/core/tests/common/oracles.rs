//! Finite-difference oracles for every backward rule on the tape.
//!
//! Each case draws random inputs, contracts the op's output with fixed random weights
//! and compares the tape gradient of that scalar against central differences of the
//! same scalar computed from forward values only.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use qfuse_core::attention::{self, AdaSettings, Divergence, NormDomain};
use qfuse_core::autodiff::{finite_difference_grad, max_relative_error, Tape, Var};
use qfuse_core::data::{generate_scene, scene_input};
use qfuse_core::fusion::{fuse, layernorm_positionwise, FusionNode};
use qfuse_core::model::{task_loss_tape, ModelConfig, ToyDetector};
use qfuse_core::quant::{QuantConfig, QuantizerKind, QuantizerState};
use qfuse_core::{Result, Tensor};

use super::{away_from_zero, rng, uniform};

pub const INSTANCES: usize = 20;
pub const SMOOTH_TOL: f64 = 1e-5;
pub const KINKED_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// Denominator floor of the relative error, so exact zeros compare by absolute error.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

type Instance = fn(&mut ChaCha8Rng) -> f64;

pub struct Case {
    pub name: &'static str,
    pub smooth: bool,
    pub run: Instance,
}

pub fn run_case(case: &Case) -> OracleReport {
    let tag = case
        .name
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let mut max_error: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut r = rng(tag ^ (i as u64) << 32);
        let e = (case.run)(&mut r);
        max_error = if e.is_nan() { f64::INFINITY } else { max_error.max(e) };
    }
    OracleReport {
        name: case.name,
        instances: INSTANCES,
        max_error,
        tolerance: if case.smooth { SMOOTH_TOL } else { KINKED_TOL },
    }
}

pub fn run_all() -> Vec<OracleReport> {
    cases().iter().map(run_case).collect()
}

fn weighted_sum(out: &Tensor, weights: &Tensor) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Max relative error between tape and finite-difference gradients of
/// `sum(W * build(inputs))` over every input.
fn compare(r: &mut ChaCha8Rng, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let forward = |xs: &[Tensor]| -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars).expect("forward");
        tape.value(out).clone()
    };
    let weights = uniform(r, forward(inputs).shape(), -1.0, 1.0);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let numeric = finite_difference_grad(
            |t| {
                let mut xs = inputs.to_vec();
                xs[i] = t.clone();
                weighted_sum(&forward(&xs), &weights)
            },
            &inputs[i],
            EPS,
        );
        worst = worst.max(max_relative_error(&grads.get(v), &numeric, FLOOR));
    }
    worst
}

fn elementwise(r: &mut ChaCha8Rng) -> Tensor {
    uniform(r, &[2, 3, 4], -1.0, 1.0)
}

fn positive(r: &mut ChaCha8Rng) -> Tensor {
    uniform(r, &[2, 3, 4], 0.5, 2.0)
}

fn feature(r: &mut ChaCha8Rng, c: usize) -> Tensor {
    uniform(r, &[2, c, 4, 4], -1.0, 1.0)
}

fn add(r: &mut ChaCha8Rng) -> f64 {
    let x = [elementwise(r), elementwise(r)];
    compare(r, &x, |t, v| t.add(v[0], v[1]))
}

fn sub(r: &mut ChaCha8Rng) -> f64 {
    let x = [elementwise(r), elementwise(r)];
    compare(r, &x, |t, v| t.sub(v[0], v[1]))
}

fn mul(r: &mut ChaCha8Rng) -> f64 {
    let x = [elementwise(r), elementwise(r)];
    compare(r, &x, |t, v| t.mul(v[0], v[1]))
}

fn div(r: &mut ChaCha8Rng) -> f64 {
    let x = [elementwise(r), positive(r)];
    compare(r, &x, |t, v| t.div(v[0], v[1]))
}

fn scalar_broadcast(r: &mut ChaCha8Rng) -> f64 {
    let x = [elementwise(r), uniform(r, &[], 0.5, 2.0), uniform(r, &[], -1.0, 1.0)];
    compare(r, &x, |t, v| {
        let q = t.div(v[0], v[1])?;
        let m = t.mul(v[2], q)?;
        t.sub(m, v[2])
    })
}

fn scale_and_shift(r: &mut ChaCha8Rng) -> f64 {
    let (c, s) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
    let x = [elementwise(r)];
    compare(r, &x, move |t, v| {
        let y = t.scale(v[0], c)?;
        t.add_scalar(y, s)
    })
}

fn relu(r: &mut ChaCha8Rng) -> f64 {
    let x = [away_from_zero(r, &[2, 3, 4], 1.0, 1e-3)];
    compare(r, &x, |t, v| t.relu(v[0]))
}

fn sigmoid(r: &mut ChaCha8Rng) -> f64 {
    let x = [uniform(r, &[2, 3, 4], -4.0, 4.0)];
    compare(r, &x, |t, v| t.sigmoid(v[0]))
}

fn square(r: &mut ChaCha8Rng) -> f64 {
    let x = [elementwise(r)];
    compare(r, &x, |t, v| t.square(v[0]))
}

fn sqrt(r: &mut ChaCha8Rng) -> f64 {
    let x = [positive(r)];
    compare(r, &x, |t, v| t.sqrt(v[0]))
}

fn ln(r: &mut ChaCha8Rng) -> f64 {
    let x = [positive(r)];
    compare(r, &x, |t, v| t.ln(v[0]))
}

fn expand(r: &mut ChaCha8Rng) -> f64 {
    let x = [uniform(r, &[1, 3, 1, 1], -1.0, 1.0)];
    compare(r, &x, |t, v| t.expand(v[0], &[2, 3, 4, 4]))
}

fn sum_axes(r: &mut ChaCha8Rng) -> f64 {
    let x = [feature(r, 3)];
    compare(r, &x, |t, v| t.sum_axes(v[0], &[2, 3]))
}

fn mean_axes(r: &mut ChaCha8Rng) -> f64 {
    let x = [feature(r, 3)];
    compare(r, &x, |t, v| t.mean_axes(v[0], &[1]))
}

fn totals(r: &mut ChaCha8Rng) -> f64 {
    let x = [elementwise(r), elementwise(r)];
    compare(r, &x, |t, v| {
        let a = t.sum_all(v[0])?;
        let b = t.mean_all(v[1])?;
        t.mul(a, b)
    })
}

fn reduce_stats(r: &mut ChaCha8Rng) -> f64 {
    let x = [feature(r, 3)];
    compare(r, &x, |t, v| {
        let (m, var) = t.reduce_stats(v[0], &[1])?;
        let s = t.square(m)?;
        t.add(s, var)
    })
}

fn reshape(r: &mut ChaCha8Rng) -> f64 {
    let x = [elementwise(r)];
    compare(r, &x, |t, v| {
        let y = t.reshape(v[0], &[6, 4])?;
        t.square(y)
    })
}

fn conv(r: &mut ChaCha8Rng, kernel: usize, stride: usize) -> f64 {
    let x = [
        uniform(r, &[2, 3, 6, 6], -1.0, 1.0),
        uniform(r, &[4, 3, kernel, kernel], -1.0, 1.0),
    ];
    compare(r, &x, move |t, v| t.conv2d(v[0], v[1], stride))
}

fn conv3_stride1(r: &mut ChaCha8Rng) -> f64 {
    conv(r, 3, 1)
}

fn conv3_stride2(r: &mut ChaCha8Rng) -> f64 {
    conv(r, 3, 2)
}

fn conv1_stride1(r: &mut ChaCha8Rng) -> f64 {
    conv(r, 1, 1)
}

fn channel_bias(r: &mut ChaCha8Rng) -> f64 {
    let x = [feature(r, 3), uniform(r, &[3], -1.0, 1.0)];
    compare(r, &x, |t, v| t.channel_bias(v[0], v[1]))
}

fn dense(r: &mut ChaCha8Rng) -> f64 {
    let x = [
        uniform(r, &[3, 5], -1.0, 1.0),
        uniform(r, &[4, 5], -1.0, 1.0),
        uniform(r, &[4], -1.0, 1.0),
    ];
    compare(r, &x, |t, v| t.dense(v[0], v[1], v[2]))
}

fn concat(r: &mut ChaCha8Rng) -> f64 {
    let x = [feature(r, 2), feature(r, 3)];
    compare(r, &x, |t, v| t.concat_channels(v[0], v[1]))
}

fn upsample(r: &mut ChaCha8Rng) -> f64 {
    let x = [feature(r, 2)];
    compare(r, &x, |t, v| t.upsample_nearest2x(v[0]))
}

fn global_pool(r: &mut ChaCha8Rng) -> f64 {
    let x = [feature(r, 3)];
    compare(r, &x, |t, v| t.global_avg_pool(v[0]))
}

fn softmax(r: &mut ChaCha8Rng) -> f64 {
    let x = [uniform(r, &[3, 4], -2.0, 2.0)];
    compare(r, &x, |t, v| t.softmax(v[0]))
}

fn nll(r: &mut ChaCha8Rng) -> f64 {
    let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
    let x = [uniform(r, &[3, 4], -2.0, 2.0)];
    compare(r, &x, move |t, v| {
        let p = t.softmax(v[0])?;
        t.nll(p, &labels)
    })
}

/// Straight-through surrogate of a fake quantizer: the rounding residual and the
/// in-range mask are frozen at the sampled point, so the surrogate's exact derivative
/// is the straight-through gradient.
fn fake_quant_case(r: &mut ChaCha8Rng, q: QuantizerState) -> f64 {
    let (qmin, qmax) = (q.config.q_min(), q.config.q_max());
    let step = q.effective_step();
    // Scaled values spread across and slightly beyond the grid, kept off the clamp edges.
    let x = Tensor::from_fn(&[2, 3, 4, 4], |_| loop {
        let v: f64 = r.random_range(qmin - 2.0..qmax + 2.0);
        if (v - qmin).abs() > 1e-2 && (v - qmax).abs() > 1e-2 {
            break v * step + q.offset;
        }
    });
    let spec = q.spec(x.numel());
    let weights = uniform(r, x.shape(), -1.0, 1.0);
    let learns_offset = q.learns_offset();

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv = tape.leaf(Tensor::scalar(q.range_param()));
    let ov = learns_offset.then(|| tape.leaf(Tensor::scalar(q.offset)));
    let out = tape.fake_quant(xv, spec, pv, ov).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let frozen: Vec<(f64, bool)> = x
        .data()
        .iter()
        .map(|&xv| {
            let v = (xv - q.offset) / step;
            (v.round_ties_even() - v, v >= qmin && v <= qmax)
        })
        .collect();
    let uses_clip = q.uses_clip();
    // [x..., range param, offset]
    let surrogate = |x: &[f64], param: f64, offset: f64| -> f64 {
        let s = if uses_clip { param / qmax } else { param };
        x.iter()
            .zip(&frozen)
            .zip(weights.data())
            .map(|((&xv, &(res, inside)), &w)| {
                let y = if uses_clip {
                    xv.clamp(qmin * s, param)
                } else {
                    s * ((xv - offset) / s).clamp(qmin, qmax) + offset + if inside { s * res } else { 0.0 }
                };
                w * y
            })
            .sum()
    };
    let scale = match spec.mode {
        qfuse_core::quant::FakeQuantMode::Step { grad_scale } => grad_scale,
        qfuse_core::quant::FakeQuantMode::Clip => 1.0,
    };
    let (p0, o0) = (q.range_param(), q.offset);
    let dx = finite_difference_grad(|t| surrogate(t.data(), p0, o0), &x, EPS);
    let dp = finite_difference_grad(|t| surrogate(x.data(), t.item(), o0), &Tensor::scalar(p0), EPS).item() * scale;
    let mut worst = max_relative_error(&grads.get(xv), &dx, FLOOR);
    if q.learns_step() || uses_clip {
        worst = worst.max(max_relative_error(&grads.get(pv), &Tensor::scalar(dp), FLOOR));
    }
    if let Some(ov) = ov {
        let d_o =
            finite_difference_grad(|t| surrogate(x.data(), p0, t.item()), &Tensor::scalar(o0), EPS).item() * scale;
        worst = worst.max(max_relative_error(&grads.get(ov), &Tensor::scalar(d_o), FLOOR));
    }
    worst
}

fn random_bits(r: &mut ChaCha8Rng) -> u32 {
    [2, 3, 4, 8][r.random_range(0..4)]
}

fn lsq_weights(r: &mut ChaCha8Rng) -> f64 {
    let bits = random_bits(r);
    let step = r.random_range(0.01..0.5);
    fake_quant_case(
        r,
        QuantizerState::new(QuantConfig::weights(bits).unwrap(), QuantizerKind::Lsq, step),
    )
}

fn lsq_activations(r: &mut ChaCha8Rng) -> f64 {
    let bits = random_bits(r);
    let step = r.random_range(0.01..0.5);
    fake_quant_case(
        r,
        QuantizerState::new(QuantConfig::activations(bits).unwrap(), QuantizerKind::Lsq, step),
    )
}

fn lsq_plus_offset(r: &mut ChaCha8Rng) -> f64 {
    let bits = random_bits(r);
    let step = r.random_range(0.01..0.5);
    let mut q = QuantizerState::new(QuantConfig::activations(bits).unwrap(), QuantizerKind::LsqPlus, step);
    q.offset = r.random_range(-0.5..0.5);
    fake_quant_case(r, q)
}

fn pact_clip(r: &mut ChaCha8Rng) -> f64 {
    let bits = random_bits(r);
    let mut q = QuantizerState::new(QuantConfig::activations(bits).unwrap(), QuantizerKind::Pact, 0.1);
    q.clip = r.random_range(0.5..3.0);
    fake_quant_case(r, q)
}

fn uniform_quantizer(r: &mut ChaCha8Rng) -> f64 {
    let bits = random_bits(r);
    let step = r.random_range(0.01..0.5);
    fake_quant_case(
        r,
        QuantizerState::new(QuantConfig::weights(bits).unwrap(), QuantizerKind::Uniform, step),
    )
}

fn fusion_alpha(r: &mut ChaCha8Rng) -> f64 {
    let mut node = FusionNode::balanced(2, 3);
    node.normalize = false;
    let x = [feature(r, 2), feature(r, 3), uniform(r, &[], -2.0, 2.0)];
    compare(r, &x, move |t, v| fuse(t, v[0], v[1], &node, v[2]))
}

fn fusion_balanced(r: &mut ChaCha8Rng) -> f64 {
    let node = FusionNode::balanced(2, 3);
    let x = [feature(r, 2), feature(r, 3), uniform(r, &[], -2.0, 2.0)];
    compare(r, &x, move |t, v| fuse(t, v[0], v[1], &node, v[2]))
}

fn layernorm(r: &mut ChaCha8Rng) -> f64 {
    let x = [feature(r, 5)];
    compare(r, &x, |t, v| layernorm_positionwise(t, v[0]))
}

fn simam(r: &mut ChaCha8Rng) -> f64 {
    let lambda = [attention::SIMAM_LAMBDA, 0.1][r.random_range(0..2)];
    let x = [feature(r, 3)];
    compare(r, &x, move |t, v| attention::simam(t, v[0], lambda))
}

fn random_domain(r: &mut ChaCha8Rng) -> NormDomain {
    [NormDomain::PerChannel, NormDomain::Joint][r.random_range(0..2)]
}

fn normalize(r: &mut ChaCha8Rng) -> f64 {
    let domain = random_domain(r);
    let x = [uniform(r, &[2, 3, 4, 4], 0.1, 1.0)];
    compare(r, &x, move |t, v| attention::normalize(t, v[0], domain))
}

fn divergence_case(r: &mut ChaCha8Rng, metric: Divergence) -> f64 {
    let domain = random_domain(r);
    let x = [uniform(r, &[2, 3, 4, 4], 0.1, 1.0), uniform(r, &[2, 3, 4, 4], 0.1, 1.0)];
    compare(r, &x, move |t, v| {
        let p = attention::normalize(t, v[0], domain)?;
        let q = attention::normalize(t, v[1], domain)?;
        attention::divergence(t, metric, p, q, domain)
    })
}

fn kl(r: &mut ChaCha8Rng) -> f64 {
    divergence_case(r, Divergence::Kl)
}

fn js(r: &mut ChaCha8Rng) -> f64 {
    divergence_case(r, Divergence::Js)
}

fn ada(r: &mut ChaCha8Rng) -> f64 {
    let settings = AdaSettings {
        metric: [Divergence::Kl, Divergence::Js][r.random_range(0..2)],
        domain: random_domain(r),
        weight: r.random_range(0.1..2.0),
        ..AdaSettings::default()
    };
    let teacher = feature(r, 3);
    let x = [feature(r, 3)];
    compare(r, &x, move |t, v| {
        attention::ada_loss(t, std::slice::from_ref(&teacher), &[v[0]], &settings)
    })
}

/// Full detector loss with respect to the fusion logit and a sample of weights and biases.
fn detector(r: &mut ChaCha8Rng) -> f64 {
    let config = ModelConfig {
        stem_channels: 2,
        shallow_channels: 3,
        deep_channels: 4,
        stem_stride: 2,
        gabfusion: r.random_bool(0.5),
    };
    let mut model = ToyDetector::new(config, r.random()).unwrap();
    model.fusion.alpha_logit = r.random_range(-1.0..1.0);
    // Zero biases put whole dead regions exactly on the ReLU kink.
    for (name, p) in model.params.iter_mut() {
        if name.ends_with(".b") {
            *p = uniform(r, p.shape(), -0.1, 0.1);
        }
    }
    let scene = generate_scene(r.random(), r.random_range(0..1000));
    let names = ["shallow2.b", "deep2.w", "cls.w", "reg.b"];
    let mut inputs: Vec<Tensor> = names.iter().map(|n| model.param(n).clone()).collect();
    inputs.push(Tensor::scalar(model.fusion.alpha_logit));
    let beta = 10.0;
    compare(r, &inputs, move |t, v| {
        let mut b = model.bind(t, false);
        for (n, &var) in names.iter().zip(v) {
            b.params.insert(n.to_string(), var);
        }
        b.alpha_logit = v[names.len()];
        let x = t.constant(scene_input(&scene));
        let (_, head) = model.forward(t, &b, x)?;
        Ok(task_loss_tape(t, &head, &[&scene], beta)?.total)
    })
}

pub fn cases() -> Vec<Case> {
    macro_rules! case {
        ($f:ident, $smooth:expr) => {
            Case {
                name: stringify!($f),
                smooth: $smooth,
                run: $f,
            }
        };
    }
    vec![
        case!(add, true),
        case!(sub, true),
        case!(mul, true),
        case!(div, true),
        case!(scalar_broadcast, true),
        case!(scale_and_shift, true),
        case!(relu, false),
        case!(sigmoid, true),
        case!(square, true),
        case!(sqrt, true),
        case!(ln, true),
        case!(expand, true),
        case!(sum_axes, true),
        case!(mean_axes, true),
        case!(totals, true),
        case!(reduce_stats, true),
        case!(reshape, true),
        case!(conv3_stride1, true),
        case!(conv3_stride2, true),
        case!(conv1_stride1, true),
        case!(channel_bias, true),
        case!(dense, true),
        case!(concat, true),
        case!(upsample, true),
        case!(global_pool, true),
        case!(softmax, true),
        case!(nll, true),
        case!(lsq_weights, false),
        case!(lsq_activations, false),
        case!(lsq_plus_offset, false),
        case!(pact_clip, false),
        case!(uniform_quantizer, false),
        case!(fusion_alpha, true),
        case!(fusion_balanced, true),
        case!(layernorm, true),
        case!(simam, true),
        case!(normalize, true),
        case!(kl, true),
        case!(js, true),
        case!(ada, true),
        case!(detector, false),
    ]
}
