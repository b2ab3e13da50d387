mod common;

use proptest::prelude::*;

use qfuse_core::attention::{
    js_divergence, kl_divergence, normalize_to_distribution, AttentionDistribution, AttentionMap, NormDomain,
};
use qfuse_core::autodiff::Tape;
use qfuse_core::config::{TrainConfig, MAX_SEED};
use qfuse_core::fusion::{fuse, layernorm_positionwise, layernorm_positionwise_tensor, FusionNode, LN_EPS};
use qfuse_core::quant::{fake_quantize, QuantConfig, QuantizerKind, QuantizerState};
use qfuse_core::Tensor;

fn bits() -> impl Strategy<Value = u32> {
    prop::sample::select(vec![2u32, 3, 4, 8])
}

fn quantizer() -> impl Strategy<Value = QuantizerState> {
    (bits(), any::<bool>(), 0.01f64..1.0, -0.5f64..0.5, 0usize..4).prop_map(|(bits, signed, step, offset, kind)| {
        let config = if signed {
            QuantConfig::weights(bits).unwrap()
        } else {
            QuantConfig::activations(bits).unwrap()
        };
        let kind = [
            QuantizerKind::Uniform,
            QuantizerKind::Pact,
            QuantizerKind::Lsq,
            QuantizerKind::LsqPlus,
        ][kind];
        let mut q = QuantizerState::new(config, kind, step);
        if q.learns_offset() {
            q.offset = offset;
        }
        q
    })
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, len)
}

fn tensor(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(vec![n], values).unwrap()
}

fn distribution(values: Vec<f64>) -> AttentionDistribution {
    let n = values.len();
    let map = AttentionMap {
        values: Tensor::new(vec![1, 1, 1, n], values).unwrap(),
    };
    normalize_to_distribution(&map, NormDomain::PerChannel).unwrap()
}

fn positive(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..10.0, len)
}

/// Direct per-position normalization over channels of `[1, C, H, W]`.
fn reference_layernorm(h: &Tensor, eps: f64) -> Vec<f64> {
    let (c, plane) = (h.shape()[1], h.shape()[2] * h.shape()[3]);
    let d = h.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..plane {
        let mu = (0..c).map(|k| d[k * plane + p]).sum::<f64>() / c as f64;
        let var = (0..c).map(|k| (d[k * plane + p] - mu).powi(2)).sum::<f64>() / c as f64;
        for k in 0..c {
            out[k * plane + p] = (d[k * plane + p] - mu) / (var + eps).sqrt();
        }
    }
    out
}

proptest! {
    #[test]
    fn quantization_is_idempotent(q in quantizer(), xs in values(64)) {
        let once = fake_quantize(&tensor(xs), &q).unwrap();
        let twice = fake_quantize(&once, &q).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn quantization_is_monotone(q in quantizer(), mut xs in values(64)) {
        xs.sort_by(f64::total_cmp);
        let out = fake_quantize(&tensor(xs), &q).unwrap();
        prop_assert!(out.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn quantization_uses_at_most_two_to_the_bits_levels(q in quantizer(), xs in values(512)) {
        let out = fake_quantize(&tensor(xs), &q).unwrap();
        let mut levels: Vec<f64> = out.data().to_vec();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        prop_assert!(levels.len() as u64 <= q.config.levels());
    }

    #[test]
    fn in_range_error_is_at_most_half_a_step(q in quantizer(), xs in values(64)) {
        let step = q.effective_step();
        let lo = q.config.q_min() * step + q.offset;
        let hi = q.config.q_max() * step + q.offset;
        let out = fake_quantize(&tensor(xs.clone()), &q).unwrap();
        for (x, y) in xs.iter().zip(out.data()) {
            if *x >= lo && *x <= hi {
                prop_assert!((x - y).abs() <= step / 2.0 * (1.0 + 1e-12), "x {x} q {y} step {step}");
            }
        }
    }

    #[test]
    fn js_is_symmetric_and_bounded(a in positive(16), b in positive(16)) {
        let (p, q) = (distribution(a), distribution(b));
        let pq = js_divergence(&p, &q).unwrap();
        let qp = js_divergence(&q, &p).unwrap();
        prop_assert_eq!(pq, qp);
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-9).contains(&pq));
    }

    #[test]
    fn divergences_vanish_on_identical_inputs(a in positive(16)) {
        let p = distribution(a);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-9);
        prop_assert!(js_divergence(&p, &p).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn kl_is_non_negative(a in positive(16), b in positive(16)) {
        prop_assert!(kl_divergence(&distribution(a), &distribution(b)).unwrap() >= 0.0);
    }

    #[test]
    fn layernorm_removes_shift_and_scale(xs in prop::collection::vec(-3.0f64..3.0, 32), shift in -5.0f64..5.0, scale in 0.5f64..4.0) {
        let h = Tensor::new(vec![1, 8, 2, 2], xs).unwrap();
        let shifted = layernorm_positionwise_tensor(&h.map(|v| v + shift)).unwrap();
        let moved = layernorm_positionwise_tensor(&h.map(|v| v * scale + shift)).unwrap();
        // Scaling by c only moves the variance floor to eps / c^2.
        let want = reference_layernorm(&h, LN_EPS / (scale * scale));
        let base = reference_layernorm(&h, LN_EPS);
        for i in 0..h.numel() {
            prop_assert!((shifted.data()[i] - base[i]).abs() < 1e-9);
            prop_assert!((moved.data()[i] - want[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_gradient_is_centered_per_position(xs in prop::collection::vec(-3.0f64..3.0, 32), gs in prop::collection::vec(-1.0f64..1.0, 32)) {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::new(vec![1, 8, 2, 2], xs).unwrap());
        let out = layernorm_positionwise(&mut tape, h).unwrap();
        let grads = tape.backward_with(out, Tensor::new(vec![1, 8, 2, 2], gs).unwrap()).unwrap();
        let g = grads.get(h);
        for p in 0..4 {
            let mean = (0..8).map(|c| g.data()[c * 4 + p]).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn unnormalized_fusion_is_an_alpha_weighted_concat(logit in -4.0f64..4.0, s in values(8), d in values(12)) {
        let mut node = FusionNode::balanced(2, 3);
        node.normalize = false;
        let mut tape = Tape::new();
        let sv = tape.constant(Tensor::new(vec![1, 2, 2, 2], s.clone()).unwrap());
        let dv = tape.constant(Tensor::new(vec![1, 3, 2, 2], d.clone()).unwrap());
        let lv = tape.constant(Tensor::scalar(logit));
        let out = fuse(&mut tape, sv, dv, &node, lv).unwrap();
        let alpha = 1.0 / (1.0 + (-logit).exp());
        let want: Vec<f64> = s.iter().map(|v| v * alpha).chain(d.iter().map(|v| v * (1.0 - alpha))).collect();
        for (a, b) in tape.value(out).data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn backward_is_linear_in_the_seed(
        xs in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 4 * 4),
        ws in prop::collection::vec(-1.0f64..1.0, 4 * 3 * 9),
        g1 in prop::collection::vec(-1.0f64..1.0, 2 * 4 * 4 * 4),
        g2 in prop::collection::vec(-1.0f64..1.0, 2 * 4 * 4 * 4),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3, 4, 4], xs).unwrap());
        let w = tape.leaf(Tensor::new(vec![4, 3, 3, 3], ws).unwrap());
        let y = tape.conv2d(x, w, 1).unwrap();
        let y = tape.sigmoid(y).unwrap();
        let out = layernorm_positionwise(&mut tape, y).unwrap();
        let shape = tape.shape(out).to_vec();
        let seed = |g: &[f64]| Tensor::new(shape.clone(), g.to_vec()).unwrap();
        let mixed: Vec<f64> = g1.iter().zip(&g2).map(|(u, v)| a * u + b * v).collect();
        let r1 = tape.backward_with(out, seed(&g1)).unwrap();
        let r2 = tape.backward_with(out, seed(&g2)).unwrap();
        let rm = tape.backward_with(out, seed(&mixed)).unwrap();
        for v in [x, w] {
            let (p, q, m) = (r1.get(v), r2.get(v), rm.get(v));
            for ((p, q), m) in p.data().iter().zip(q.data()).zip(m.data()) {
                prop_assert!((a * p + b * q - m).abs() <= 1e-9 * (1.0 + m.abs()));
            }
        }
    }

    #[test]
    fn config_survives_a_toml_round_trip(seed in 0..=MAX_SEED, bits in 2u32..=8, lr in 1e-5f64..1.0, gab in any::<bool>()) {
        let mut cfg = TrainConfig::default();
        cfg.run.seed = seed;
        cfg.qat.weight_bits = bits;
        cfg.qat.act_bits = bits;
        cfg.train.lr = lr;
        cfg.model.gabfusion = gab;
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn seeds_beyond_toml_range_are_rejected() {
    let mut cfg = TrainConfig::default();
    cfg.run.seed = MAX_SEED + 1;
    assert!(cfg.validate().is_err());
}

#[test]
fn distributions_reject_unnormalized_input() {
    let bad = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.6]).unwrap();
    assert!(AttentionDistribution::new(bad, NormDomain::PerChannel).is_err());
}
