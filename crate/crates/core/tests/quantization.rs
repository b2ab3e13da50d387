mod common;

use rand::Rng;

use qfuse_core::autodiff::Tape;
use qfuse_core::data::Dataset;
use qfuse_core::model::{init_quantizers, ModelConfig, QuantSetup, ToyDetector};
use qfuse_core::par::Execution;
use qfuse_core::quant::{
    fake_quantize, lsq_step_gradient, pact_clip_gradient, ste_backward, QuantConfig, QuantizerKind, QuantizerState,
    STEP_FLOOR,
};
use qfuse_core::Tensor;

use common::{rng, uniform};

#[test]
fn weight_step_initializes_from_max_abs() {
    let w = [0.2, -1.5, 0.7, 1.1];
    let q = QuantizerState::calibrate(QuantConfig::weights(4).unwrap(), QuantizerKind::Lsq, &w).unwrap();
    assert_eq!(q.step, 1.5 / 7.0);
    let zero = QuantizerState::calibrate(QuantConfig::weights(4).unwrap(), QuantizerKind::Lsq, &[0.0; 8]).unwrap();
    assert_eq!(zero.step, STEP_FLOOR);
}

#[test]
fn distinct_outputs_bounded_on_ten_thousand_inputs() {
    let mut r = rng(21);
    for bits in [2, 3, 4, 8] {
        for config in [
            QuantConfig::weights(bits).unwrap(),
            QuantConfig::activations(bits).unwrap(),
        ] {
            let q = QuantizerState::new(config, QuantizerKind::Lsq, 0.05);
            let x = uniform(&mut r, &[10_000], -20.0, 20.0);
            let mut out = fake_quantize(&x, &q).unwrap().into_data();
            out.sort_by(f64::total_cmp);
            out.dedup();
            assert!(out.len() as u64 <= 1 << bits);
            // The range is wide enough that every level is hit.
            assert_eq!(out.len() as u64, 1 << bits);
        }
    }
}

#[test]
fn ste_mask_matches_range_and_clamped_outputs() {
    let mut r = rng(22);
    let q = QuantizerState::new(QuantConfig::activations(3).unwrap(), QuantizerKind::Lsq, 0.25);
    let x = uniform(&mut r, &[500], -1.0, 3.0);
    let up = uniform(&mut r, &[500], 0.5, 1.5);
    let g = ste_backward(&up, &x, &q).unwrap();
    let out = fake_quantize(&x, &q).unwrap();
    let (lo, hi) = (q.config.q_min() * q.step, q.config.q_max() * q.step);
    for i in 0..500 {
        let xv = x.data()[i];
        let inside = xv >= lo && xv <= hi;
        assert_eq!(g.data()[i] != 0.0, inside);
        if inside {
            assert_eq!(g.data()[i], up.data()[i]);
        } else {
            // Outside the range the output sits on the nearer clamp boundary.
            let o = out.data()[i];
            assert!(o == lo || o == hi);
        }
    }
}

#[test]
fn standalone_gradients_match_the_tape() {
    let mut r = rng(23);
    for _ in 0..20 {
        let bits = [2, 3, 4, 8][r.random_range(0..4)];
        let x = uniform(&mut r, &[2, 3, 4, 4], -1.0, 4.0);
        let up = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
        for kind in [QuantizerKind::Lsq, QuantizerKind::Pact] {
            let mut q = QuantizerState::new(QuantConfig::activations(bits).unwrap(), kind, r.random_range(0.01..0.3));
            q.clip = r.random_range(0.5..3.0);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let pv = tape.leaf(Tensor::scalar(q.range_param()));
            let out = tape.fake_quant(xv, q.spec(x.numel()), pv, None).unwrap();
            let grads = tape.backward_with(out, up.clone()).unwrap();
            let want = match kind {
                QuantizerKind::Pact => pact_clip_gradient(&up, &x, &q).unwrap(),
                _ => lsq_step_gradient(&up, &x, &q).unwrap(),
            };
            assert!((grads.get(pv).item() - want).abs() <= 1e-12 * (1.0 + want.abs()));
            assert_eq!(grads.get(xv), ste_backward(&up, &x, &q).unwrap());
        }
    }
}

#[test]
fn pact_on_weights_is_rejected() {
    let q = QuantizerState::new(QuantConfig::weights(4).unwrap(), QuantizerKind::Pact, 0.1);
    let x = Tensor::zeros(&[4]);
    assert!(pact_clip_gradient(&x, &x, &q).is_err());
    assert!(!q.uses_clip());
}

#[test]
fn calibrated_model_reconstructs_weights_within_half_a_step() {
    let model = ToyDetector::new(ModelConfig::default(), 3).unwrap();
    let calibration = Dataset::generate(3, 0, 4, Execution::Sequential);
    for kind in [
        QuantizerKind::Uniform,
        QuantizerKind::Lsq,
        QuantizerKind::LsqPlus,
        QuantizerKind::Pact,
    ] {
        let setup = QuantSetup {
            weight_bits: 4,
            act_bits: 4,
            kind,
            extremes_8bit: true,
        };
        let q = init_quantizers(&model, &setup, &calibration.scenes).unwrap();
        for (site, state) in q.quantizers.as_ref().unwrap() {
            let Some(layer) = site.strip_suffix(".w") else { continue };
            let w = model.param(&format!("{layer}.w"));
            let out = fake_quantize(w, state).unwrap();
            let step = state.effective_step();
            for (a, b) in w.data().iter().zip(out.data()) {
                assert!((a - b).abs() <= step / 2.0 * (1.0 + 1e-12), "{site}");
            }
        }
    }
}

#[test]
fn extremes_flag_controls_first_and_last_layers() {
    let model = ToyDetector::new(ModelConfig::default(), 0).unwrap();
    let calibration = Dataset::generate(0, 0, 2, Execution::Sequential);
    for extremes in [true, false] {
        let setup = QuantSetup {
            weight_bits: 3,
            act_bits: 3,
            kind: QuantizerKind::Lsq,
            extremes_8bit: extremes,
        };
        let q = init_quantizers(&model, &setup, &calibration.scenes).unwrap();
        let qs = q.quantizers.unwrap();
        for site in ["stem.w", "cls.w", "reg.w"] {
            assert_eq!(qs[site].config.bits, if extremes { 8 } else { 3 });
        }
        for site in ["shallow1.w", "deep2.w", "stem.act", "deep2.act"] {
            assert_eq!(qs[site].config.bits, 3);
        }
    }
}
