//! Toy two-branch detector.
//!
//! ```text
//! input [5,32,32] -> stem (stride 2) -> shallow1 -> shallow2 ------------------> F_s [16,16,16]
//!                                          \-> deep1 (stride 2) -> deep2 -> up2x -> F_d [32,16,16]
//! fuse(F_s, F_d) -> global average pool -> cls: dense + softmax (4 classes)
//!                                       -> reg: dense + sigmoid (center)
//! ```
//!
//! Every conv carries a bias and a ReLU. Once quantizers are attached, each conv and
//! dense weight and each conv output is fake-quantized.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{scene_input, SyntheticScene, IMAGE_SIZE, INPUT_CHANNELS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionNode, FusionSites};
use crate::par::{map_indexed, Execution};
use crate::quant::{QuantConfig, QuantizerKind, QuantizerState};
use crate::tensor::Tensor;

/// Side of the fixed box used by the IoU proxy, in pixels.
pub const IOU_BOX_PIXELS: f64 = 8.0;
pub const IOU_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub shallow_channels: usize,
    pub deep_channels: usize,
    pub stem_stride: usize,
    /// Balanced fusion (alpha scaling and normalization) instead of plain concatenation.
    pub gabfusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stem_channels: 8,
            shallow_channels: 16,
            deep_channels: 32,
            stem_stride: 1,
            gabfusion: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: &'static str,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

pub const HEADS: [&str; 2] = ["cls", "reg"];

impl ModelConfig {
    pub fn conv_layers(&self) -> [ConvLayer; 5] {
        let layer = |name, in_channels, out_channels, stride| ConvLayer {
            name,
            in_channels,
            out_channels,
            stride,
        };
        [
            layer("stem", INPUT_CHANNELS, self.stem_channels, self.stem_stride),
            layer("shallow1", self.stem_channels, self.shallow_channels, 1),
            layer("shallow2", self.shallow_channels, self.shallow_channels, 1),
            layer("deep1", self.shallow_channels, self.deep_channels, 2),
            layer("deep2", self.deep_channels, self.deep_channels, 1),
        ]
    }

    pub fn fused_channels(&self) -> usize {
        self.shallow_channels + self.deep_channels
    }

    /// Spatial side of the fusion maps.
    pub fn fusion_size(&self) -> usize {
        IMAGE_SIZE / self.stem_stride
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.stem_channels > 0
            && self.shallow_channels > 0
            && self.deep_channels > 0
            && matches!(self.stem_stride, 1 | 2)
            && self.fusion_size().is_multiple_of(2);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid model config {self:?}")))
        }
    }

    pub fn architecture_hash(&self) -> String {
        crate::config::stable_hash(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSetup {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub kind: QuantizerKind,
    /// Keep the stem and head weights at 8 bits whatever the target width.
    pub extremes_8bit: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct QuantVars {
    pub param: Var,
    pub offset: Option<Var>,
}

/// Tape variables standing for the model's parameters in one forward pass.
#[derive(Clone, Debug)]
pub struct Bindings {
    pub params: BTreeMap<String, Var>,
    pub alpha_logit: Var,
    pub quant: BTreeMap<String, QuantVars>,
}

pub struct Backbone {
    /// Per-layer outputs after activation (and quantization, if attached), in depth order.
    pub layers: Vec<(String, Var)>,
    /// Fusion inputs.
    pub shallow: Var,
    pub deep: Var,
}

pub struct HeadOutputs {
    /// Copies of the two fusion inputs consumed only by the fusion node. Their gradients
    /// are the fusion-path share; the shallow map also feeds the deep branch.
    pub fusion_shallow: Var,
    pub fusion_deep: Var,
    pub fused: Var,
    pub logits: Var,
    pub probs: Var,
    pub reg_pre: Var,
    pub center: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub fusion: FusionNode,
    pub quantizers: Option<BTreeMap<String, QuantizerState>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub center: (f64, f64),
}

impl Prediction {
    pub fn class(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
            )
            .0
    }
}

impl ToyDetector {
    /// He-normal conv weights, scaled-normal head weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| dist.sample(&mut rng))
        };
        for l in config.conv_layers() {
            let fan_in = l.in_channels * 9;
            params.insert(
                format!("{}.w", l.name),
                normal(&[l.out_channels, l.in_channels, 3, 3], (2.0 / fan_in as f64).sqrt()),
            );
            params.insert(format!("{}.b", l.name), Tensor::zeros(&[l.out_channels]));
        }
        let fused = config.fused_channels();
        for (head, out) in [("cls", NUM_CLASSES), ("reg", 2)] {
            params.insert(format!("{head}.w"), normal(&[out, fused], (1.0 / fused as f64).sqrt()));
            params.insert(format!("{head}.b"), Tensor::zeros(&[out]));
        }
        let fusion = if config.gabfusion {
            FusionNode::balanced(config.shallow_channels, config.deep_channels)
        } else {
            FusionNode::plain_concat(config.shallow_channels, config.deep_channels)
        };
        Ok(ToyDetector {
            config,
            params,
            fusion,
            quantizers: None,
        })
    }

    pub fn is_quantized(&self) -> bool {
        self.quantizers.is_some()
    }

    pub fn without_quantizers(&self) -> Self {
        ToyDetector {
            quantizers: None,
            ..self.clone()
        }
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    /// Put every parameter on the tape, as leaves when `trainable`, else as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bindings {
        let mut put = |t: Tensor| if trainable { tape.leaf(t) } else { tape.constant(t) };
        let params = self.params.iter().map(|(k, v)| (k.clone(), put(v.clone()))).collect();
        let alpha_logit = put(Tensor::scalar(self.fusion.alpha_logit));
        let mut quant = BTreeMap::new();
        for (name, q) in self.quantizers.iter().flatten() {
            let learn = trainable && (q.learns_step() || q.uses_clip());
            let v = Tensor::scalar(q.range_param());
            let param = if learn { tape.leaf(v) } else { tape.constant(v) };
            let offset = q.learns_offset().then(|| {
                let v = Tensor::scalar(q.offset);
                if trainable {
                    tape.leaf(v)
                } else {
                    tape.constant(v)
                }
            });
            quant.insert(name.clone(), QuantVars { param, offset });
        }
        Bindings {
            params,
            alpha_logit,
            quant,
        }
    }

    fn quantize(&self, tape: &mut Tape, b: &Bindings, site: &str, x: Var) -> Result<Var> {
        match (self.quantizers.as_ref().and_then(|q| q.get(site)), b.quant.get(site)) {
            (Some(q), Some(v)) => {
                let spec = q.spec(tape.value(x).numel());
                tape.fake_quant(x, spec, v.param, v.offset)
            }
            _ => Ok(x),
        }
    }

    fn conv_block(&self, tape: &mut Tape, b: &Bindings, l: &ConvLayer, x: Var) -> Result<Var> {
        let w = self.quantize(tape, b, &format!("{}.w", l.name), b.params[&format!("{}.w", l.name)])?;
        let y = tape.conv2d(x, w, l.stride)?;
        let y = tape.channel_bias(y, b.params[&format!("{}.b", l.name)])?;
        let y = tape.relu(y)?;
        self.quantize(tape, b, &format!("{}.act", l.name), y)
    }

    pub fn backbone(&self, tape: &mut Tape, b: &Bindings, input: Var) -> Result<Backbone> {
        let [stem, s1, s2, d1, d2] = self.config.conv_layers();
        let mut layers = Vec::with_capacity(5);
        let mut x = input;
        for l in [&stem, &s1, &s2] {
            x = self.conv_block(tape, b, l, x)?;
            layers.push((l.name.to_string(), x));
        }
        let shallow = x;
        for l in [&d1, &d2] {
            x = self.conv_block(tape, b, l, x)?;
            layers.push((l.name.to_string(), x));
        }
        let deep = tape.upsample_nearest2x(x)?;
        Ok(Backbone { layers, shallow, deep })
    }

    pub fn head(&self, tape: &mut Tape, b: &Bindings, shallow: Var, deep: Var) -> Result<HeadOutputs> {
        let fusion_shallow = tape.scale(shallow, 1.0)?;
        let fusion_deep = tape.scale(deep, 1.0)?;
        let fused = fuse(tape, fusion_shallow, fusion_deep, &self.fusion, b.alpha_logit)?;
        let pooled = tape.global_avg_pool(fused)?;
        let dense = |tape: &mut Tape, head: &str| -> Result<Var> {
            let w = self.quantize(tape, b, &format!("{head}.w"), b.params[&format!("{head}.w")])?;
            tape.dense(pooled, w, b.params[&format!("{head}.b")])
        };
        let logits = dense(tape, "cls")?;
        let probs = tape.softmax(logits)?;
        let reg_pre = dense(tape, "reg")?;
        let center = tape.sigmoid(reg_pre)?;
        Ok(HeadOutputs {
            fusion_shallow,
            fusion_deep,
            fused,
            logits,
            probs,
            reg_pre,
            center,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, input: Var) -> Result<(Backbone, HeadOutputs)> {
        let bb = self.backbone(tape, b, input)?;
        let head = self.head(tape, b, bb.shallow, bb.deep)?;
        Ok((bb, head))
    }

    pub fn predict(&self, scene: &SyntheticScene) -> Result<Prediction> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(scene_input(scene));
        let (_, h) = self.forward(&mut tape, &b, x)?;
        let c = tape.value(h.center).data();
        Ok(Prediction {
            probs: tape.value(h.probs).data().to_vec(),
            center: (c[0], c[1]),
        })
    }

    /// Fusion-output features for one scene (the features distillation aligns).
    pub fn fused_features(&self, scene: &SyntheticScene) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(scene_input(scene));
        let (_, h) = self.forward(&mut tape, &b, x)?;
        Ok(tape.value(h.fused).clone())
    }
}

impl FusionSites for ToyDetector {
    // A plain concatenation has nothing to balance or normalize.
    fn fusion_nodes(&self) -> Vec<&FusionNode> {
        if self.fusion.balanced {
            vec![&self.fusion]
        } else {
            Vec::new()
        }
    }

    fn fusion_nodes_mut(&mut self) -> Vec<&mut FusionNode> {
        if self.fusion.balanced {
            vec![&mut self.fusion]
        } else {
            Vec::new()
        }
    }
}

fn site_bits(setup: &QuantSetup, layer: &str, default: u32) -> u32 {
    let extreme = layer == "stem" || HEADS.contains(&layer);
    if setup.extremes_8bit && extreme {
        8
    } else {
        default
    }
}

/// Attach calibrated quantizers to a copy of `model`. Weight steps come from the weights
/// themselves; activation steps and clip bounds from one forward pass over `calibration`.
pub fn init_quantizers(model: &ToyDetector, setup: &QuantSetup, calibration: &[SyntheticScene]) -> Result<ToyDetector> {
    if calibration.is_empty() {
        return Err(Error::Uncalibrated);
    }
    let fp = model.without_quantizers();
    let mut observed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for scene in calibration {
        let mut tape = Tape::new();
        let b = fp.bind(&mut tape, false);
        let x = tape.constant(scene_input(scene));
        let bb = fp.backbone(&mut tape, &b, x)?;
        for (name, v) in bb.layers {
            observed
                .entry(format!("{name}.act"))
                .or_default()
                .extend_from_slice(tape.value(v).data());
        }
    }
    let mut quantizers = BTreeMap::new();
    let weight_layers = model
        .config
        .conv_layers()
        .iter()
        .map(|l| l.name)
        .chain(HEADS)
        .collect::<Vec<_>>();
    for layer in weight_layers {
        let cfg = QuantConfig::weights(site_bits(setup, layer, setup.weight_bits))?;
        let w = model.param(&format!("{layer}.w"));
        quantizers.insert(
            format!("{layer}.w"),
            QuantizerState::calibrate(cfg, setup.kind, w.data())?,
        );
    }
    for l in model.config.conv_layers() {
        let cfg = QuantConfig::activations(setup.act_bits)?;
        let site = format!("{}.act", l.name);
        quantizers.insert(
            site.clone(),
            QuantizerState::calibrate(cfg, setup.kind, &observed[&site])?,
        );
    }
    Ok(ToyDetector {
        quantizers: Some(quantizers),
        ..model.clone()
    })
}

/// Per-sample task loss `CE + beta * |t_hat - t*|^2` from plain values.
pub fn task_loss(pred_class: &[f64], pred_center: (f64, f64), scene: &SyntheticScene, beta: f64) -> Result<f64> {
    let sum: f64 = pred_class.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || pred_class.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::UnnormalizedProbabilities(sum));
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be non-negative, got {beta}")));
    }
    let ce = -pred_class[scene.class_label].ln();
    let (dx, dy) = (pred_center.0 - scene.center.0, pred_center.1 - scene.center.1);
    Ok(ce + beta * (dx * dx + dy * dy))
}

pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub reg: Var,
}

/// Batch-mean task loss on the tape. `reg` is the mean squared center error before `beta`.
pub fn task_loss_tape(tape: &mut Tape, head: &HeadOutputs, scenes: &[&SyntheticScene], beta: f64) -> Result<LossVars> {
    let labels: Vec<usize> = scenes.iter().map(|s| s.class_label).collect();
    let ce = tape.nll(head.probs, &labels)?;
    let targets: Vec<f64> = scenes.iter().flat_map(|s| [s.center.0, s.center.1]).collect();
    let target = tape.constant(Tensor::new(vec![scenes.len(), 2], targets)?);
    let diff = tape.sub(head.center, target)?;
    let sq = tape.square(diff)?;
    let sum = tape.sum_all(sq)?;
    let reg = tape.scale(sum, 1.0 / scenes.len() as f64)?;
    let weighted = tape.scale(reg, beta)?;
    let total = tape.add(ce, weighted)?;
    Ok(LossVars { total, ce, reg })
}

/// IoU of two axis-aligned 8x8-pixel boxes centered at `a` and `b` (normalized coordinates).
pub fn iou_proxy(a: (f64, f64), b: (f64, f64)) -> f64 {
    let side = IOU_BOX_PIXELS / IMAGE_SIZE as f64;
    let overlap = |u: f64, v: f64| (side - (u - v).abs()).max(0.0);
    let inter = overlap(a.0, b.0) * overlap(a.1, b.1);
    inter / (2.0 * side * side - inter)
}

pub fn iou_bin(iou: f64) -> usize {
    ((iou * IOU_BINS as f64).floor() as usize).min(IOU_BINS - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Mean Euclidean center error in normalized units.
    pub center_error: f64,
    pub iou_histogram: [usize; IOU_BINS],
    /// Fraction of samples with IoU proxy at least 0.5.
    pub iou_at_half: f64,
}

pub fn evaluate(model: &ToyDetector, scenes: &[SyntheticScene], exec: Execution) -> Result<EvalMetrics> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = map_indexed(exec, scenes.len(), |i| model.predict(&scenes[i]));
    let mut correct = 0usize;
    let mut err = 0.0;
    let mut hist = [0usize; IOU_BINS];
    let mut above = 0usize;
    for (p, s) in preds.into_iter().zip(scenes) {
        let p = p?;
        correct += (p.class() == s.class_label) as usize;
        err += ((p.center.0 - s.center.0).powi(2) + (p.center.1 - s.center.1).powi(2)).sqrt();
        let iou = iou_proxy(p.center, s.center);
        hist[iou_bin(iou)] += 1;
        above += (iou >= 0.5) as usize;
    }
    let n = scenes.len() as f64;
    Ok(EvalMetrics {
        accuracy: correct as f64 / n,
        center_error: err / n,
        iou_histogram: hist,
        iou_at_half: above as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_scene;

    #[test]
    fn forward_shapes() {
        for gab in [false, true] {
            let m = ToyDetector::new(
                ModelConfig {
                    gabfusion: gab,
                    ..Default::default()
                },
                0,
            )
            .unwrap();
            let mut tape = Tape::new();
            let b = m.bind(&mut tape, true);
            let x = tape.constant(scene_input(&generate_scene(0, 0)));
            let (bb, h) = m.forward(&mut tape, &b, x).unwrap();
            assert_eq!(tape.shape(bb.shallow), &[1, 16, 32, 32]);
            assert_eq!(tape.shape(bb.deep), &[1, 32, 32, 32]);
            assert_eq!(tape.shape(h.fused), &[1, 48, 32, 32]);
            assert_eq!(tape.shape(h.probs), &[1, 4]);
            assert_eq!(tape.shape(h.center), &[1, 2]);
        }
    }

    #[test]
    fn task_loss_examples() {
        let s = generate_scene(3, 9);
        let mut perfect = vec![0.0; 4];
        perfect[s.class_label] = 1.0;
        assert_eq!(task_loss(&perfect, s.center, &s, 10.0).unwrap(), 0.0);
        let off = (s.center.0 + 0.1, s.center.1);
        assert!((task_loss(&perfect, off, &s, 10.0).unwrap() - 0.1).abs() < 1e-12);
        assert!(task_loss(&[0.5, 0.6, 0.0, 0.0], s.center, &s, 1.0).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou_proxy((0.5, 0.5), (0.5, 0.5)), 1.0);
        assert_eq!(iou_bin(1.0), 9);
        assert_eq!(iou_proxy((0.5, 0.5), (0.5 + 8.0 / 32.0, 0.5)), 0.0);
        let a = iou_proxy((0.3, 0.4), (0.35, 0.38));
        assert_eq!(a, iou_proxy((0.35, 0.38), (0.3, 0.4)));
    }

    #[test]
    fn calibration_requires_data() {
        let m = ToyDetector::new(ModelConfig::default(), 0).unwrap();
        let setup = QuantSetup {
            weight_bits: 4,
            act_bits: 4,
            kind: QuantizerKind::Lsq,
            extremes_8bit: true,
        };
        assert!(matches!(init_quantizers(&m, &setup, &[]), Err(Error::Uncalibrated)));
        let q = init_quantizers(&m, &setup, &[generate_scene(0, 1)]).unwrap();
        let qs = q.quantizers.as_ref().unwrap();
        assert_eq!(qs.len(), 12);
        assert_eq!(qs["stem.w"].config.bits, 8);
        assert_eq!(qs["shallow1.w"].config.bits, 4);
        assert_eq!(qs["cls.w"].config.bits, 8);
    }
}
