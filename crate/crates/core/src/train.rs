//! Full-precision training, QAT fine-tuning and the optimizers they share.
//!
//! A minibatch is processed one sample per tape. Per-sample gradients are computed in
//! parallel and summed in sample order, so results do not depend on the thread count.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{ada_loss, AdaSettings};
use crate::autodiff::{Tape, Var};
use crate::config::{OptimizerKind, TrainConfig};
use crate::data::{scene_input, Dataset, SyntheticScene, EVAL_INDEX_OFFSET};
use crate::error::{Error, Result};
use crate::metrics::{EpochMetrics, RunMetrics};
use crate::model::{evaluate, init_quantizers, task_loss_tape, Bindings, ToyDetector};
use crate::par::{map_indexed, Execution};
use crate::probe::{branch_gradient_magnitudes, GradientProbe};
use crate::tensor::Tensor;

pub const ALPHA_PARAM: &str = "fusion.alpha_logit";

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// SGD with momentum (`v = mu v + g; p -= lr v`) or Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        Optimizer {
            kind,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.keys().zip(grads.keys()).any(|(a, b)| a != b) {
            return Err(Error::InvalidArgument("parameter and gradient sets differ".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let n = p.numel();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for ((pv, &gv), m) in p.data_mut().iter_mut().zip(g.data()).zip(slot.m.iter_mut()) {
                        *m = self.momentum * *m + gv;
                        *pv -= lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for (((pv, &gv), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(slot.m.iter_mut())
                        .zip(slot.v.iter_mut())
                    {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                        *pv -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

fn quant_param_name(site: &str) -> String {
    format!("quant.{site}.range")
}

fn quant_offset_name(site: &str) -> String {
    format!("quant.{site}.offset")
}

/// Everything the optimizer updates, keyed by name.
pub fn trainable_params(model: &ToyDetector) -> BTreeMap<String, Tensor> {
    let mut out = model.params.clone();
    if model.fusion.balanced {
        out.insert(ALPHA_PARAM.into(), Tensor::scalar(model.fusion.alpha_logit));
    }
    for (site, q) in model.quantizers.iter().flatten() {
        if q.learns_step() || q.uses_clip() {
            out.insert(quant_param_name(site), Tensor::scalar(q.range_param()));
        }
        if q.learns_offset() {
            out.insert(quant_offset_name(site), Tensor::scalar(q.offset));
        }
    }
    out
}

/// Write updated values back and re-project quantizer ranges.
pub fn apply_params(model: &mut ToyDetector, params: &BTreeMap<String, Tensor>) {
    for (name, t) in params {
        if name == ALPHA_PARAM {
            model.fusion.alpha_logit = t.item();
        } else if let Some(p) = model.params.get_mut(name) {
            *p = t.clone();
        }
    }
    for (site, q) in model.quantizers.iter_mut().flatten() {
        if let Some(t) = params.get(&quant_param_name(site)) {
            if q.uses_clip() {
                q.clip = t.item();
            } else {
                q.step = t.item();
            }
        }
        if let Some(t) = params.get(&quant_offset_name(site)) {
            q.offset = t.item();
        }
        q.project();
    }
}

/// Trainable tape variables in the same order as [`trainable_params`].
fn trainable_vars(model: &ToyDetector, b: &Bindings) -> BTreeMap<String, Var> {
    let mut out: BTreeMap<String, Var> = b.params.clone();
    if model.fusion.balanced {
        out.insert(ALPHA_PARAM.into(), b.alpha_logit);
    }
    for (site, q) in model.quantizers.iter().flatten() {
        let v = b.quant[site];
        if q.learns_step() || q.uses_clip() {
            out.insert(quant_param_name(site), v.param);
        }
        if let (true, Some(o)) = (q.learns_offset(), v.offset) {
            out.insert(quant_offset_name(site), o);
        }
    }
    out
}

/// Distillation source for QAT.
#[derive(Clone, Copy)]
pub struct Distill<'a> {
    pub teacher: &'a ToyDetector,
    pub settings: AdaSettings,
}

struct SampleOutcome {
    grads: Vec<Tensor>,
    total: f64,
    ce: f64,
    reg: f64,
    ada: f64,
    shallow: f64,
    deep: f64,
}

fn sample_pass(
    model: &ToyDetector,
    scene: &SyntheticScene,
    beta: f64,
    distill: Option<Distill>,
) -> Result<SampleOutcome> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true);
    let x = tape.constant(scene_input(scene));
    let (_, head) = model.forward(&mut tape, &b, x)?;
    let task = task_loss_tape(&mut tape, &head, &[scene], beta)?;
    let (total, ada) = match distill {
        Some(d) => {
            let teacher = d.teacher.fused_features(scene)?;
            let unit = AdaSettings {
                weight: 1.0,
                ..d.settings
            };
            let div = ada_loss(&mut tape, &[teacher], &[head.fused], &unit)?;
            let weighted = tape.scale(div, d.settings.weight)?;
            (tape.add(task.total, weighted)?, tape.value(div).item())
        }
        None => (task.total, 0.0),
    };
    let grads = tape.backward(total)?;
    let (shallow, deep) = branch_gradient_magnitudes(&grads, head.fusion_shallow, head.fusion_deep);
    let vars = trainable_vars(model, &b);
    Ok(SampleOutcome {
        grads: vars.values().map(|&v| grads.get(v)).collect(),
        total: tape.value(total).item(),
        ce: tape.value(task.ce).item(),
        reg: tape.value(task.reg).item(),
        ada,
        shallow,
        deep,
    })
}

/// Train/eval split for one seed.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub eval: Dataset,
}

impl Split {
    pub fn generate(seed: u64, train_size: usize, eval_size: usize, exec: Execution) -> Self {
        Split {
            train: Dataset::generate(seed, 0, train_size, exec),
            eval: Dataset::generate(seed, EVAL_INDEX_OFFSET, eval_size, exec),
        }
    }

    pub fn for_config(cfg: &TrainConfig, exec: Execution) -> Self {
        Self::generate(cfg.run.seed, cfg.data.train_size, cfg.data.eval_size, exec)
    }
}

/// One optimization phase.
#[derive(Clone, Debug)]
pub struct FitPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub beta: f64,
    /// Seeds the minibatch order.
    pub shuffle_seed: u64,
    /// Record branch gradient magnitudes. Observation only.
    pub probe: bool,
    pub config_hash: String,
}

impl FitPlan {
    fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

const FP_STREAM: u64 = 0x5eed_f100;
const QAT_STREAM: u64 = 0x5eed_0a70;

pub fn fit(
    mut model: ToyDetector,
    plan: &FitPlan,
    split: &Split,
    distill: Option<Distill>,
    exec: Execution,
) -> Result<(ToyDetector, RunMetrics)> {
    let mut metrics = RunMetrics::new(plan.config_hash.clone());
    if plan.epochs == 0 {
        return Ok((model, metrics));
    }
    if split.train.is_empty() || split.eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = Optimizer::new(plan.optimizer, plan.momentum);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    for epoch in 0..plan.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.shuffle_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let lr = plan.lr_at(epoch);
        let mut probe = GradientProbe::new();
        let (mut total, mut ce, mut reg, mut ada) = (0.0, 0.0, 0.0, 0.0);
        for (batch_idx, batch) in order.chunks(plan.batch_size).enumerate() {
            let outcomes = map_indexed(exec, batch.len(), |i| {
                sample_pass(&model, &split.train.scenes[batch[i]], plan.beta, distill)
            });
            let diverged = |loss: f64| Error::Diverged {
                epoch,
                batch: batch_idx,
                loss,
            };
            let mut outs = Vec::with_capacity(batch.len());
            for o in outcomes {
                match o {
                    Ok(o) if o.total.is_finite() => outs.push(o),
                    Ok(o) => return Err(diverged(o.total)),
                    Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                    Err(e) => return Err(e),
                }
            }
            let n = outs.len() as f64;
            let mut params = trainable_params(&model);
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for (k, name) in params.keys().enumerate() {
                let mut acc = outs[0].grads[k].clone();
                for o in &outs[1..] {
                    acc.data_mut()
                        .iter_mut()
                        .zip(o.grads[k].data())
                        .for_each(|(a, g)| *a += g);
                }
                acc.data_mut().iter_mut().for_each(|a| *a /= n);
                grads.insert(name.clone(), acc);
            }
            if grads.values().any(|g| !g.all_finite()) {
                return Err(diverged(f64::NAN));
            }
            if plan.probe {
                let s: f64 = outs.iter().map(|o| o.shallow).sum();
                let d: f64 = outs.iter().map(|o| o.deep).sum();
                probe.record(s / (n * n), d / (n * n));
            }
            for o in &outs {
                total += o.total;
                ce += o.ce;
                reg += o.reg;
                ada += o.ada;
            }
            opt.step(&mut params, &grads, lr)?;
            apply_params(&mut model, &params);
        }
        let count = split.train.len() as f64;
        let eval = evaluate(&model, &split.eval.scenes, exec)?;
        let (grad_shallow, grad_deep) = if plan.probe { probe.read()? } else { (0.0, 0.0) };
        metrics.epochs.push(EpochMetrics {
            epoch,
            total_loss: total / count,
            ce_loss: ce / count,
            reg_loss: reg / count,
            ada_loss: ada / count,
            accuracy: eval.accuracy,
            center_error: eval.center_error,
            grad_shallow,
            grad_deep,
            alpha: if model.fusion.balanced {
                model.fusion.alpha()
            } else {
                f64::NAN
            },
            iou_at_half: eval.iou_at_half,
            iou_histogram: eval.iou_histogram,
        });
    }
    Ok((model, metrics))
}

fn fp_plan(cfg: &TrainConfig) -> FitPlan {
    FitPlan {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        lr_decay_epochs: cfg.train.lr_decay_epochs.clone(),
        lr_decay: cfg.train.lr_decay,
        optimizer: cfg.train.optimizer,
        momentum: cfg.train.momentum,
        beta: cfg.train.beta,
        shuffle_seed: cfg.run.seed ^ FP_STREAM,
        probe: true,
        config_hash: cfg.teacher_config().hash(),
    }
}

fn qat_plan(cfg: &TrainConfig) -> FitPlan {
    FitPlan {
        epochs: cfg.qat.epochs,
        lr: cfg.train.lr * cfg.qat.lr_scale,
        lr_decay_epochs: cfg.qat.lr_decay_epochs.clone(),
        shuffle_seed: cfg.run.seed ^ QAT_STREAM,
        config_hash: cfg.hash(),
        ..fp_plan(cfg)
    }
}

/// Train the full-precision model described by `cfg` (its `[qat]` section is ignored).
pub fn train_full_precision(cfg: &TrainConfig, exec: Execution) -> Result<(ToyDetector, RunMetrics)> {
    let split = Split::for_config(cfg, exec);
    train_full_precision_on(cfg, &split, exec)
}

pub fn train_full_precision_on(cfg: &TrainConfig, split: &Split, exec: Execution) -> Result<(ToyDetector, RunMetrics)> {
    cfg.validate()?;
    let model = ToyDetector::new(cfg.model.clone(), cfg.run.seed)?;
    fit(model, &fp_plan(cfg), split, None, exec)
}

/// Attach calibrated quantizers to a copy of `teacher` and fine-tune it.
pub fn finetune_qat(cfg: &TrainConfig, teacher: &ToyDetector, exec: Execution) -> Result<(ToyDetector, RunMetrics)> {
    let split = Split::for_config(cfg, exec);
    finetune_qat_on(cfg, teacher, &split, exec)
}

pub fn finetune_qat_on(
    cfg: &TrainConfig,
    teacher: &ToyDetector,
    split: &Split,
    exec: Execution,
) -> Result<(ToyDetector, RunMetrics)> {
    cfg.validate()?;
    check_teacher(cfg, teacher)?;
    let calib = cfg.data.calibration_size.min(split.train.len());
    let student = init_quantizers(teacher, &cfg.quant_setup(), &split.train.scenes[..calib])?;
    let distill = cfg.ada_settings().map(|settings| Distill { teacher, settings });
    fit(student, &qat_plan(cfg), split, distill, exec)
}

pub fn check_teacher(cfg: &TrainConfig, teacher: &ToyDetector) -> Result<()> {
    let (expected, found) = (cfg.model.architecture_hash(), teacher.config.architecture_hash());
    if expected != found {
        return Err(Error::ArchitectureMismatch { expected, found });
    }
    if teacher.is_quantized() {
        return Err(Error::Checkpoint("teacher already carries quantizers".into()));
    }
    Ok(())
}
