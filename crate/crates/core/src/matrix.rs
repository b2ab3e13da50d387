//! Experiment matrix: a cartesian grid of QAT runs over bit-widths, quantizers, fusion
//! variants and seeds.
//!
//! Layout under the output directory:
//!
//! ```text
//! teachers/<teacher hash>/{checkpoint.ckpt, metrics.csv}
//! cells/<config hash>/{config.toml, checkpoint.ckpt, metrics.csv}   (or error.txt)
//! summary.csv, summary.txt
//! ```
//!
//! A cell is complete once its `metrics.csv` exists; completed cells are skipped on
//! rerun, so an interrupted matrix resumes where it stopped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::Divergence;
use crate::checkpoint::Checkpoint;
use crate::config::{stable_hash, TrainConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::RunMetrics;
use crate::model::ToyDetector;
use crate::par::{map_indexed, Execution};
use crate::quant::QuantizerKind;
use crate::train::{finetune_qat_on, train_full_precision_on, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Gabfusion,
    GabfusionKl,
    GabfusionJs,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Gabfusion,
        Variant::GabfusionKl,
        Variant::GabfusionJs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Gabfusion => "gabfusion",
            Variant::GabfusionKl => "gabfusion-kl",
            Variant::GabfusionJs => "gabfusion-js",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        cfg.model.gabfusion = self != Variant::Baseline;
        cfg.qat.ada = match self {
            Variant::Baseline | Variant::Gabfusion => Divergence::None,
            Variant::GabfusionKl => Divergence::Kl,
            Variant::GabfusionJs => Divergence::Js,
        };
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    /// Bit-widths applied to both weights and activations.
    pub bits: Vec<u32>,
    pub quantizers: Vec<QuantizerKind>,
    pub variants: Vec<Variant>,
    pub ada_weights: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            bits: vec![3, 4],
            quantizers: vec![QuantizerKind::Lsq],
            variants: Variant::ALL.to_vec(),
            ada_weights: vec![1.0],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// A template config plus the grid expanded over it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub base: TrainConfig,
    pub grid: Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub id: String,
    pub group: GroupKey,
    pub config: TrainConfig,
}

/// Cells differing only by seed share a group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupKey {
    pub bits: u32,
    pub quantizer: QuantizerKind,
    pub variant: Variant,
    pub ada_weight: f64,
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.base.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn hash(&self) -> String {
        stable_hash(self)
    }

    /// Expand the grid. Non-distilling variants ignore the distillation weight, so they
    /// appear once rather than once per weight.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let g = &self.grid;
        let mut out = Vec::new();
        for &bits in &g.bits {
            for &quantizer in &g.quantizers {
                for &variant in &g.variants {
                    let distills = matches!(variant, Variant::GabfusionKl | Variant::GabfusionJs);
                    let weights = if distills { g.ada_weights.clone() } else { vec![1.0] };
                    for ada_weight in weights {
                        for &seed in &g.seeds {
                            let mut cfg = self.base.clone();
                            cfg.run.seed = seed;
                            cfg.qat.weight_bits = bits;
                            cfg.qat.act_bits = bits;
                            cfg.qat.quantizer = quantizer;
                            cfg.qat.ada_weight = ada_weight;
                            variant.apply(&mut cfg);
                            cfg.validate()?;
                            out.push(Cell {
                                id: cfg.hash(),
                                group: GroupKey {
                                    bits,
                                    quantizer,
                                    variant,
                                    ada_weight,
                                },
                                config: cfg,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Completed,
    /// Found complete on disk and not re-run.
    Skipped,
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: Cell,
    pub status: CellStatus,
    pub metrics: Option<RunMetrics>,
}

/// Load or train the teacher for `cfg`, caching it under `root/teachers`.
pub fn teacher_for(root: &Path, cfg: &TrainConfig, split: &Split, exec: Execution) -> Result<ToyDetector> {
    let tcfg = cfg.teacher_config();
    let dir = root.join("teachers").join(tcfg.hash());
    let ckpt_path = dir.join("checkpoint.ckpt");
    let metrics_path = dir.join("metrics.csv");
    if metrics_path.exists() {
        if let Ok(ckpt) = Checkpoint::load(&ckpt_path) {
            return Ok(ckpt.model);
        }
    }
    let (model, metrics) = train_full_precision_on(&tcfg, split, exec)?;
    Checkpoint::new(tcfg, model.clone()).save(&ckpt_path)?;
    metrics.write(&metrics_path)?;
    Ok(model)
}

fn cell_dir(root: &Path, id: &str) -> PathBuf {
    root.join("cells").join(id)
}

fn run_cell(root: &Path, cell: &Cell, exec: Execution) -> Result<RunMetrics> {
    let dir = cell_dir(root, &cell.id);
    let split = Split::for_config(&cell.config, exec);
    let teacher = teacher_for(root, &cell.config, &split, exec)?;
    let (student, metrics) = finetune_qat_on(&cell.config, &teacher, &split, exec)?;
    write_atomic(&dir.join("config.toml"), cell.config.to_toml_string().as_bytes())?;
    Checkpoint::new(cell.config.clone(), student).save(dir.join("checkpoint.ckpt"))?;
    metrics.write(dir.join("metrics.csv"))?;
    Ok(metrics)
}

fn completed(root: &Path, id: &str) -> Option<RunMetrics> {
    RunMetrics::read(cell_dir(root, id).join("metrics.csv")).ok()
}

/// Run every cell not already complete, `jobs` at a time, then write the summaries.
/// Teachers are trained first so concurrent cells never race on the same teacher.
pub fn run_matrix(spec: &ExperimentSpec, root: &Path, jobs: usize) -> Result<Vec<CellOutcome>> {
    let cells = spec.cells()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let pending: Vec<&Cell> = cells.iter().filter(|c| completed(root, &c.id).is_none()).collect();

    let mut teacher_cfgs: BTreeMap<String, TrainConfig> = BTreeMap::new();
    for c in &pending {
        let t = c.config.teacher_config();
        teacher_cfgs.entry(t.hash()).or_insert(t);
    }
    let teacher_cfgs: Vec<TrainConfig> = teacher_cfgs.into_values().collect();
    let teacher_errors: BTreeMap<String, String> = with_jobs(jobs, || {
        map_indexed(Execution::available(), teacher_cfgs.len(), |i| {
            let t = &teacher_cfgs[i];
            let split = Split::for_config(t, Execution::Sequential);
            teacher_for(root, t, &split, Execution::Sequential)
                .err()
                .map(|e| (t.hash(), e.to_string()))
        })
    })
    .into_iter()
    .flatten()
    .collect();

    let results = with_jobs(jobs, || {
        map_indexed(Execution::available(), cells.len(), |i| {
            let cell = &cells[i];
            if let Some(m) = completed(root, &cell.id) {
                return (CellStatus::Skipped, Some(m));
            }
            if let Some(e) = teacher_errors.get(&cell.config.teacher_config().hash()) {
                return (CellStatus::Failed(format!("teacher: {e}")), None);
            }
            match run_cell(root, cell, Execution::Sequential) {
                Ok(m) => (CellStatus::Completed, Some(m)),
                Err(e) => {
                    let _ = write_atomic(&cell_dir(root, &cell.id).join("error.txt"), e.to_string().as_bytes());
                    (CellStatus::Failed(e.to_string()), None)
                }
            }
        })
    });
    let outcomes: Vec<CellOutcome> = cells
        .into_iter()
        .zip(results)
        .map(|(cell, (status, metrics))| CellOutcome { cell, status, metrics })
        .collect();
    let rows = summarize(&outcomes);
    write_atomic(&root.join("summary.csv"), summary_csv(&spec.hash(), &rows).as_bytes())?;
    write_atomic(&root.join("summary.txt"), summary_text(&spec.hash(), &rows).as_bytes())?;
    Ok(outcomes)
}

#[cfg(feature = "parallel")]
fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_jobs<T: Send>(_jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    f()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: GroupKey,
    pub runs: usize,
    pub failed: usize,
    pub accuracy: MeanStd,
    pub center_error: MeanStd,
    pub iou_at_half: MeanStd,
    pub grad_ratio: MeanStd,
}

/// Final-epoch metrics averaged over seeds, one row per group, in grid order.
pub fn summarize(outcomes: &[CellOutcome]) -> Vec<SummaryRow> {
    let mut groups: Vec<(GroupKey, Vec<&CellOutcome>)> = Vec::new();
    for o in outcomes {
        match groups.iter_mut().find(|(k, _)| *k == o.cell.group) {
            Some((_, v)) => v.push(o),
            None => groups.push((o.cell.group.clone(), vec![o])),
        }
    }
    groups
        .into_iter()
        .filter_map(|(group, members)| {
            let finals: Vec<(&RunMetrics, _)> = members
                .iter()
                .filter_map(|o| o.metrics.as_ref())
                .filter_map(|m| m.last().map(|e| (m, e)))
                .collect();
            if finals.is_empty() {
                return None;
            }
            let col = |f: &dyn Fn(&crate::metrics::EpochMetrics) -> f64| {
                MeanStd::of(&finals.iter().map(|(_, e)| f(e)).collect::<Vec<_>>())
            };
            let ratios: Vec<f64> = finals.iter().filter_map(|(m, _)| m.final_third_grad_ratio()).collect();
            Some(SummaryRow {
                runs: finals.len(),
                failed: members.len() - finals.len(),
                accuracy: col(&|e| e.accuracy),
                center_error: col(&|e| e.center_error),
                iou_at_half: col(&|e| e.iou_at_half),
                grad_ratio: MeanStd::of(&ratios),
                group,
            })
        })
        .collect()
}

const SUMMARY_COLUMNS: &str = "bits,quantizer,variant,ada_weight,runs,failed,accuracy_mean,accuracy_std,center_error_mean,center_error_std,iou_at_half_mean,iou_at_half_std,grad_ratio_mean,grad_ratio_std";

pub fn summary_csv(spec_hash: &str, rows: &[SummaryRow]) -> String {
    let mut out = format!("# config_hash={spec_hash}\n{SUMMARY_COLUMNS}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.group.bits,
            r.group.quantizer.name(),
            r.group.variant.name(),
            r.group.ada_weight,
            r.runs,
            r.failed,
            r.accuracy.mean,
            r.accuracy.std,
            r.center_error.mean,
            r.center_error.std,
            r.iou_at_half.mean,
            r.iou_at_half.std,
            r.grad_ratio.mean,
            r.grad_ratio.std
        );
    }
    out
}

pub fn summary_text(spec_hash: &str, rows: &[SummaryRow]) -> String {
    let mut out = format!("# config_hash={spec_hash}\n");
    let _ = writeln!(
        out,
        "{:<5} {:<8} {:<13} {:>6} {:>4}  {:>17}  {:>19}  {:>17}  {:>17}",
        "bits", "quant", "variant", "ada_w", "runs", "accuracy", "center_error", "iou>=0.5", "grad deep/shallow"
    );
    let ms = |m: &MeanStd, p: usize| format!("{:.p$} ± {:.p$}", m.mean, m.std);
    for r in rows {
        let _ = writeln!(
            out,
            "W{}A{} {:<8} {:<13} {:>6} {:>4}  {:>17}  {:>19}  {:>17}  {:>17}",
            r.group.bits,
            r.group.bits,
            r.group.quantizer.name(),
            r.group.variant.name(),
            r.group.ada_weight,
            r.runs,
            ms(&r.accuracy, 4),
            ms(&r.center_error, 5),
            ms(&r.iou_at_half, 4),
            ms(&r.grad_ratio, 3),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_size() {
        let spec = ExperimentSpec::default();
        let cells = spec.cells().unwrap();
        assert_eq!(cells.len(), 2 * 4 * 5);
        let mut ids: Vec<&str> = cells.iter().map(|c| c.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), cells.len());
    }

    #[test]
    fn empty_grid_has_no_cells() {
        let spec = ExperimentSpec::from_toml_str("[grid]\nbits = []\n").unwrap();
        assert!(spec.cells().unwrap().is_empty());
        assert!(summarize(&[]).is_empty());
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        assert_eq!(MeanStd::of(&[5.0]).std, 0.0);
    }
}
