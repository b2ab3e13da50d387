//! Plot-ready tables from a directory of runs.
//!
//! Every directory below the root that holds a `metrics.csv` is one run; its config is
//! read from `checkpoint.ckpt` in the same directory when present. Three files are
//! written, each starting with the producing hash and a column header:
//!
//! * `gradient_vs_epoch.csv`: per run, epoch and branch, the mean |grad| at the fusion node;
//! * `iou_histogram.csv`: final-epoch IoU-proxy histogram per run, with fractions;
//! * `accuracy_vs_bitwidth.csv`: final accuracy and center error per run and bit-width.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::stable_hash;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::RunMetrics;
use crate::model::IOU_BINS;

pub const GRADIENT_FILE: &str = "gradient_vs_epoch.csv";
pub const IOU_FILE: &str = "iou_histogram.csv";
pub const BITWIDTH_FILE: &str = "accuracy_vs_bitwidth.csv";

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
    pub checkpoint: Option<Checkpoint>,
}

impl RunRecord {
    fn id(&self) -> &str {
        &self.metrics.config_hash
    }

    fn describe(&self) -> (String, String, String, String, String) {
        match &self.checkpoint {
            Some(c) if c.model.is_quantized() => (
                c.config.qat.weight_bits.to_string(),
                c.config.qat.act_bits.to_string(),
                c.config.qat.quantizer.name().to_string(),
                c.config.model.gabfusion.to_string(),
                c.config.qat.ada.name().to_string(),
            ),
            Some(c) => (
                "32".into(),
                "32".into(),
                "none".into(),
                c.config.model.gabfusion.to_string(),
                "none".into(),
            ),
            None => (
                "unknown".into(),
                "unknown".into(),
                "unknown".into(),
                "unknown".into(),
                "unknown".into(),
            ),
        }
    }
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_runs(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.csv") {
            out.push(p);
        }
    }
    Ok(())
}

/// Collect every run below `root`, sorted by path.
pub fn collect_runs(root: &Path) -> Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    find_runs(root, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    paths
        .into_iter()
        .map(|p| {
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
            let metrics = RunMetrics::read(&p)?;
            let checkpoint = Checkpoint::load(dir.join("checkpoint.ckpt")).ok();
            Ok(RunRecord {
                dir,
                metrics,
                checkpoint,
            })
        })
        .collect()
}

pub fn gradient_table(hash: &str, runs: &[RunRecord]) -> String {
    let mut out = format!("# config_hash={hash}\nrun,epoch,branch,mean_abs_grad\n");
    for r in runs {
        for e in &r.metrics.epochs {
            let _ = writeln!(out, "{},{},shallow,{}", r.id(), e.epoch, e.grad_shallow);
            let _ = writeln!(out, "{},{},deep,{}", r.id(), e.epoch, e.grad_deep);
        }
    }
    out
}

pub fn iou_table(hash: &str, runs: &[RunRecord]) -> String {
    let mut out = format!("# config_hash={hash}\nrun,bin,lower,upper,count,fraction\n");
    for r in runs {
        let Some(last) = r.metrics.last() else { continue };
        let total: usize = last.iou_histogram.iter().sum();
        for (b, &count) in last.iou_histogram.iter().enumerate() {
            let lower = b as f64 / IOU_BINS as f64;
            let upper = (b + 1) as f64 / IOU_BINS as f64;
            let frac = if total > 0 { count as f64 / total as f64 } else { 0.0 };
            let _ = writeln!(out, "{},{b},{lower},{upper},{count},{frac}", r.id());
        }
    }
    out
}

pub fn bitwidth_table(hash: &str, runs: &[RunRecord]) -> String {
    let mut out = format!(
        "# config_hash={hash}\nrun,weight_bits,act_bits,quantizer,gabfusion,ada,accuracy,center_error,iou_at_half\n"
    );
    for r in runs {
        let Some(last) = r.metrics.last() else { continue };
        let (wb, ab, q, g, a) = r.describe();
        let _ = writeln!(
            out,
            "{},{wb},{ab},{q},{g},{a},{},{},{}",
            r.id(),
            last.accuracy,
            last.center_error,
            last.iou_at_half
        );
    }
    out
}

/// Write the three tables into `out_dir` and return their paths.
pub fn write_report(metrics_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let runs = collect_runs(metrics_dir)?;
    let ids: Vec<&str> = runs.iter().map(RunRecord::id).collect();
    let hash = stable_hash(&ids);
    let files = [
        (GRADIENT_FILE, gradient_table(&hash, &runs)),
        (IOU_FILE, iou_table(&hash, &runs)),
        (BITWIDTH_FILE, bitwidth_table(&hash, &runs)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let p = out_dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}
