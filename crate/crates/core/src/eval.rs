//! Scoring of predicted label rasters against ground truth, and wall-clock
//! summaries of pipeline runs.
//!
//! The dynamic class (label 1) is the positive class. Ground-debug labels
//! (value 2) in predictions count as static for scoring, so enabling the
//! debug output never changes a score.

use crate::pipeline::ScanStats;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("sequences misaligned: {0}")]
    MisalignedSequences(String),
}

/// Confusion counts of one scan. `iou` is 1.0 when all three counts are
/// zero; `defined` distinguishes that convention from a real perfect score.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScanScore {
    pub scan_index: usize,
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub iou: f64,
    pub defined: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct IoUReport {
    pub per_scan: Vec<ScanScore>,
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    /// IoU of the summed counts over all scans.
    pub sequence_iou: f64,
    /// Mean of the per-scan IoUs, skipping scans where it is undefined.
    pub mean_scan_iou: f64,
}

fn iou_of(tp: u64, fp: u64, fn_: u64) -> (f64, bool) {
    let denom = tp + fp + fn_;
    if denom == 0 {
        (1.0, false)
    } else {
        (tp as f64 / denom as f64, true)
    }
}

fn score_scan(pred: &[u32], truth: &[u32]) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        let p_dyn = p == 1;
        let t_dyn = t == 1;
        match (p_dyn, t_dyn) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fn_)
}

/// Scores predictions against truth, scan by scan. Sequences must have the
/// same length and matching per-scan sizes.
pub fn compute_iou(pred: &[Vec<u32>], truth: &[Vec<u32>]) -> Result<IoUReport, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::MisalignedSequences(format!(
            "{} predicted scans vs {} truth scans",
            pred.len(),
            truth.len()
        )));
    }
    let mut per_scan = Vec::with_capacity(pred.len());
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p.len() != t.len() {
            return Err(EvalError::MisalignedSequences(format!(
                "scan {i}: {} predicted labels vs {} truth labels",
                p.len(),
                t.len()
            )));
        }
        let (s_tp, s_fp, s_fn) = score_scan(p, t);
        let (iou, defined) = iou_of(s_tp, s_fp, s_fn);
        per_scan.push(ScanScore {
            scan_index: i,
            true_pos: s_tp,
            false_pos: s_fp,
            false_neg: s_fn,
            iou,
            defined,
        });
        tp += s_tp;
        fp += s_fp;
        fn_ += s_fn;
    }
    let (sequence_iou, _) = iou_of(tp, fp, fn_);
    let scored: Vec<f64> = per_scan
        .iter()
        .filter(|s| s.defined)
        .map(|s| s.iou)
        .collect();
    let mean_scan_iou = if scored.is_empty() {
        1.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(IoUReport {
        per_scan,
        true_pos: tp,
        false_pos: fp,
        false_neg: fn_,
        sequence_iou,
        mean_scan_iou,
    })
}

impl IoUReport {
    /// Multi-line human-readable form: one row per scan plus a summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("scan        tp        fp        fn     iou\n");
        for s in &self.per_scan {
            out.push_str(&format!(
                "{:4} {:9} {:9} {:9}  {:.4}{}\n",
                s.scan_index,
                s.true_pos,
                s.false_pos,
                s.false_neg,
                s.iou,
                if s.defined { "" } else { " (no positives)" }
            ));
        }
        out.push_str(&format!(
            "sequence iou {:.6} (tp {} fp {} fn {}), mean per-scan iou {:.6}\n",
            self.sequence_iou, self.true_pos, self.false_pos, self.false_neg, self.mean_scan_iou
        ));
        out
    }
}

// ---------------------------------------------------------------------------
// Throughput

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub mean_seconds: f64,
    pub p95_seconds: f64,
}

/// Per-stage wall-clock summary of a labeling run. `stages` is empty when
/// the run had no scans.
#[derive(Debug, Clone, Serialize)]
pub struct ThroughputReport {
    pub scan_count: usize,
    pub stages: Vec<StageReport>,
    pub total_mean_seconds: f64,
    pub total_p95_seconds: f64,
}

/// Nearest-rank 95th percentile of an unsorted sample.
fn p95(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((samples.len() as f64) * 0.95).ceil() as usize;
    samples[rank.max(1) - 1]
}

pub fn measure_throughput(stats: &[ScanStats]) -> ThroughputReport {
    if stats.is_empty() {
        return ThroughputReport {
            scan_count: 0,
            stages: Vec::new(),
            total_mean_seconds: 0.0,
            total_p95_seconds: 0.0,
        };
    }
    let columns: [(&str, fn(&ScanStats) -> f64); 6] = [
        ("io", |s| s.timings.io.as_secs_f64()),
        ("undistort", |s| s.timings.undistort.as_secs_f64()),
        ("integrate", |s| s.timings.integrate.as_secs_f64()),
        ("ground", |s| s.timings.ground.as_secs_f64()),
        ("cluster", |s| s.timings.cluster.as_secs_f64()),
        ("validate", |s| s.timings.validate.as_secs_f64()),
    ];
    let mut stages = Vec::with_capacity(columns.len());
    for (name, get) in columns {
        let mut samples: Vec<f64> = stats.iter().map(get).collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        stages.push(StageReport {
            stage: name.to_string(),
            mean_seconds: mean,
            p95_seconds: p95(&mut samples),
        });
    }
    let mut totals: Vec<f64> = stats
        .iter()
        .map(|s| s.timings.total().as_secs_f64())
        .collect();
    let total_mean = totals.iter().sum::<f64>() / totals.len() as f64;
    ThroughputReport {
        scan_count: stats.len(),
        stages,
        total_mean_seconds: total_mean,
        total_p95_seconds: p95(&mut totals),
    }
}

impl ThroughputReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("{} scans\n", self.scan_count);
        for s in &self.stages {
            out.push_str(&format!(
                "{:<10} mean {:8.4} s   p95 {:8.4} s\n",
                s.stage, s.mean_seconds, s.p95_seconds
            ));
        }
        out.push_str(&format!(
            "{:<10} mean {:8.4} s   p95 {:8.4} s\n",
            "total", self.total_mean_seconds, self.total_p95_seconds
        ));
        out
    }
}
