//! Evaluation measures for continuous prediction maps against binary ground
//! truth: IoU at a fixed 0.5 threshold, mean absolute error, the enhanced
//! alignment measure, and the Pearson correlation coefficient.
//!
//! All four are pure functions computed in f64 regardless of the map's
//! storage precision. Reports are emitted as line-delimited JSON: one record
//! per (fold, episode, image) followed by one aggregate record per fold with
//! arithmetic-mean scores.

use crate::error::{Result, TensorError};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Binarization threshold shared by IoU and the E-measure.
pub const BIN_THRESHOLD: f64 = 0.5;

fn check_shapes<T: Scalar>(op: &'static str, pred: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Intersection over union of the thresholded prediction against the binary
/// ground truth; an empty union scores 1 (correct all-background output).
pub fn iou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<f64> {
    check_shapes("iou", pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let p = p.to_f64_lossy() > threshold;
        let g = g.to_f64_lossy() > 0.5;
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mean absolute error over all pixels.
pub fn mae<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_shapes("mae", pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p.to_f64_lossy() - g.to_f64_lossy()).abs())
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Enhanced alignment measure on the thresholded prediction. Degenerate
/// ground truths follow the measure's reference behavior: all-zero GT scores
/// `1 - mean(P)`, all-one GT scores `mean(P)`.
pub fn e_measure<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<f64> {
    check_shapes("e_measure", pred, gt)?;
    let n = pred.numel() as f64;
    let p: Vec<f64> = pred
        .data()
        .iter()
        .map(|&v| f64::from(v.to_f64_lossy() > threshold))
        .collect();
    let g: Vec<f64> = gt.data().iter().map(|&v| f64::from(v.to_f64_lossy() > 0.5)).collect();
    let mean_p = p.iter().sum::<f64>() / n;
    let mean_g = g.iter().sum::<f64>() / n;
    if mean_g == 0.0 {
        return Ok(1.0 - mean_p);
    }
    if mean_g == 1.0 {
        return Ok(mean_p);
    }
    let mut acc = 0.0;
    for (pv, gv) in p.iter().zip(&g) {
        let fp = pv - mean_p;
        let fg = gv - mean_g;
        let denom = fp * fp + fg * fg;
        let xi = if denom == 0.0 { 0.0 } else { 2.0 * fp * fg / denom };
        let enhanced = (xi + 1.0) * (xi + 1.0) / 4.0;
        acc += enhanced;
    }
    Ok(acc / n)
}

/// Pearson correlation over pixels; zero-variance inputs report 0 with the
/// degeneracy flag set rather than NaN.
pub fn cc<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(f64, bool)> {
    check_shapes("cc", pred, gt)?;
    let n = pred.numel() as f64;
    let mean = |d: &[T]| d.iter().map(|&v| v.to_f64_lossy()).sum::<f64>() / n;
    let (mp, mg) = (mean(pred.data()), mean(gt.data()));
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vg = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let dp = p.to_f64_lossy() - mp;
        let dg = g.to_f64_lossy() - mg;
        cov += dp * dg;
        vp += dp * dp;
        vg += dg * dg;
    }
    if vp == 0.0 || vg == 0.0 {
        return Ok((0.0, true));
    }
    Ok((cov / (vp * vg).sqrt(), false))
}

/// Scores for one prediction/ground-truth pair.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageScores {
    pub iou: f64,
    pub mae: f64,
    pub e_phi: f64,
    pub cc: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Evaluates all four measures at the standard threshold.
pub fn score_image<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ImageScores> {
    let (cc_val, degenerate) = cc(pred, gt)?;
    let mut flags = Vec::new();
    if degenerate {
        flags.push("cc_degenerate".to_string());
    }
    Ok(ImageScores {
        iou: iou(pred, gt, BIN_THRESHOLD)?,
        mae: mae(pred, gt)?,
        e_phi: e_measure(pred, gt, BIN_THRESHOLD)?,
        cc: cc_val,
        flags,
    })
}

/// One line of the evaluation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRecord {
    pub fold: usize,
    pub episode_id: u64,
    pub image_id: String,
    pub iou: f64,
    pub mae: f64,
    pub e_phi: f64,
    pub cc: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Fold-level aggregate: arithmetic means over all scored images.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub fold: usize,
    pub count: usize,
    pub iou: f64,
    pub mae: f64,
    pub e_phi: f64,
    pub cc: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl MetricsReport {
    /// Mean of per-image records; aggregation order is fixed by the record
    /// order.
    pub fn aggregate(fold: usize, records: &[ReportRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mut flags: Vec<String> = Vec::new();
        for r in records {
            for f in &r.flags {
                if !flags.contains(f) {
                    flags.push(f.clone());
                }
            }
        }
        MetricsReport {
            fold,
            count: records.len(),
            iou: records.iter().map(|r| r.iou).sum::<f64>() / n,
            mae: records.iter().map(|r| r.mae).sum::<f64>() / n,
            e_phi: records.iter().map(|r| r.e_phi).sum::<f64>() / n,
            cc: records.iter().map(|r| r.cc).sum::<f64>() / n,
            flags,
        }
    }
}

/// Serialized report line: per-image records then the aggregate.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportLine {
    Image(ReportRecord),
    Aggregate(MetricsReport),
}

/// Writes one JSON object per line.
pub fn write_report<W: Write>(
    mut w: W,
    records: &[ReportRecord],
    aggregate: &MetricsReport,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &ReportLine::Image(r.clone()))?;
        writeln!(w)?;
    }
    serde_json::to_writer(&mut w, &ReportLine::Aggregate(aggregate.clone()))?;
    writeln!(w)?;
    Ok(())
}

/// Parses a report written by [`write_report`].
pub fn read_report(text: &str) -> serde_json::Result<(Vec<ReportRecord>, Vec<MetricsReport>)> {
    let mut records = Vec::new();
    let mut aggregates = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<ReportLine>(line)? {
            ReportLine::Image(r) => records.push(r),
            ReportLine::Aggregate(a) => aggregates.push(a),
        }
    }
    Ok((records, aggregates))
}
