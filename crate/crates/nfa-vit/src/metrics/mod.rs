//! Evaluation protocol: image-level Recall@50 / F1 / AUC, pixel-level IoU,
//! slice reports by region kind and mask-area bin, the seg-only
//! classification rule, and the robustness perturbation grid.

mod perturb;

pub use perturb::{gauss_blur, jpeg_luma_approx, perturb, PerturbKind};

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::model::NfaVit;
use crate::noise::extract_noise;
use crate::synth::{ForgerySample, RegionKind};
use crate::tensor::Tensor;

/// Model outputs for one sample, plus the ground truth and slice tags.
#[derive(Clone)]
pub struct PredictionRecord {
    pub id: String,
    pub cls_prob: f64,
    pub mask_prob: Tensor,
    pub label: u8,
    pub gt_mask: Tensor,
    pub kind: RegionKind,
    pub area_fraction: f64,
}

/// Scalar metrics over one set of records. Metrics whose class is absent
/// in the slice are NaN (kind slices contain only forged samples).
#[derive(Clone, Copy, Debug)]
pub struct MetricsSummary {
    pub gen_r50: f64,
    pub real_r50: f64,
    pub image_f1: f64,
    pub auc: f64,
    pub mean_iou: f64,
    pub mean_pixel_f1: f64,
    pub n: usize,
    pub n_forged: usize,
}

/// Overall metrics plus per-kind and per-area-bin sub-reports.
pub struct MetricsReport {
    pub overall: MetricsSummary,
    pub by_kind: Vec<(String, MetricsSummary)>,
    pub by_area: Vec<(String, MetricsSummary)>,
}

pub const AREA_BINS: [&str; 5] = ["<20%", "<40%", "<60%", "<80%", "<100%"];

pub fn area_bin(area_fraction: f64) -> usize {
    ((area_fraction * 5.0).floor() as usize).min(4)
}

/// Fraction of `positive_class` records classified on the correct side of
/// probability 0.5 (forged detected at >= 0.5, real at < 0.5).
pub fn recall_at_50(records: &[PredictionRecord], positive_class: u8) -> Result<f64> {
    let of_class: Vec<&PredictionRecord> =
        records.iter().filter(|r| r.label == positive_class).collect();
    if of_class.is_empty() {
        return Err(Error::Value(format!(
            "recall_at_50: no records of class {positive_class}"
        )));
    }
    let hit = of_class
        .iter()
        .filter(|r| {
            if positive_class == 1 {
                r.cls_prob >= 0.5
            } else {
                r.cls_prob < 0.5
            }
        })
        .count();
    Ok(hit as f64 / of_class.len() as f64)
}

/// Rank-based ROC AUC with ties counted as half, computed exactly from
/// win/tie counts over (score, label) pairs.
pub fn auc_scores(scores: &[(f64, u8)]) -> Result<f64> {
    let mut neg: Vec<f64> = scores.iter().filter(|(_, l)| *l == 0).map(|(s, _)| *s).collect();
    let pos: Vec<f64> = scores.iter().filter(|(_, l)| *l == 1).map(|(s, _)| *s).collect();
    if neg.is_empty() || pos.is_empty() {
        return Err(Error::Value("auc: both classes must be present".into()));
    }
    neg.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut wins = 0u64;
    let mut ties = 0u64;
    for &p in &pos {
        let below = neg.partition_point(|&v| v < p) as u64;
        let below_or_eq = neg.partition_point(|&v| v <= p) as u64;
        wins += below;
        ties += below_or_eq - below;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (pos.len() as f64 * neg.len() as f64))
}

/// ROC AUC of the image-level probabilities.
pub fn auc(records: &[PredictionRecord]) -> Result<f64> {
    auc_scores(
        &records
            .iter()
            .map(|r| (r.cls_prob, r.label))
            .collect::<Vec<_>>(),
    )
}

/// Binarize at `threshold` and return (F1, IoU) of the forged class.
/// Empty ground truth: (1, 1) against an empty prediction, (0, 0) otherwise.
pub fn pixel_f1_iou(mask_prob: &Tensor, gt_mask: &Tensor, threshold: f64) -> Result<(f64, f64)> {
    if mask_prob.shape() != gt_mask.shape() {
        return Err(Error::Shape(format!(
            "pixel_f1_iou: prediction {:?} vs ground truth {:?}",
            mask_prob.shape(),
            gt_mask.shape()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in mask_prob.data().iter().zip(gt_mask.data()) {
        let pred = p as f64 >= threshold;
        let truth = g > 0.5;
        match (pred, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fn_ == 0 {
        // No forged pixels in the ground truth.
        return Ok(if fp == 0 { (1.0, 1.0) } else { (0.0, 0.0) });
    }
    if tp == 0 {
        return Ok((0.0, 0.0));
    }
    let f1 = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64);
    let iou = tp as f64 / (tp as f64 + fp as f64 + fn_ as f64);
    Ok((f1, iou))
}

/// Seg-loss-only classification rule: real iff every pixel is below 0.5.
pub fn seg_only_classification(mask_prob: &Tensor) -> u8 {
    let max = mask_prob.data().iter().cloned().fold(f32::MIN, f32::max);
    if (max as f64) < 0.5 {
        0
    } else {
        1
    }
}

/// Run the model over samples (in manifest order) and collect records.
pub fn predict_records(
    model: &NfaVit,
    samples: &[ForgerySample],
    pool: &ThreadPool,
) -> Result<Vec<PredictionRecord>> {
    pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let (cls_prob, mask_prob) = model.predict(&s.image)?;
                Ok(PredictionRecord {
                    id: s.id.clone(),
                    cls_prob: cls_prob as f64,
                    mask_prob,
                    label: s.label,
                    gt_mask: s.mask.clone(),
                    kind: s.kind,
                    area_fraction: s.area_fraction,
                })
            })
            .collect()
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Image-level F1 of the forged class at threshold 0.5.
fn image_f1(records: &[PredictionRecord]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for r in records {
        let pred = r.cls_prob >= 0.5;
        match (pred, r.label == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
}

/// All scalar metrics over one record set; absent-class metrics are NaN.
pub fn compute_summary(records: &[PredictionRecord]) -> MetricsSummary {
    let forged: Vec<&PredictionRecord> = records.iter().filter(|r| r.label == 1).collect();
    let n_forged = forged.len();
    let per_sample: Vec<(f64, f64)> = forged
        .iter()
        .map(|r| pixel_f1_iou(&r.mask_prob, &r.gt_mask, 0.5).unwrap_or((0.0, 0.0)))
        .collect();
    MetricsSummary {
        gen_r50: recall_at_50(records, 1).unwrap_or(f64::NAN),
        real_r50: recall_at_50(records, 0).unwrap_or(f64::NAN),
        image_f1: if records.is_empty() { f64::NAN } else { image_f1(records) },
        auc: auc(records).unwrap_or(f64::NAN),
        mean_iou: mean(per_sample.iter().map(|&(_, iou)| iou)),
        mean_pixel_f1: mean(per_sample.iter().map(|&(f1, _)| f1)),
        n: records.len(),
        n_forged,
    }
}

/// Overall metrics plus the kind and area-bin slices.
pub fn compute_report(records: &[PredictionRecord]) -> MetricsReport {
    let overall = compute_summary(records);
    let mut by_kind = Vec::new();
    for kind in [RegionKind::Object, RegionKind::Stuff, RegionKind::Background] {
        let slice: Vec<PredictionRecord> = records
            .iter()
            .filter(|r| r.kind == kind)
            .cloned()
            .collect();
        if !slice.is_empty() {
            by_kind.push((kind.as_str().to_string(), compute_summary(&slice)));
        }
    }
    let mut by_area = Vec::new();
    for (bin, label) in AREA_BINS.iter().enumerate() {
        let slice: Vec<PredictionRecord> = records
            .iter()
            .filter(|r| r.label == 1 && area_bin(r.area_fraction) == bin)
            .cloned()
            .collect();
        if !slice.is_empty() {
            by_area.push((label.to_string(), compute_summary(&slice)));
        }
    }
    MetricsReport {
        overall,
        by_kind,
        by_area,
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Plot-ready long format: slice_type,slice,metric,value.
pub fn report_csv(report: &MetricsReport) -> String {
    let mut s = String::from("slice_type,slice,metric,value\n");
    let mut emit = |slice_type: &str, slice: &str, m: &MetricsSummary| {
        for (name, value) in [
            ("gen_r50", m.gen_r50),
            ("real_r50", m.real_r50),
            ("image_f1", m.image_f1),
            ("auc", m.auc),
            ("mean_iou", m.mean_iou),
            ("pixel_f1", m.mean_pixel_f1),
            ("n", m.n as f64),
            ("n_forged", m.n_forged as f64),
        ] {
            s.push_str(&format!("{slice_type},{slice},{name},{}\n", fmt_metric(value)));
        }
    };
    emit("overall", "all", &report.overall);
    for (label, m) in &report.by_kind {
        emit("kind", label, m);
    }
    for (label, m) in &report.by_area {
        emit("area", label, m);
    }
    s
}

/// Image-level scores of the trivial residual-magnitude detector: forged
/// regions are denoised, so lower global residual energy means more
/// suspicious; the score is the negated mean absolute trace.
pub fn trivial_residual_scores(samples: &[ForgerySample]) -> Result<Vec<(f64, u8)>> {
    samples
        .iter()
        .map(|s| {
            let trace = extract_noise(&s.image)?;
            let mean_abs: f64 = trace.map.data().iter().map(|v| v.abs() as f64).sum::<f64>()
                / trace.map.numel() as f64;
            Ok((-mean_abs, s.label))
        })
        .collect()
}

// ── robustness protocol ────────────────────────────────────────────────

/// The appendix grid: two severities per perturbation kind.
pub const ROBUSTNESS_GRID: [(PerturbKind, u32); 6] = [
    (PerturbKind::GaussNoise, 1),
    (PerturbKind::GaussNoise, 3),
    (PerturbKind::GaussBlur, 1),
    (PerturbKind::GaussBlur, 3),
    (PerturbKind::Jpeg, 95),
    (PerturbKind::Jpeg, 75),
];

pub struct RobustnessReport {
    pub clean_gen_r50: f64,
    /// (kind, severity, gen_r50, delta vs clean) per grid cell.
    pub cells: Vec<(PerturbKind, u32, f64, f64)>,
    /// Severity monotonicity (within slack) per kind.
    pub monotonic: Vec<(PerturbKind, bool)>,
}

pub const MONOTONICITY_SLACK: f64 = 0.02;

/// Gen Recall@50 for clean inputs and every perturbation cell.
pub fn robustness_report(
    model: &NfaVit,
    samples: &[ForgerySample],
    pool: &ThreadPool,
) -> Result<RobustnessReport> {
    let records = predict_records(model, samples, pool)?;
    let clean = recall_at_50(&records, 1)?;
    let mut cells = Vec::new();
    for (kind, severity) in ROBUSTNESS_GRID {
        let perturbed: Vec<ForgerySample> = samples
            .iter()
            .map(|s| {
                let image = perturb(&s.image, kind, severity, s.seed ^ severity as u64)?;
                Ok(ForgerySample {
                    image,
                    ..s.clone()
                })
            })
            .collect::<Result<_>>()?;
        let records = predict_records(model, &perturbed, pool)?;
        let r50 = recall_at_50(&records, 1)?;
        cells.push((kind, severity, r50, r50 - clean));
    }
    let monotonic = [PerturbKind::GaussNoise, PerturbKind::GaussBlur, PerturbKind::Jpeg]
        .into_iter()
        .map(|kind| {
            let of_kind: Vec<f64> = cells
                .iter()
                .filter(|(k, ..)| *k == kind)
                .map(|&(_, _, r, _)| r)
                .collect();
            // Grid rows are ordered mild -> harsh for every kind.
            (kind, of_kind[1] <= of_kind[0] + MONOTONICITY_SLACK)
        })
        .collect();
    Ok(RobustnessReport {
        clean_gen_r50: clean,
        cells,
        monotonic,
    })
}

/// CSV: perturbation,severity,gen_r50,delta_vs_clean,monotonic_ok.
pub fn robustness_csv(report: &RobustnessReport) -> String {
    let mut s = String::from("perturbation,severity,gen_r50,delta_vs_clean,monotonic_ok\n");
    s.push_str(&format!(
        "original,0,{:.6},0.000000,\n",
        report.clean_gen_r50
    ));
    for (kind, severity, r50, delta) in &report.cells {
        let mono = report
            .monotonic
            .iter()
            .find(|(k, _)| k == kind)
            .map(|(_, ok)| *ok)
            .unwrap_or(false);
        // The flag is carried on each kind's harsher row.
        let is_harsh = report
            .cells
            .iter()
            .filter(|(k, ..)| k == kind)
            .map(|&(_, sv, ..)| sv)
            .fold(
                0,
                |acc, sv| {
                    if *kind == PerturbKind::Jpeg {
                        if acc == 0 || sv < acc {
                            sv
                        } else {
                            acc
                        }
                    } else if sv > acc {
                        sv
                    } else {
                        acc
                    }
                },
            )
            == *severity;
        let flag = if is_harsh {
            if mono {
                "pass"
            } else {
                "fail"
            }
        } else {
            ""
        };
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            kind.as_str(),
            severity,
            r50,
            delta,
            flag
        ));
    }
    s
}

#[cfg(test)]
mod tests;
