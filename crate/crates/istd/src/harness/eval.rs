//! Checkpoint evaluation: per-image forward passes in eval mode, pixel and
//! target-level metrics, pooled ROC/AUC, and the fixed CSV schema
//! `image_id,miou,f1,pd,fa,auc,tp,fp,fn,tn` with a `__summary__` row.

use ndarray::{Array2, Array4};
use rayon::prelude::*;

use crate::error::Result;
use crate::metrics::{
    connected_components, pixel_metrics, roc_auc_from_pairs, target_pd, ConfusionCounts,
    LossConfig, MetricReport,
};
use crate::model::{Phase, UnfoldedNet};
use crate::nn::{ParamStore, Tape};
use crate::scene::{Sample, SampleMeta};

/// Per-image evaluation record.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub id: String,
    pub iou: f64,
    pub f1: f64,
    pub fa: f64,
    /// Per-image AUC; NaN when the image holds a single class.
    pub auc: f64,
    pub pd: f64,
    pub matched: usize,
    pub total: usize,
    pub predicted_components: usize,
    pub counts: ConfusionCounts,
}

pub fn sample_id(sample: &Sample, index: usize) -> String {
    match &sample.meta {
        SampleMeta::Files { image, .. } => image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("img{index:05}")),
        SampleMeta::Synthetic { .. } => format!("synth{index:05}"),
    }
}

pub(crate) fn plane_to_batch(image: &Array2<f64>) -> Array4<f32> {
    let (h, w) = image.dim();
    let mut out = Array4::<f32>::zeros((1, 1, h, w));
    for y in 0..h {
        for x in 0..w {
            out[(0, 0, y, x)] = image[(y, x)] as f32;
        }
    }
    out
}

/// Run the model on one image in eval mode. Returns sigmoid target scores
/// and the reconstruction plane.
pub fn forward_scores(
    net: &UnfoldedNet,
    store: &ParamStore<f32>,
    image: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (h, w) = image.dim();
    let mut tape = Tape::<f32>::new();
    let input = tape.leaf(plane_to_batch(image));
    let mut bn_updates = Vec::new();
    let out = net.forward(&mut tape, store, input, Phase::Eval, false, &mut bn_updates)?;
    let pred = tape.sigmoid(out.target);
    let scores = Array2::from_shape_fn((h, w), |(y, x)| tape.value(pred)[(0, 0, y, x)] as f64);
    let recon = Array2::from_shape_fn((h, w), |(y, x)| tape.value(out.recon)[(0, 0, y, x)] as f64);
    Ok((scores, recon))
}

pub(crate) fn eval_one_scored(
    id: String,
    scores: &Array2<f64>,
    mask: &Array2<u8>,
    loss: &LossConfig,
    match_radius: f64,
) -> Result<(ImageEval, Vec<(f64, bool)>)> {
    let pm = pixel_metrics(scores, mask, loss.binarize_threshold)?;
    let pred_mask = scores.mapv(|s| u8::from(s > loss.binarize_threshold));
    let (pd, matched, total) = target_pd(&pred_mask, mask, match_radius);
    let auc = crate::metrics::roc_auc(scores, mask).unwrap_or(f64::NAN);
    let pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(mask.iter())
        .map(|(&s, &g)| (s, g != 0))
        .collect();
    Ok((
        ImageEval {
            id,
            iou: pm.iou,
            f1: pm.f1,
            fa: pm.fa,
            auc,
            pd,
            matched,
            total,
            predicted_components: connected_components(&pred_mask).len(),
            counts: pm.counts,
        },
        pairs,
    ))
}

/// Aggregate per-image records into a dataset-level report. mIoU and F1
/// average per-image values; Pd pools matches over all targets; Fa pools
/// false positives over all pixels; AUC pools every pixel.
pub fn aggregate(rows: &[ImageEval], pooled_pairs: Vec<(f64, bool)>) -> MetricReport {
    let n = rows.len().max(1) as f64;
    let mut counts = ConfusionCounts::default();
    let mut matched = 0usize;
    let mut total = 0usize;
    let mut predicted = 0usize;
    for r in rows {
        counts.add(&r.counts);
        matched += r.matched;
        total += r.total;
        predicted += r.predicted_components;
    }
    let miou = rows.iter().map(|r| r.iou).sum::<f64>() / n;
    let f1 = rows.iter().map(|r| r.f1).sum::<f64>() / n;
    let pd = if total == 0 {
        1.0
    } else {
        matched as f64 / total as f64
    };
    let fa = if counts.total() == 0 {
        0.0
    } else {
        counts.false_pos as f64 / counts.total() as f64
    };
    let auc = roc_auc_from_pairs(pooled_pairs).unwrap_or(f64::NAN);
    MetricReport {
        miou,
        f1,
        pd,
        fa,
        auc,
        counts,
        matched_targets: matched,
        total_targets: total,
        predicted_components: predicted,
    }
}

/// Evaluate a parameter store over a sample set.
pub fn evaluate_samples(
    net: &UnfoldedNet,
    store: &ParamStore<f32>,
    samples: &[Sample],
    loss: &LossConfig,
    match_radius: f64,
) -> Result<(MetricReport, Vec<ImageEval>)> {
    // images fan out across workers; aggregation below is a fixed-order
    // reduction over the collected per-image rows
    let per_image: Result<Vec<(ImageEval, Vec<(f64, bool)>)>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (scores, _recon) = forward_scores(net, store, &s.image)?;
            eval_one_scored(sample_id(s, i), &scores, &s.mask, loss, match_radius)
        })
        .collect();
    let per_image = per_image?;
    let mut rows = Vec::with_capacity(per_image.len());
    let mut pooled = Vec::new();
    for (row, pairs) in per_image {
        rows.push(row);
        pooled.extend(pairs);
    }
    let report = aggregate(&rows, pooled);
    Ok((report, rows))
}

pub(crate) fn fmt6(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

pub const CSV_HEADER: &str = "image_id,miou,f1,pd,fa,auc,tp,fp,fn,tn";

fn csv_row(id: &str, iou: f64, f1: f64, pd: f64, fa: f64, auc: f64, c: &ConfusionCounts) -> String {
    format!(
        "{id},{},{},{},{},{},{},{},{},{}",
        fmt6(iou),
        fmt6(f1),
        fmt6(pd),
        fmt6(fa),
        fmt6(auc),
        c.true_pos,
        c.false_pos,
        c.false_neg,
        c.true_neg
    )
}

/// One CSV row per image plus a `__summary__` row.
pub fn evaluation_csv(report: &MetricReport, rows: &[ImageEval]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&csv_row(&r.id, r.iou, r.f1, r.pd, r.fa, r.auc, &r.counts));
        out.push('\n');
    }
    out.push_str(&csv_row(
        "__summary__",
        report.miou,
        report.f1,
        report.pd,
        report.fa,
        report.auc,
        &report.counts,
    ));
    out.push('\n');
    out
}
