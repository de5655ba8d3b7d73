//! Training loss (soft-IoU segmentation + reconstruction fidelity) and the
//! evaluation suite: pixel metrics, target-level detection probability via
//! connected components, and pixel-level ROC/AUC.

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tape, Var};

/// Stabilizer inside the soft-IoU denominator.
pub const SOFT_IOU_EPS: f64 = 1e-6;

/// Loss weighting and binarization defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the reconstruction fidelity term.
    pub eta: f64,
    /// Threshold applied to sigmoid scores when binarizing predictions.
    pub binarize_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eta: 0.01,
            binarize_threshold: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 0.0 || !self.eta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "loss weight eta must be non-negative, got {}",
                self.eta
            )));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "binarize threshold must lie in (0,1), got {}",
                self.binarize_threshold
            )));
        }
        Ok(())
    }
}

/// Pixel-level confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }
}

/// Aggregated evaluation results over a dataset (or a single image).
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub miou: f64,
    pub f1: f64,
    pub pd: f64,
    /// False-alarm rate: false-positive pixels over all pixels (raw ratio).
    pub fa: f64,
    /// Pixel-level area under the ROC curve; NaN when undefined.
    pub auc: f64,
    pub counts: ConfusionCounts,
    pub matched_targets: usize,
    pub total_targets: usize,
    pub predicted_components: usize,
}

fn check_same_shape<F: Scalar>(op: &'static str, a: &Array4<F>, b: &Array4<F>) -> Result<()> {
    if a.raw_dim() != b.raw_dim() {
        for (axis, name) in ["batch", "channel", "height", "width"].iter().enumerate() {
            if a.raw_dim()[axis] != b.raw_dim()[axis] {
                return Err(Error::ShapeMismatch {
                    op,
                    axis: name,
                    expected: a.raw_dim()[axis],
                    actual: b.raw_dim()[axis],
                });
            }
        }
    }
    Ok(())
}

/// Soft-IoU segmentation loss on the tape:
/// `1 - mean_batch( sum(p*g) / (sum p + sum g - sum(p*g) + eps) )`.
pub fn soft_iou_loss_tape<F: Scalar>(tape: &mut Tape<F>, pred: Var, gt: Var) -> Result<Var> {
    let inter = tape.mul(pred, gt)?;
    let inter = tape.sum_per_image(inter);
    let p_sum = tape.sum_per_image(pred);
    let g_sum = tape.sum_per_image(gt);
    let union = tape.add(p_sum, g_sum)?;
    let union = tape.sub(union, inter)?;
    let union = tape.add_const(union, F::from_f64(SOFT_IOU_EPS));
    let iou = tape.div(inter, union)?;
    let mean_iou = tape.mean_all(iou);
    let neg = tape.scale_const(mean_iou, -F::one());
    Ok(tape.add_const(neg, F::one()))
}

/// Direct (non-tape) soft-IoU loss; the independent arithmetic the tape
/// version is checked against. Predictions must lie in [0,1].
pub fn soft_iou_loss<F: Scalar>(pred: &Array4<F>, gt: &Array4<F>) -> Result<F> {
    check_same_shape("soft_iou_loss", pred, gt)?;
    if pred
        .iter()
        .any(|v| !(v.as_f64().is_finite()) || v.as_f64() < 0.0 || v.as_f64() > 1.0)
    {
        return Err(Error::InvalidArgument(
            "soft_iou_loss expects predictions in [0,1]".into(),
        ));
    }
    let batch = pred.dim().0;
    let mut mean_iou = 0.0f64;
    for b in 0..batch {
        let p = pred.index_axis(ndarray::Axis(0), b);
        let g = gt.index_axis(ndarray::Axis(0), b);
        let mut inter = 0.0;
        let mut p_sum = 0.0;
        let mut g_sum = 0.0;
        for (pv, gv) in p.iter().zip(g.iter()) {
            let pv = pv.as_f64();
            let gv = gv.as_f64();
            inter += pv * gv;
            p_sum += pv;
            g_sum += gv;
        }
        mean_iou += inter / (p_sum + g_sum - inter + SOFT_IOU_EPS);
    }
    Ok(F::from_f64(1.0 - mean_iou / batch as f64))
}

/// Composite loss on the tape. Returns `(total, segmentation, fidelity)`;
/// `total = seg + eta * fidelity` where fidelity is the mean over the batch
/// of the squared Frobenius reconstruction error per pixel.
pub fn total_loss_tape<F: Scalar>(
    tape: &mut Tape<F>,
    pred: Var,
    gt: Var,
    recon: Var,
    input: Var,
    eta: f64,
) -> Result<(Var, Var, Var)> {
    let seg = soft_iou_loss_tape(tape, pred, gt)?;
    let dim = tape.value(input).raw_dim();
    let pixels = dim[1] * dim[2] * dim[3];
    let diff = tape.sub(recon, input)?;
    let sq = tape.mul(diff, diff)?;
    let per_image = tape.sum_per_image(sq);
    let per_image = tape.scale_const(per_image, F::from_f64(1.0 / pixels as f64));
    let fidelity = tape.mean_all(per_image);
    let weighted = tape.scale_const(fidelity, F::from_f64(eta));
    let total = tape.add(seg, weighted)?;
    Ok((total, seg, fidelity))
}

/// Direct composite loss: `(total, seg, fidelity)`.
pub fn total_loss<F: Scalar>(
    pred: &Array4<F>,
    gt: &Array4<F>,
    recon: &Array4<F>,
    input: &Array4<F>,
    config: &LossConfig,
) -> Result<(F, F, F)> {
    check_same_shape("total_loss", recon, input)?;
    let seg = soft_iou_loss(pred, gt)?;
    let batch = input.dim().0;
    let pixels = input.len() / batch;
    let mut fid = 0.0;
    for b in 0..batch {
        let r = recon.index_axis(ndarray::Axis(0), b);
        let d = input.index_axis(ndarray::Axis(0), b);
        let sq: f64 = r
            .iter()
            .zip(d.iter())
            .map(|(a, b)| {
                let e = a.as_f64() - b.as_f64();
                e * e
            })
            .sum();
        fid += sq / pixels as f64;
    }
    fid /= batch as f64;
    let total = seg.as_f64() + config.eta * fid;
    Ok((F::from_f64(total), seg, F::from_f64(fid)))
}

/// Confusion counts of a thresholded score map against a binary mask.
pub fn pixel_confusion(
    scores: &Array2<f64>,
    gt: &Array2<u8>,
    threshold: f64,
) -> Result<ConfusionCounts> {
    if scores.dim() != gt.dim() {
        return Err(Error::ShapeMismatch {
            op: "pixel_confusion",
            axis: "height",
            expected: gt.dim().0,
            actual: scores.dim().0,
        });
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument(
            "pixel metrics need a non-empty image".into(),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (s, g) in scores.iter().zip(gt.iter()) {
        let p = *s > threshold;
        match (p, *g != 0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// Per-image pixel metrics at a threshold.
#[derive(Debug, Clone, Copy)]
pub struct PixelMetrics {
    pub iou: f64,
    pub f1: f64,
    pub fa: f64,
    pub counts: ConfusionCounts,
}

/// Target-class IoU, F1 and false-alarm rate. Empty-vs-empty masks score
/// IoU = F1 = 1 (vacuous truth).
pub fn pixel_metrics(scores: &Array2<f64>, gt: &Array2<u8>, threshold: f64) -> Result<PixelMetrics> {
    let counts = pixel_confusion(scores, gt, threshold)?;
    Ok(PixelMetrics {
        iou: iou_from_counts(&counts),
        f1: f1_from_counts(&counts),
        fa: counts.false_pos as f64 / counts.total() as f64,
        counts,
    })
}

pub fn iou_from_counts(c: &ConfusionCounts) -> f64 {
    let denom = c.true_pos + c.false_pos + c.false_neg;
    if denom == 0 {
        1.0
    } else {
        c.true_pos as f64 / denom as f64
    }
}

pub fn f1_from_counts(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.true_pos + c.false_pos + c.false_neg;
    if denom == 0 {
        1.0
    } else {
        2.0 * c.true_pos as f64 / denom as f64
    }
}

/// One 8-connected component of a binary mask.
#[derive(Debug, Clone)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
    pub centroid: (f64, f64),
}

/// Label the 8-connected components of a binary mask, in scan order.
pub fn connected_components(mask: &Array2<u8>) -> Vec<Component> {
    let (h, w) = mask.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut components = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if mask[(sy, sx)] == 0 || seen[(sy, sx)] {
                continue;
            }
            let mut pixels = Vec::new();
            let mut queue = std::collections::VecDeque::new();
            queue.push_back((sy, sx));
            seen[(sy, sx)] = true;
            while let Some((y, x)) = queue.pop_front() {
                pixels.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[(ny, nx)] != 0 && !seen[(ny, nx)] {
                            seen[(ny, nx)] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            let n = pixels.len() as f64;
            let cy = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
            let cx = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
            components.push(Component {
                pixels,
                centroid: (cy, cx),
            });
        }
    }
    components
}

/// Target-level probability of detection with greedy one-to-one matching.
///
/// A ground-truth component is detected when an unmatched predicted component
/// overlaps it, or failing that has its centroid within `match_radius`
/// pixels. Pairs are consumed by descending overlap, then ascending centroid
/// distance. No ground-truth targets at all counts as `pd = 1`.
pub fn target_pd(pred_mask: &Array2<u8>, gt_mask: &Array2<u8>, match_radius: f64) -> (f64, usize, usize) {
    let gt = connected_components(gt_mask);
    let pred = connected_components(pred_mask);
    let total = gt.len();
    if total == 0 {
        return (1.0, 0, 0);
    }
    let mut candidates: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        let gset: std::collections::HashSet<(usize, usize)> = g.pixels.iter().copied().collect();
        for (pi, p) in pred.iter().enumerate() {
            let overlap = p.pixels.iter().filter(|px| gset.contains(px)).count();
            let dist = ((g.centroid.0 - p.centroid.0).powi(2)
                + (g.centroid.1 - p.centroid.1).powi(2))
            .sqrt();
            if overlap > 0 || dist <= match_radius {
                candidates.push((gi, pi, overlap, dist));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.2.cmp(&a.2)
            .then(a.3.partial_cmp(&b.3).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut matched = 0usize;
    for (gi, pi, _, _) in candidates {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            matched += 1;
        }
    }
    (matched as f64 / total as f64, matched, total)
}

/// Pixel-level ROC/AUC over pooled (score, label) pairs: full sweep over
/// distinct scores, trapezoidal area. Errors when only one class is present.
pub fn roc_auc_from_pairs(mut pairs: Vec<(f64, bool)>) -> Result<f64> {
    if pairs.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite("roc scores".into()));
    }
    let positives = pairs.iter().filter(|(_, l)| *l).count() as u64;
    let negatives = pairs.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Data(
            "AUC undefined: ground truth contains a single class".into(),
        ));
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut auc = 0.0f64;
    let (mut tp, mut fp) = (0u64, 0u64);
    let (mut prev_tp, mut prev_fp) = (0u64, 0u64);
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        auc += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(auc / (positives as f64 * negatives as f64))
}

/// ROC/AUC of a single score map against its mask.
pub fn roc_auc(scores: &Array2<f64>, gt: &Array2<u8>) -> Result<f64> {
    if scores.dim() != gt.dim() {
        return Err(Error::ShapeMismatch {
            op: "roc_auc",
            axis: "height",
            expected: gt.dim().0,
            actual: scores.dim().0,
        });
    }
    let pairs = scores
        .iter()
        .zip(gt.iter())
        .map(|(&s, &g)| (s, g != 0))
        .collect();
    roc_auc_from_pairs(pairs)
}
