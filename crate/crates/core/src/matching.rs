//! Anchor labelling against ground truth, and one-to-one greedy matching of
//! scored predictions used by evaluation and proposal selection.

use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, BBox, BoxDelta};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub pos_thresh: f64,
    pub neg_thresh: f64,
    pub low_quality: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            pos_thresh: 0.5,
            neg_thresh: 0.3,
            low_quality: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<Label>,
    /// Matched ground-truth index; `Some` exactly for positives.
    pub matched: Vec<Option<usize>>,
    pub num_pos: usize,
}

impl MatchResult {
    pub fn all_negative(n: usize) -> Self {
        Self {
            labels: vec![Label::Negative; n],
            matched: vec![None; n],
            num_pos: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.matched.iter().enumerate().filter_map(|(i, m)| m.map(|g| (i, g)))
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Label every anchor as positive, negative or ignored.
///
/// Anchors whose best IoU exceeds `pos_thresh` become positive for their
/// best ground truth (lowest index on ties); those below `neg_thresh` are
/// negative; the rest are ignored. With `low_quality`, every anchor that
/// attains some ground truth's maximum IoU and is not yet positive is made
/// positive for its own highest-IoU ground truth.
pub fn match_anchors<T: Scalar>(
    anchors: &[BBox<T>],
    gts: &[BBox<T>],
    cfg: &MatchConfig,
) -> Result<MatchResult> {
    if !(cfg.neg_thresh <= cfg.pos_thresh) {
        return Err(Error::Config(format!(
            "negative threshold {} exceeds positive threshold {}",
            cfg.neg_thresh, cfg.pos_thresh
        )));
    }
    let n = anchors.len();
    if gts.is_empty() {
        return Ok(MatchResult::all_negative(n));
    }
    let pos_t = T::of(cfg.pos_thresh);
    let neg_t = T::of(cfg.neg_thresh);

    let mut best_iou = vec![T::zero(); n];
    let mut best_gt = vec![0usize; n];
    let mut gt_max = vec![T::zero(); gts.len()];
    // iou[a * g + j] would cost n * g memory; two passes keep it linear.
    for (a, anchor) in anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let v = anchor.iou(gt);
            if v > best_iou[a] {
                best_iou[a] = v;
                best_gt[a] = g;
            }
            if v > gt_max[g] {
                gt_max[g] = v;
            }
        }
    }

    let mut labels = Vec::with_capacity(n);
    let mut matched = Vec::with_capacity(n);
    for a in 0..n {
        if best_iou[a] > pos_t {
            labels.push(Label::Positive);
            matched.push(Some(best_gt[a]));
        } else if best_iou[a] < neg_t {
            labels.push(Label::Negative);
            matched.push(None);
        } else {
            labels.push(Label::Ignore);
            matched.push(None);
        }
    }

    if cfg.low_quality {
        for (a, anchor) in anchors.iter().enumerate() {
            if labels[a] == Label::Positive {
                continue;
            }
            let attains_max = gts
                .iter()
                .enumerate()
                .any(|(g, gt)| gt_max[g] > T::zero() && anchor.iou(gt) == gt_max[g]);
            if attains_max {
                labels[a] = Label::Positive;
                matched[a] = Some(best_gt[a]);
            }
        }
    }

    let num_pos = labels.iter().filter(|&&l| l == Label::Positive).count();
    Ok(MatchResult {
        labels,
        matched,
        num_pos,
    })
}

/// Regression targets `(anchor index, delta)` for every positive anchor.
pub fn box_targets<T: Scalar>(
    anchors: &[BBox<T>],
    gts: &[BBox<T>],
    m: &MatchResult,
) -> Vec<(usize, BoxDelta<T>)> {
    m.positives()
        .map(|(a, g)| (a, encode_deltas(&anchors[a], &gts[g])))
        .collect()
}

/// One-to-one greedy matching of scored boxes to ground truth.
///
/// Predictions are visited by descending score (lowest index first on ties);
/// each takes the unmatched ground truth of highest IoU among those with
/// IoU >= `iou_thresh`. Returns the matched gt per prediction.
pub fn greedy_match<T: Scalar>(
    boxes: &[BBox<T>],
    scores: &[T],
    gts: &[BBox<T>],
    iou_thresh: T,
) -> Vec<Option<usize>> {
    let order = score_order(scores);
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; boxes.len()];
    for i in order {
        let mut best: Option<(usize, T)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = boxes[i].iou(gt);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Some(g);
        }
    }
    out
}

/// Indices sorted by descending score, ties by ascending index.
pub fn score_order<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}
