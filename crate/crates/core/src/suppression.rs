//! Proposal filtering, greedy NMS, Gaussian Soft-NMS and box voting.

use crate::geometry::BBox;
use crate::matching::score_order;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// A scored box, optionally carrying landmarks and the index of the
/// test-time augmentation that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    pub score: T,
    #[serde(default)]
    pub source: Option<u16>,
    #[serde(default)]
    pub landmarks: Vec<(T, T)>,
}

impl<T: Scalar> Detection<T> {
    pub fn new(bbox: BBox<T>, score: T) -> Self {
        Self {
            bbox,
            score,
            source: None,
            landmarks: Vec::new(),
        }
    }
}

fn scores<T: Scalar>(dets: &[Detection<T>]) -> Vec<T> {
    dets.iter().map(|d| d.score).collect()
}

/// Indices of the detections kept by greedy NMS, in selection order.
pub fn nms_indices<T: Scalar>(dets: &[Detection<T>], iou_thresh: T) -> Vec<usize> {
    let order = score_order(&scores(dets));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && dets[i].bbox.iou(&dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn nms_greedy<T: Scalar>(dets: &[Detection<T>], iou_thresh: T) -> Vec<Detection<T>> {
    nms_indices(dets, iou_thresh).into_iter().map(|i| dets[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftNmsConfig {
    pub sigma: f64,
    pub score_floor: f64,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            score_floor: 0.001,
        }
    }
}

/// Gaussian Soft-NMS. Output is in selection order with decayed scores.
pub fn soft_nms<T: Scalar>(dets: &[Detection<T>], cfg: &SoftNmsConfig) -> Vec<Detection<T>> {
    let sigma = T::of(cfg.sigma);
    let floor = T::of(cfg.score_floor);
    let mut pool: Vec<(usize, Detection<T>)> = dets
        .iter()
        .cloned()
        .enumerate()
        .filter(|(_, d)| d.score >= floor)
        .collect();
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let mut best = 0;
        for (k, (idx, d)) in pool.iter().enumerate() {
            let (bidx, bd) = &pool[best];
            if d.score > bd.score || (d.score == bd.score && idx < bidx) {
                best = k;
            }
        }
        let (_, chosen) = pool.swap_remove(best);
        for (_, d) in pool.iter_mut() {
            let iou = chosen.bbox.iou(&d.bbox);
            d.score = d.score * (-(iou * iou) / sigma).exp();
        }
        pool.retain(|(_, d)| d.score >= floor);
        out.push(chosen);
    }
    out
}

/// Replace each kept box by the score-weighted mean of the pool boxes that
/// overlap it with IoU >= `iou_thresh`. Scores are unchanged.
pub fn box_vote<T: Scalar>(kept: &[Detection<T>], pool: &[Detection<T>], iou_thresh: T) -> Vec<Detection<T>> {
    kept.iter()
        .map(|k| {
            // Weighted mean of offsets from the kept box, so that voters
            // identical to it leave it bit-for-bit unchanged.
            let base = k.bbox.to_array();
            let mut acc = [T::zero(); 4];
            let mut wsum = T::zero();
            for p in pool {
                if k.bbox.iou(&p.bbox) >= iou_thresh {
                    let c = p.bbox.to_array();
                    for i in 0..4 {
                        acc[i] = acc[i] + p.score * (c[i] - base[i]);
                    }
                    wsum = wsum + p.score;
                }
            }
            let mut out = k.clone();
            if wsum > T::zero() {
                let voted = BBox {
                    x1: base[0] + acc[0] / wsum,
                    y1: base[1] + acc[1] / wsum,
                    x2: base[2] + acc[2] / wsum,
                    y2: base[3] + acc[3] / wsum,
                };
                if voted.x2 > voted.x1 && voted.y2 > voted.y1 {
                    out.bbox = voted;
                }
            }
            out
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub conf_floor: f64,
    pub nms_thresh: f64,
    pub iou_keep: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            conf_floor: 0.02,
            nms_thresh: 0.6,
            iou_keep: 0.6,
        }
    }
}

/// A RoI for the keypoint head with its matched ground truth in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal<T> {
    pub det: Detection<T>,
    pub gt: Option<usize>,
}

/// Score filter, greedy NMS, and (when `gts` is given) ground-truth gating.
pub fn filter_proposals<T: Scalar>(dets: &[Detection<T>], cfg: &ProposalConfig, gts: Option<&[BBox<T>]>) -> Vec<Proposal<T>> {
    let floor = T::of(cfg.conf_floor);
    let confident: Vec<Detection<T>> = dets.iter().filter(|d| d.score >= floor).cloned().collect();
    let survivors = nms_greedy(&confident, T::of(cfg.nms_thresh));
    match gts {
        None => survivors.into_iter().map(|det| Proposal { det, gt: None }).collect(),
        Some(gts) => {
            let keep = T::of(cfg.iou_keep);
            survivors
                .into_iter()
                .filter_map(|det| {
                    let mut best: Option<(usize, T)> = None;
                    for (g, gt) in gts.iter().enumerate() {
                        let v = det.bbox.iou(gt);
                        if best.is_none_or(|(_, bv)| v > bv) {
                            best = Some((g, v));
                        }
                    }
                    match best {
                        Some((g, v)) if v > keep => Some(Proposal { det, gt: Some(g) }),
                        _ => None,
                    }
                })
                .collect()
        }
    }
}
