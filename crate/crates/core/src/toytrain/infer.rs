//! Detection decoding, single-scale and fused test-time inference, and
//! held-out evaluation.

use super::kernels::sigmoid;
use super::model::{Forward, ToyMaskFace};
use super::tensor::Tensor;
use crate::error::Result;
use crate::geometry::{decode_deltas, generate_anchors, AnchorGrid, BBox};
use crate::metrics::{bbox_sqrt_area, inter_ocular, nme, pr_curve_ap, Ced, EvalConfig, NmeNormalizer};
use crate::roialign::decode_keypoint_mask;
use crate::suppression::{box_vote, nms_greedy, soft_nms, Detection, SoftNmsConfig};
use crate::synthdata::{Image, Scene, FLIP_PERMUTATION};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub score_thresh: f64,
    /// Candidates kept by score before suppression.
    pub pre_nms_top: usize,
    pub nms_thresh: f64,
    pub max_dets: usize,
    pub k0: i32,
    pub multi_scale: bool,
    pub flip: bool,
    pub scales: Vec<f64>,
    pub soft_nms: SoftNmsConfig,
    pub vote_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            pre_nms_top: 300,
            nms_thresh: 0.4,
            max_dets: 50,
            k0: crate::geometry::DEFAULT_K0,
            multi_scale: false,
            flip: false,
            scales: vec![0.5, 1.0, 2.0],
            soft_nms: SoftNmsConfig::default(),
            vote_iou: 0.5,
        }
    }
}

/// Image as a zero-centered `3 x H x W` tensor.
pub fn image_tensor(img: &Image) -> Tensor {
    let data = img.to_planar().into_iter().map(|v| v - 0.5).collect();
    Tensor::new(vec![3, img.height, img.width], data).expect("planar image shape")
}

/// Scored, decoded boxes clipped to the image, highest `top` scores first.
pub fn decode_detections(fwd: &Forward, anchors: &AnchorGrid<f64>, score_thresh: f64, top: usize, w: usize, h: usize) -> Vec<Detection<f64>> {
    let logits = fwd.cls_logits();
    let deltas = fwd.box_deltas();
    let mut cand: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| (i, sigmoid(z)))
        .filter(|&(_, s)| s >= score_thresh)
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(top);
    cand.into_iter()
        .filter_map(|(i, s)| {
            let d = decode_deltas(&anchors.boxes[i], &deltas[i]).ok()?;
            let b = d.bbox.clipped(w as f64, h as f64)?;
            (b.width() >= 1.0 && b.height() >= 1.0).then(|| Detection::new(b, s))
        })
        .collect()
}

/// Fill in landmarks for each detection from the keypoint head.
fn attach_landmarks(model: &ToyMaskFace, fwd: &Forward, dets: &mut [Detection<f64>], k0: i32) -> Result<()> {
    let (k, m) = (model.cfg.num_keypoints, model.cfg.mask_size);
    for d in dets.iter_mut() {
        let logits = model.keypoint_logits_inference(fwd, &d.bbox, k0)?;
        d.landmarks = decode_keypoint_mask(logits.data(), k, m, &d.bbox)?;
    }
    Ok(())
}

/// Single-pass detection at the image's own resolution.
pub fn detect_single(model: &ToyMaskFace, img: &Image, cfg: &DetectConfig) -> Result<Vec<Detection<f64>>> {
    let anchors = generate_anchors::<f64>(model.anchor_config(), img.width, img.height)?;
    detect_with_anchors(model, img, cfg, &anchors)
}

fn detect_with_anchors(model: &ToyMaskFace, img: &Image, cfg: &DetectConfig, anchors: &AnchorGrid<f64>) -> Result<Vec<Detection<f64>>> {
    let fwd = model.forward(&image_tensor(img), false)?;
    let cand = decode_detections(&fwd, anchors, cfg.score_thresh, cfg.pre_nms_top, img.width, img.height);
    let mut dets = nms_greedy(&cand, cfg.nms_thresh);
    dets.truncate(cfg.max_dets);
    attach_landmarks(model, &fwd, &mut dets, cfg.k0)?;
    Ok(dets)
}

/// One test-time view: a rescale with optional mirror.
#[derive(Debug, Clone, Copy, PartialEq)]
struct View {
    scale: f64,
    flip: bool,
}

fn views(cfg: &DetectConfig) -> Vec<View> {
    let scales = if cfg.multi_scale { cfg.scales.clone() } else { vec![1.0] };
    let mut out = Vec::new();
    for &scale in &scales {
        out.push(View { scale, flip: false });
        if cfg.flip {
            out.push(View { scale, flip: true });
        }
    }
    out
}

/// Run one view and map its detections back to source coordinates.
fn detect_view(model: &ToyMaskFace, img: &Image, view: View, cfg: &DetectConfig) -> Result<Vec<Detection<f64>>> {
    let ow = ((img.width as f64 * view.scale).round() as usize).max(1);
    let oh = ((img.height as f64 * view.scale).round() as usize).max(1);
    let (sx, sy) = (ow as f64 / img.width as f64, oh as f64 / img.height as f64);
    let owf = ow as f64;
    let flip = view.flip;
    let warped = img.resample(ow, oh, |u, v| (if flip { owf - u } else { u } / sx, v / sy));
    let mut dets = detect_single(model, &warped, cfg)?;
    for d in &mut dets {
        let b = d.bbox;
        let (x1, x2) = if flip { (owf - b.x2, owf - b.x1) } else { (b.x1, b.x2) };
        d.bbox = BBox { x1: x1 / sx, y1: b.y1 / sy, x2: x2 / sx, y2: b.y2 / sy };
        let pts: Vec<(f64, f64)> = d.landmarks.iter().map(|&(x, y)| (if flip { owf - x } else { x } / sx, y / sy)).collect();
        d.landmarks = if flip && pts.len() == FLIP_PERMUTATION.len() {
            FLIP_PERMUTATION.iter().map(|&src| pts[src]).collect()
        } else {
            pts
        };
    }
    Ok(dets)
}

/// Detection with optional image pyramid and flip fusion: Soft-NMS within
/// each view, then greedy NMS over the union refined by box voting against
/// the pooled candidates.
pub fn detect(model: &ToyMaskFace, img: &Image, cfg: &DetectConfig) -> Result<Vec<Detection<f64>>> {
    let views = views(cfg);
    if views.len() == 1 && views[0] == (View { scale: 1.0, flip: false }) {
        return detect_single(model, img, cfg);
    }
    let mut pool = Vec::new();
    for (vi, &view) in views.iter().enumerate() {
        let dets = detect_view(model, img, view, cfg)?;
        for mut d in soft_nms(&dets, &cfg.soft_nms) {
            d.source = Some(vi as u16);
            pool.push(d);
        }
    }
    let mut kept = nms_greedy(&pool, cfg.nms_thresh);
    kept.truncate(cfg.max_dets);
    Ok(box_vote(&kept, &pool, cfg.vote_iou))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub images: usize,
    pub faces: usize,
    pub detections: usize,
    pub ap50: f64,
    /// Mean NME over faces with a landmark-matched detection.
    pub nme_mean: f64,
    pub faces_with_landmarks: usize,
    pub ced95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub summary: EvalSummary,
    pub detections: Vec<Vec<Detection<f64>>>,
    pub pr_curve: Vec<(f64, f64)>,
    pub ced_curve: Vec<(f64, f64)>,
    /// Per-face NME in scene order; `None` when no detection matched.
    pub face_nme: Vec<Option<f64>>,
}

/// Per-face NME of the most confident detection overlapping it with IoU at
/// least `landmark_iou_thresh`.
pub fn face_nmes(scene: &Scene, dets: &[Detection<f64>], cfg: &EvalConfig) -> Result<Vec<Option<f64>>> {
    let mut out = Vec::with_capacity(scene.faces.len());
    for face in &scene.faces {
        let mut best: Option<&Detection<f64>> = None;
        for d in dets {
            if d.bbox.iou(&face.bbox) >= cfg.landmark_iou_thresh && best.is_none_or(|b| d.score > b.score) {
                best = Some(d);
            }
        }
        let gt = face.points();
        let value = match best {
            Some(d) if d.landmarks.len() == gt.len() => {
                let norm = match cfg.nme_normalizer {
                    NmeNormalizer::BboxSqrtArea => bbox_sqrt_area(&face.bbox),
                    NmeNormalizer::InterOcular => inter_ocular(&gt, 0, 1),
                };
                Some(nme(&d.landmarks, &gt, Some(&face.visibility()), norm)?)
            }
            _ => None,
        };
        out.push(value);
    }
    Ok(out)
}

/// Detect on every scene and score boxes (AP) and landmarks (NME, CED).
pub fn evaluate(model: &ToyMaskFace, scenes: &[Scene], detect_cfg: &DetectConfig, eval_cfg: &EvalConfig) -> Result<EvalOutput> {
    eval_cfg.validate()?;
    let mut detections = Vec::with_capacity(scenes.len());
    let mut face_nme = Vec::new();
    for scene in scenes {
        let dets = detect(model, &scene.image, detect_cfg)?;
        face_nme.extend(face_nmes(scene, &dets, eval_cfg)?);
        detections.push(dets);
    }
    let gts: Vec<Vec<BBox<f64>>> = scenes.iter().map(Scene::boxes).collect();
    let ap = pr_curve_ap(&detections, &gts, eval_cfg.iou_match_thresh)?;
    let matched: Vec<f64> = face_nme.iter().flatten().copied().collect();
    let nme_mean = if matched.is_empty() { f64::INFINITY } else { matched.iter().sum::<f64>() / matched.len() as f64 };
    let (ced95, ced_curve) = match Ced::new(&face_nme) {
        Ok(c) => (c.at(0.95), c.curve()),
        Err(_) => (f64::INFINITY, Vec::new()),
    };
    let summary = EvalSummary {
        images: scenes.len(),
        faces: face_nme.len(),
        detections: detections.iter().map(Vec::len).sum(),
        ap50: ap.ap,
        nme_mean,
        faces_with_landmarks: matched.len(),
        ced95,
    };
    Ok(EvalOutput { summary, detections, pr_curve: ap.points, ced_curve, face_nme })
}
