//! End-to-end training: augment, match, forward, proposals, keypoint
//! targets, losses, backward and an SGD step, once per scene draw.

use super::infer::{decode_detections, image_tensor};
use super::model::ToyMaskFace;
use super::optim::{LrSchedule, ScheduleConfig, Sgd, SgdConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{generate_anchors, AnchorGrid, BBox, BoxDelta, DEFAULT_K0};
use crate::losses::{focal_loss, keypoint_ce_loss, smooth_l1_loss, total_loss, LossConfig, LossReport};
use crate::matching::{box_targets, match_anchors, MatchConfig};
use crate::roialign::encode_keypoint_target;
use crate::suppression::{filter_proposals, ProposalConfig};
use crate::synthdata::{augment_detection, scene_seed, AugmentConfig, Scene};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Seeds scene order and augmentation draws.
    pub seed: u64,
    pub loss: LossConfig,
    pub matching: MatchConfig,
    pub proposals: ProposalConfig,
    pub schedule: ScheduleConfig,
    pub sgd: SgdConfig,
    pub k0: i32,
    /// Predicted RoIs per image fed to the keypoint head.
    pub max_rois: usize,
    /// Candidates decoded before proposal filtering.
    pub pre_proposal_top: usize,
    /// Also train the keypoint head on the ground-truth boxes.
    pub gt_rois: bool,
    pub augment: AugmentConfig,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let augment = AugmentConfig {
            crop_size: 160,
            scale_range: (0.75, 1.5),
            ..AugmentConfig::default()
        };
        Self {
            steps: 2000,
            seed: 0,
            loss: LossConfig::default(),
            matching: MatchConfig::default(),
            proposals: ProposalConfig::default(),
            schedule: ScheduleConfig::default(),
            sgd: SgdConfig::default(),
            k0: DEFAULT_K0,
            max_rois: 4,
            pre_proposal_top: 200,
            gt_rois: true,
            augment,
            divergence_factor: 10.0,
            divergence_patience: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.schedule.validate()?;
        self.augment.validate()?;
        if !(self.matching.neg_thresh <= self.matching.pos_thresh) {
            return Err(Error::Config("matching thresholds out of order".into()));
        }
        if self.steps == 0 || !(self.divergence_factor > 1.0) {
            return Err(Error::Config(format!(
                "need steps > 0 and divergence factor > 1, got {} and {}",
                self.steps, self.divergence_factor
            )));
        }
        Ok(())
    }
}

/// Where the keypoint head RoIs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum RoiPolicy {
    /// Filtered predictions (training mode), plus ground truth when enabled.
    FromPredictions,
    /// Fixed boxes with the index of their face.
    Fixed(Vec<(BBox<f64>, usize)>),
}

/// Loss terms and parameter gradients for one scene.
#[derive(Debug)]
pub struct StepResult {
    pub report: LossReport,
    pub grads: Vec<Option<Tensor>>,
    pub num_rois: usize,
}

/// Forward and backward pass of the full objective on an already augmented scene.
pub fn step_gradients(
    model: &ToyMaskFace,
    scene: &Scene,
    anchors: &AnchorGrid<f64>,
    cfg: &TrainConfig,
    rois: &RoiPolicy,
) -> Result<StepResult> {
    let (w, h) = (scene.image.width, scene.image.height);
    let gts = scene.boxes();
    let matched = match_anchors(&anchors.boxes, &gts, &cfg.matching)?;
    let mut fwd = model.forward(&image_tensor(&scene.image), true)?;

    let logits = fwd.cls_logits();
    let cls = focal_loss(&logits, &matched, &cfg.loss)?;

    let deltas = fwd.box_deltas();
    let targets = box_targets(&anchors.boxes, &gts, &matched);
    let pred: Vec<BoxDelta<f64>> = targets.iter().map(|&(a, _)| deltas[a]).collect();
    let tgt: Vec<BoxDelta<f64>> = targets.iter().map(|&(_, t)| t).collect();
    let reg = smooth_l1_loss(&pred, &tgt, matched.num_pos, &cfg.loss)?;
    let mut box_grad = vec![BoxDelta::zero(); deltas.len()];
    for (&(a, _), g) in targets.iter().zip(&reg.grad) {
        box_grad[a] = *g;
    }

    let roi_list: Vec<(BBox<f64>, usize)> = match rois {
        RoiPolicy::Fixed(list) => list.clone(),
        RoiPolicy::FromPredictions => {
            let mut list = Vec::new();
            if !gts.is_empty() {
                let cand = decode_detections(&fwd, anchors, cfg.proposals.conf_floor, cfg.pre_proposal_top, w, h);
                for p in filter_proposals(&cand, &cfg.proposals, Some(&gts)).into_iter().take(cfg.max_rois) {
                    list.push((p.det.bbox, p.gt.expect("training-mode proposal has a face")));
                }
                if cfg.gt_rois {
                    list.extend(gts.iter().copied().enumerate().map(|(i, b)| (b, i)));
                }
            }
            list
        }
    };

    let m = model.cfg.mask_size;
    let mut kp_nodes = Vec::with_capacity(roi_list.len());
    let mut kp_logits = Vec::with_capacity(roi_list.len());
    let mut kp_targets = Vec::with_capacity(roi_list.len());
    for (roi, face) in &roi_list {
        let node = model.keypoint_logits(&mut fwd, roi, cfg.k0)?;
        kp_logits.push(fwd.graph.value(node).data().to_vec());
        kp_targets.push(encode_keypoint_target(roi, &scene.faces[*face].landmarks, m)?);
        kp_nodes.push(node);
    }
    let kp = keypoint_ce_loss(&kp_logits, &kp_targets, m)?;
    let report = total_loss(cls.value, reg.value, kp.value, matched.num_pos, &cfg.loss);

    let mut seeds = fwd.head_seeds(&cls.grad, &box_grad);
    let lambda = cfg.loss.lambda_kp;
    if lambda > 0.0 {
        for (node, g) in kp_nodes.iter().zip(kp.grad) {
            let shape = fwd.graph.value(*node).shape().to_vec();
            seeds.push((*node, Tensor::new(shape, g.into_iter().map(|v| lambda * v).collect())?));
        }
    }
    let mut grads = fwd.graph.backward(seeds)?;
    let param_grads = fwd.params.iter().map(|&id| grads.take(id)).collect();
    Ok(StepResult { report, grads: param_grads, num_rois: roi_list.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_box: f64,
    pub l_kp: f64,
    pub l_total: f64,
    pub num_pos: usize,
    /// Step skipped because of a non-finite loss or gradient.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    Diverged { step: usize, loss: f64, initial: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    pub status: TrainStatus,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<Vec<TraceRow>> {
        match self.status {
            TrainStatus::Completed => Ok(self.trace),
            TrainStatus::Diverged { step, loss, initial } => Err(Error::Diverged { step, loss, initial }),
        }
    }
}

pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "step,lr,l_cls,l_box,l_kp,l_total,num_pos,skipped")?;
    for r in trace {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.step, r.lr, r.l_cls, r.l_box, r.l_kp, r.l_total, r.num_pos, r.skipped as u8
        )?;
    }
    Ok(())
}

/// Train `model` in place on `scenes`. Scenes are visited in a fresh
/// shuffled order every epoch; the whole run is a function of the model's
/// init seed, the scenes and `cfg.seed`.
pub fn train_toy(model: &mut ToyMaskFace, scenes: &[Scene], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let crop = cfg.augment.crop_size;
    let anchors = generate_anchors::<f64>(model.anchor_config(), crop, crop)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut sgd = Sgd::new(cfg.sgd, model.params.len());
    let mut sched = LrSchedule::new(cfg.schedule);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut initial: Option<f64> = None;
    let mut above = 0usize;

    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..scenes.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let scene = augment_detection(&scenes[idx], &cfg.augment, scene_seed(cfg.seed ^ 0xA5A5_5A5A, step as u64));
        let lr = sched.lr();
        let res = step_gradients(model, &scene, &anchors, cfg, &RoiPolicy::FromPredictions)?;
        let r = res.report;
        let mut skipped = !r.l_total.is_finite();
        if !skipped {
            let grads: Vec<Option<&Tensor>> = res.grads.iter().map(Option::as_ref).collect();
            match sgd.step(&mut model.params.tensors, &grads, lr) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient(_)) => skipped = true,
                Err(e) => return Err(e),
            }
        }
        trace.push(TraceRow {
            step,
            lr,
            l_cls: r.l_cls,
            l_box: r.l_box,
            l_kp: r.l_kp,
            l_total: r.l_total,
            num_pos: r.num_pos,
            skipped,
        });
        if skipped {
            sched.observe(f64::INFINITY);
            continue;
        }
        sched.observe(r.l_total);
        let init = *initial.get_or_insert(r.l_total);
        if r.l_total > cfg.divergence_factor * init {
            above += 1;
            if above >= cfg.divergence_patience {
                return Ok(TrainOutcome {
                    trace,
                    status: TrainStatus::Diverged { step, loss: r.l_total, initial: init },
                });
            }
        } else {
            above = 0;
        }
    }
    Ok(TrainOutcome { trace, status: TrainStatus::Completed })
}
