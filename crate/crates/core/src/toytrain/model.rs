//! Toy-scale face detector with a keypoint mask head.
//!
//! A frozen random backbone yields `C2..C5`; trainable lateral and output
//! convolutions build `P2..P5` top-down, and `P6` is a stride-2 max-pool of
//! the projected `C5`. Each level has its own context module. Shared 1x1
//! heads score and regress the anchors; the keypoint head pools a RoI from
//! the context output of its assigned level.

use super::graph::{Graph, NodeId};
use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{assign_level, AnchorConfig, BBox, BoxDelta, FIRST_LEVEL, MAX_LEVEL};
use crate::roialign::roi_taps;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Prior foreground probability used to initialize the classification bias.
const CLS_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    /// Stem, stride-2 stage, then `C2..C5`.
    pub backbone_widths: Vec<usize>,
    pub fpn_channels: usize,
    /// Widths of the three context branches (one, two and three stacked 3x3 convs).
    pub context_widths: [usize; 3],
    pub kp_convs: usize,
    pub kp_channels: usize,
    pub num_keypoints: usize,
    pub pooled_size: usize,
    pub mask_size: usize,
    pub input_size: usize,
    pub sampling_ratio: usize,
    /// Anchor tiling; must have one level per stride 4..64.
    pub anchors: AnchorConfig,
    pub init_seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            backbone_widths: vec![8; 6],
            fpn_channels: 16,
            context_widths: [8, 4, 4],
            kp_convs: 2,
            kp_channels: 8,
            num_keypoints: 5,
            pooled_size: 14,
            mask_size: 56,
            input_size: 160,
            sampling_ratio: 2,
            anchors: AnchorConfig::default(),
            init_seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.backbone_widths.len() != 6 || self.backbone_widths.contains(&0) {
            return bad(format!("backbone needs 6 positive stage widths, got {:?}", self.backbone_widths));
        }
        if self.fpn_channels == 0 || self.context_widths.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.mask_size != 4 * self.pooled_size {
            return bad(format!("mask size {} must be 4 x pooled size {}", self.mask_size, self.pooled_size));
        }
        if self.kp_channels == 0 || self.num_keypoints == 0 || self.pooled_size == 0 || self.sampling_ratio == 0 {
            return bad("keypoint head sizes must be positive".into());
        }
        if self.input_size < 64 {
            return bad(format!("input size {} below 64", self.input_size));
        }
        self.anchors.validate()?;
        if self.anchors.strides != [4, 8, 16, 32, 64] {
            return bad(format!("anchor strides {:?} must match the pyramid 4..64", self.anchors.strides));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchors.anchors_per_cell()
    }

    pub fn context_channels(&self) -> usize {
        self.context_widths.iter().sum()
    }

    /// Feature-map side per pyramid level `P2..P6` for an input side `n`.
    pub fn level_sides(n: usize) -> [usize; 5] {
        let mut out = [0; 5];
        for (i, s) in out.iter_mut().enumerate() {
            *s = n.div_ceil(1 << (FIRST_LEVEL + i));
        }
        out
    }
}

/// Named parameter tensors; frozen ones never receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub trainable: Vec<bool>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors.iter().zip(&self.trainable).filter(|(_, &t)| t).map(|(t, _)| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Context {
    a: Conv,
    b1: Conv,
    b2: Conv,
    c1: Conv,
    c2: Conv,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, t: Tensor, trainable: bool) -> usize {
        self.store.names.push(name);
        self.store.tensors.push(t);
        self.store.trainable.push(trainable);
        self.store.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, o: usize, c: usize, k: usize, std: f64, bias: f64, trainable: bool) -> Conv {
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = Tensor::from_fn(&[o, c, k, k], |_| normal.sample(&mut self.rng));
        let w = self.add(format!("{name}.weight"), w, trainable);
        let b = self.add(format!("{name}.bias"), Tensor::full(&[o], bias), trainable);
        Conv { w, b }
    }

    fn he(&mut self, name: &str, o: usize, c: usize, k: usize, trainable: bool) -> Conv {
        self.conv(name, o, c, k, (2.0 / (c * k * k) as f64).sqrt(), 0.0, trainable)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMaskFace {
    pub cfg: ToyModelConfig,
    pub params: ParamStore,
    backbone: Vec<Conv>,
    lateral: Vec<Conv>,
    output: Vec<Conv>,
    context: Vec<Context>,
    cls: Conv,
    bbox: Conv,
    kp_convs: Vec<Conv>,
    kp_deconv: Conv,
}

/// Result of the dense forward pass over one image.
#[derive(Debug)]
pub struct Forward {
    pub graph: Graph,
    /// Graph leaf per parameter, in [`ParamStore`] order.
    pub params: Vec<NodeId>,
    /// Per level `A x H x W` classification logits.
    pub cls: Vec<NodeId>,
    /// Per level `4A x H x W` box deltas, channel `4a + c`.
    pub boxes: Vec<NodeId>,
    /// Per level context-module output, the keypoint head's input.
    pub features: Vec<NodeId>,
}

impl ToyMaskFace {
    pub fn new(cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            store: ParamStore { names: vec![], tensors: vec![], trainable: vec![] },
            rng: ChaCha8Rng::seed_from_u64(cfg.init_seed),
        };
        let bw = &cfg.backbone_widths;
        let mut backbone = Vec::new();
        let mut c_in = 3;
        for (i, &w) in bw.iter().enumerate() {
            backbone.push(b.he(&format!("backbone.{i}"), w, c_in, 3, false));
            c_in = w;
        }
        let f = cfg.fpn_channels;
        let lateral = (0..4).map(|i| b.he(&format!("fpn.lateral{}", i + 2), f, bw[i + 2], 1, true)).collect();
        let output = (0..4).map(|i| b.he(&format!("fpn.output{}", i + 2), f, f, 3, true)).collect();
        let [w1, w2, w3] = cfg.context_widths;
        let context = (0..5)
            .map(|i| {
                let n = format!("context{}", i + 2);
                Context {
                    a: b.he(&format!("{n}.a"), w1, f, 3, true),
                    b1: b.he(&format!("{n}.b1"), w2, f, 3, true),
                    b2: b.he(&format!("{n}.b2"), w2, w2, 3, true),
                    c1: b.he(&format!("{n}.c1"), w3, w2, 3, true),
                    c2: b.he(&format!("{n}.c2"), w3, w3, 3, true),
                }
            })
            .collect();
        let m = cfg.context_channels();
        let a = cfg.anchors_per_cell();
        let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        let cls = b.conv("head.cls", a, m, 1, 0.01, prior_bias, true);
        let bbox = b.conv("head.box", 4 * a, m, 1, 0.01, 0.0, true);
        let mut kp_convs = Vec::new();
        let mut c_in = m;
        for i in 0..cfg.kp_convs {
            kp_convs.push(b.he(&format!("kp.conv{i}"), cfg.kp_channels, c_in, 3, true));
            c_in = cfg.kp_channels;
        }
        // Transposed conv weights are C x O x 4 x 4; fan-in per output is C * 4.
        let normal = Normal::new(0.0, (2.0 / (c_in * 4) as f64).sqrt()).expect("finite std");
        let wt = Tensor::from_fn(&[c_in, cfg.num_keypoints, 4, 4], |_| normal.sample(&mut b.rng));
        let w = b.add("kp.deconv.weight".into(), wt, true);
        let bias = b.add("kp.deconv.bias".into(), Tensor::zeros(&[cfg.num_keypoints]), true);
        Ok(Self {
            cfg,
            params: b.store,
            backbone,
            lateral,
            output,
            context,
            cls,
            bbox,
            kp_convs,
            kp_deconv: Conv { w, b: bias },
        })
    }

    /// Replace parameters, checking names and shapes.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        if store.names != self.params.names {
            return Err(Error::Format {
                what: "parameters",
                detail: "parameter names differ from the model layout".into(),
            });
        }
        for (a, b) in store.tensors.iter().zip(&self.params.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch { op: "load_params", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
            }
        }
        self.params.tensors = store.tensors;
        Ok(())
    }

    pub fn anchor_config(&self) -> &AnchorConfig {
        &self.cfg.anchors
    }

    /// Dense forward pass over a `3 x H x W` image. With `train`, trainable
    /// parameter leaves record gradients.
    pub fn forward(&self, image: &Tensor, train: bool) -> Result<Forward> {
        let (c, _, _) = image.chw()?;
        if c != 3 {
            return Err(Error::ShapeMismatch { op: "forward", lhs: image.shape().to_vec(), rhs: vec![3, 0, 0] });
        }
        let mut g = Graph::new();
        let params: Vec<NodeId> = self
            .params
            .tensors
            .iter()
            .zip(&self.params.trainable)
            .map(|(t, &tr)| g.leaf(t.clone(), train && tr))
            .collect();
        let conv = |g: &mut Graph, x: NodeId, cv: Conv| g.conv2d(x, params[cv.w], params[cv.b]);
        let conv_relu = |g: &mut Graph, x: NodeId, cv: Conv| -> Result<NodeId> {
            let y = g.conv2d(x, params[cv.w], params[cv.b])?;
            Ok(g.relu(y))
        };

        let mut x = g.leaf(image.clone(), false);
        let mut stages = Vec::new();
        for (i, &cv) in self.backbone.iter().enumerate() {
            if i > 0 {
                x = g.maxpool2(x)?;
            }
            x = conv_relu(&mut g, x, cv)?;
            if i >= 2 {
                stages.push(x);
            }
        }

        let mut laterals = Vec::with_capacity(4);
        for (i, &cv) in self.lateral.iter().enumerate() {
            laterals.push(conv(&mut g, stages[i], cv)?);
        }
        let mut top = laterals[3];
        let mut merged = [top; 4];
        for i in (0..3).rev() {
            let (_, h, w) = g.value(laterals[i]).chw()?;
            let up = g.upsample_nearest(top, h, w)?;
            top = g.add(laterals[i], up)?;
            merged[i] = top;
        }
        let mut pyramid = Vec::with_capacity(5);
        for (i, &cv) in self.output.iter().enumerate() {
            pyramid.push(conv(&mut g, merged[i], cv)?);
        }
        pyramid.push(g.maxpool2(laterals[3])?);

        let (mut cls, mut boxes, mut features) = (vec![], vec![], vec![]);
        for (p, ctx) in pyramid.into_iter().zip(&self.context) {
            let a = conv(&mut g, p, ctx.a)?;
            let t = conv_relu(&mut g, p, ctx.b1)?;
            let b = conv(&mut g, t, ctx.b2)?;
            let u = conv_relu(&mut g, t, ctx.c1)?;
            let c = conv(&mut g, u, ctx.c2)?;
            let cat = g.concat(&[a, b, c])?;
            let m = g.relu(cat);
            cls.push(conv(&mut g, m, self.cls)?);
            boxes.push(conv(&mut g, m, self.bbox)?);
            features.push(m);
        }
        Ok(Forward { graph: g, params, cls, boxes, features })
    }

    /// Keypoint logits `K x m x m` for one image-space RoI, pooled from the
    /// level chosen by [`assign_level`] with `k0`.
    pub fn keypoint_logits(&self, fwd: &mut Forward, roi: &BBox<f64>, k0: i32) -> Result<NodeId> {
        let level = assign_level(roi, k0).min(MAX_LEVEL);
        let idx = level - FIRST_LEVEL;
        let stride = 1u32 << level;
        let g = &mut fwd.graph;
        let mut x = g.roi_align(fwd.features[idx], roi, stride, self.cfg.pooled_size, self.cfg.sampling_ratio)?;
        for &cv in &self.kp_convs {
            let y = g.conv2d(x, fwd.params[cv.w], fwd.params[cv.b])?;
            x = g.relu(y);
        }
        let y = g.conv_transpose4(x, fwd.params[self.kp_deconv.w], fwd.params[self.kp_deconv.b])?;
        g.bilinear2x(y)
    }

    /// Same values as [`ToyMaskFace::keypoint_logits`] without recording
    /// the head on the tape, so intermediates are freed per proposal.
    pub fn keypoint_logits_inference(&self, fwd: &Forward, roi: &BBox<f64>, k0: i32) -> Result<Tensor> {
        let level = assign_level(roi, k0).min(MAX_LEVEL);
        let feat = fwd.graph.value(fwd.features[level - FIRST_LEVEL]);
        let (c, h, w) = feat.chw()?;
        let p = self.cfg.pooled_size;
        let taps = roi_taps(h, w, 1u32 << level, roi, p, self.cfg.sampling_ratio)?;
        let mut x = taps.apply(feat.data(), c, h * w);
        let mut ch = c;
        let t = &self.params.tensors;
        for cv in &self.kp_convs {
            let o = t[cv.w].shape()[0];
            x = kernels::conv2d(&x, ch, p, p, t[cv.w].data(), t[cv.b].data(), o, 3);
            x.iter_mut().for_each(|v| *v = v.max(0.0));
            ch = o;
        }
        let (dw, db) = (&t[self.kp_deconv.w], &t[self.kp_deconv.b]);
        let k = dw.shape()[1];
        let y = kernels::conv_transpose4(&x, ch, p, p, dw.data(), db.data(), k);
        Tensor::new(vec![k, 4 * p, 4 * p], kernels::bilinear2x(&y, k, 2 * p, 2 * p))
    }
}

impl Forward {
    /// Classification logits flattened to anchor order (level, cell, shape).
    pub fn cls_logits(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in &self.cls {
            let t = self.graph.value(id);
            let (a, h, w) = t.chw().expect("rank-3 head output");
            let plane = h * w;
            for cell in 0..plane {
                for ai in 0..a {
                    out.push(t.data()[ai * plane + cell]);
                }
            }
        }
        out
    }

    /// Box deltas flattened to anchor order.
    pub fn box_deltas(&self) -> Vec<BoxDelta<f64>> {
        let mut out = Vec::new();
        for &id in &self.boxes {
            let t = self.graph.value(id);
            let (c4, h, w) = t.chw().expect("rank-3 head output");
            let plane = h * w;
            let d = t.data();
            for cell in 0..plane {
                for ai in 0..c4 / 4 {
                    let at = |c: usize| d[(4 * ai + c) * plane + cell];
                    out.push(BoxDelta::new(at(0), at(1), at(2), at(3)));
                }
            }
        }
        out
    }

    /// Scatter anchor-order gradients back onto the per-level head outputs.
    pub fn head_seeds(&self, cls_grad: &[f64], box_grad: &[BoxDelta<f64>]) -> Vec<(NodeId, Tensor)> {
        let mut seeds = Vec::new();
        let mut offset = 0;
        for (&cid, &bid) in self.cls.iter().zip(&self.boxes) {
            let (a, h, w) = self.graph.value(cid).chw().expect("rank-3 head output");
            let plane = h * w;
            let mut gc = vec![0.0; a * plane];
            let mut gb = vec![0.0; 4 * a * plane];
            for cell in 0..plane {
                for ai in 0..a {
                    let idx = offset + cell * a + ai;
                    gc[ai * plane + cell] = cls_grad[idx];
                    let d = box_grad[idx].to_array();
                    for c in 0..4 {
                        gb[(4 * ai + c) * plane + cell] = d[c];
                    }
                }
            }
            offset += a * plane;
            seeds.push((cid, Tensor::new(vec![a, h, w], gc).expect("head shape")));
            seeds.push((bid, Tensor::new(vec![4 * a, h, w], gb).expect("head shape")));
        }
        seeds
    }
}
