//! Central finite-difference checks for every differentiable operator, the
//! three losses, and the full training objective.

use super::graph::{Graph, NodeId};
use super::model::{ToyMaskFace, ToyModelConfig};
use super::tensor::Tensor;
use super::train::{step_gradients, RoiPolicy, TrainConfig};
use crate::error::Result;
use crate::geometry::{generate_anchors, BBox, BoxDelta};
use crate::losses::{focal_loss, keypoint_ce_loss, smooth_l1_loss, KeypointTarget, LossConfig};
use crate::matching::{Label, MatchResult};
use crate::synthdata::generate_scene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `||a - b|| / max(||a||, ||b||)`, or the absolute norm when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = scale(a).max(scale(b));
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + FD_STEP;
            let up = f(&xs);
            xs[i] = orig - FD_STEP;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// Random values in `[-1, 1]` kept at least `gap` away from zero.
fn rand_tensor(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if v.abs() >= gap {
            break v;
        }
    })
}

/// A graph-building operator under test: inputs in, one output node out.
type Build = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

/// Check `d <seed, op(inputs)> / d input_i` for every input.
fn check_graph_op(inputs: &[Tensor], build: &Build, rng: &mut impl Rng) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &ids)?;
    let seed = rand_tensor(rng, g.value(out).shape(), 0.0);
    let grads = g.backward(vec![(out, seed.clone())])?;
    let mut worst: f64 = 0.0;
    for (i, &id) in ids.iter().enumerate() {
        let analytic = grads.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let numeric = numeric_gradient(inputs[i].data(), |x| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let t = if j == i { Tensor::new(t.shape().to_vec(), x.to_vec()).expect("same shape") } else { t.clone() };
                    g.leaf(t, true)
                })
                .collect();
            let out = build(&mut g, &ids).expect("op rebuilt at the same shapes");
            g.value(out).dot(&seed)
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn run_op(name: &str, instances: usize, rng: &mut ChaCha8Rng, mut make: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)) -> Result<CheckReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (inputs, build) = make(rng);
        worst = worst.max(check_graph_op(&inputs, build.as_ref(), rng)?);
    }
    Ok(CheckReport { name: name.into(), instances, max_rel_err: worst })
}

fn dims(rng: &mut impl Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(2..=7), rng.gen_range(2..=7))
}

/// Finite-difference checks of every operator on random small shapes.
pub fn op_suite(seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for k in [1usize, 3] {
        out.push(run_op(&format!("conv{k}x{k}"), instances, &mut rng, |r| {
            let (c, h, w) = dims(r);
            let o = r.gen_range(1..=3);
            let inputs = vec![rand_tensor(r, &[c, h, w], 0.0), rand_tensor(r, &[o, c, k, k], 0.0), rand_tensor(r, &[o], 0.0)];
            (inputs, Box::new(|g: &mut Graph, ids: &[NodeId]| g.conv2d(ids[0], ids[1], ids[2])))
        })?);
    }
    out.push(run_op("conv_transpose4x4", instances, &mut rng, |r| {
        let (c, h, w) = dims(r);
        let o = r.gen_range(1..=3);
        let inputs = vec![rand_tensor(r, &[c, h, w], 0.0), rand_tensor(r, &[c, o, 4, 4], 0.0), rand_tensor(r, &[o], 0.0)];
        (inputs, Box::new(|g: &mut Graph, ids: &[NodeId]| g.conv_transpose4(ids[0], ids[1], ids[2])))
    })?);
    out.push(run_op("relu", instances, &mut rng, |r| {
        let (c, h, w) = dims(r);
        (vec![rand_tensor(r, &[c, h, w], 1e-3)], Box::new(|g: &mut Graph, ids: &[NodeId]| Ok(g.relu(ids[0]))))
    })?);
    out.push(run_op("sigmoid", instances, &mut rng, |r| {
        let (c, h, w) = dims(r);
        (vec![rand_tensor(r, &[c, h, w], 0.0)], Box::new(|g: &mut Graph, ids: &[NodeId]| Ok(g.sigmoid(ids[0]))))
    })?);
    out.push(run_op("maxpool2", instances, &mut rng, |r| {
        let (c, h, w) = dims(r);
        // Distinct values spaced far beyond the step avoid argmax flips.
        let n = c * h * w;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        for i in (1..n).rev() {
            vals.swap(i, r.gen_range(0..=i));
        }
        let x = Tensor::new(vec![c, h, w], vals).expect("shape");
        (vec![x], Box::new(|g: &mut Graph, ids: &[NodeId]| g.maxpool2(ids[0])))
    })?);
    out.push(run_op("upsample_nearest_add", instances, &mut rng, |r| {
        let (c, h, w) = dims(r);
        let (oh, ow) = (2 * h - r.gen_range(0..=1), 2 * w - r.gen_range(0..=1));
        let inputs = vec![rand_tensor(r, &[c, h, w], 0.0), rand_tensor(r, &[c, oh, ow], 0.0)];
        (
            inputs,
            Box::new(move |g: &mut Graph, ids: &[NodeId]| {
                let up = g.upsample_nearest(ids[0], oh, ow)?;
                g.add(ids[1], up)
            }),
        )
    })?);
    out.push(run_op("concat", instances, &mut rng, |r| {
        let (_, h, w) = dims(r);
        let parts = r.gen_range(2..=3);
        let inputs = (0..parts)
            .map(|_| {
                let c = r.gen_range(1..=3);
                rand_tensor(r, &[c, h, w], 0.0)
            })
            .collect();
        (inputs, Box::new(|g: &mut Graph, ids: &[NodeId]| g.concat(ids)))
    })?);
    out.push(run_op("bilinear2x", instances, &mut rng, |r| {
        let (c, h, w) = dims(r);
        (vec![rand_tensor(r, &[c, h, w], 0.0)], Box::new(|g: &mut Graph, ids: &[NodeId]| g.bilinear2x(ids[0])))
    })?);
    out.push(run_op("roi_align", instances, &mut rng, |r| {
        let (c, _, _) = dims(r);
        let (h, w) = (r.gen_range(4..=9), r.gen_range(4..=9));
        let stride = [1u32, 2, 4][r.gen_range(0..3)];
        let (fw, fh) = ((w as u32 * stride) as f64, (h as u32 * stride) as f64);
        let x1 = r.gen_range(-0.2 * fw..0.6 * fw);
        let y1 = r.gen_range(-0.2 * fh..0.6 * fh);
        let roi = BBox::new(x1, y1, x1 + r.gen_range(0.2 * fw..0.8 * fw), y1 + r.gen_range(0.2 * fh..0.8 * fh)).expect("positive size");
        let out_size = r.gen_range(2..=5);
        let sr = r.gen_range(1..=3);
        (
            vec![rand_tensor(r, &[c, h, w], 0.0)],
            Box::new(move |g: &mut Graph, ids: &[NodeId]| g.roi_align(ids[0], &roi, stride, out_size, sr)),
        )
    })?);
    Ok(out)
}

/// Finite-difference checks of the focal, smooth-L1 and keypoint losses.
pub fn loss_suite(seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig::default();

    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.gen_range(4..=30);
        let labels: Vec<Label> = (0..n).map(|_| [Label::Positive, Label::Negative, Label::Ignore][rng.gen_range(0..3)]).collect();
        let matched = labels.iter().map(|&l| (l == Label::Positive).then_some(0)).collect();
        let num_pos = labels.iter().filter(|&&l| l == Label::Positive).count();
        let m = MatchResult { labels, matched, num_pos };
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let analytic = focal_loss(&logits, &m, &cfg)?.grad;
        let numeric = numeric_gradient(&logits, |z| focal_loss(z, &m, &cfg).expect("same length").value);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    let mut out = vec![CheckReport { name: "focal_loss".into(), instances, max_rel_err: worst }];

    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.gen_range(1..=8);
        // Residuals stay clear of the quadratic/linear seam at |d| = beta.
        let flat: Vec<f64> = (0..4 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let target: Vec<BoxDelta<f64>> = flat
            .chunks(4)
            .map(|c| {
                let mut t = [0.0; 4];
                for i in 0..4 {
                    let mut d: f64 = rng.gen_range(-2.5..2.5);
                    if (d.abs() - cfg.smooth_l1_beta).abs() < 1e-3 {
                        d += 0.01;
                    }
                    t[i] = c[i] - d;
                }
                BoxDelta::from_array(t)
            })
            .collect();
        let as_deltas = |v: &[f64]| -> Vec<BoxDelta<f64>> { v.chunks(4).map(|c| BoxDelta::new(c[0], c[1], c[2], c[3])).collect() };
        let num_pos = n + rng.gen_range(0..3);
        let analytic: Vec<f64> = smooth_l1_loss(&as_deltas(&flat), &target, num_pos, &cfg)?.grad.iter().flat_map(|d| d.to_array()).collect();
        let numeric = numeric_gradient(&flat, |v| smooth_l1_loss(&as_deltas(v), &target, num_pos, &cfg).expect("same length").value);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    out.push(CheckReport { name: "smooth_l1_loss".into(), instances, max_rel_err: worst });

    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let samples = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=3);
        let m = rng.gen_range(2..=6);
        let targets: Vec<KeypointTarget> = (0..samples)
            .map(|_| (0..k).map(|_| rng.gen_bool(0.75).then(|| (rng.gen_range(0..m), rng.gen_range(0..m)))).collect())
            .collect();
        let flat: Vec<f64> = (0..samples * k * m * m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let split = |v: &[f64]| -> Vec<Vec<f64>> { v.chunks(k * m * m).map(<[f64]>::to_vec).collect() };
        let analytic: Vec<f64> = keypoint_ce_loss(&split(&flat), &targets, m)?.grad.concat();
        let numeric = numeric_gradient(&flat, |v| keypoint_ce_loss(&split(v), &targets, m).expect("same shapes").value);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    out.push(CheckReport { name: "keypoint_ce_loss".into(), instances, max_rel_err: worst });
    Ok(out)
}

/// Gradient of the full training objective with respect to `weights`
/// randomly chosen trainable scalars, on a frozen 64x64 single-face scene
/// with fixed keypoint RoIs. Returns the relative error.
pub fn end_to_end(seed: u64, weights: usize) -> Result<f64> {
    let (scene, _) = generate_scene(seed, 64, 64, 1, (24.0, 40.0))?;
    let mut cfg_model = ToyModelConfig { init_seed: seed, ..ToyModelConfig::default() };
    cfg_model.input_size = 64;
    let mut model = ToyMaskFace::new(cfg_model)?;
    let anchors = generate_anchors::<f64>(model.anchor_config(), 64, 64)?;
    let cfg = TrainConfig::default();
    let face = scene.faces[0].bbox;
    let jittered = BBox::new(face.x1 - 2.0, face.y1 + 1.0, face.x2 + 1.5, face.y2 - 1.0)?;
    let rois = RoiPolicy::Fixed(vec![(face, 0), (jittered, 0)]);

    let res = step_gradients(&model, &scene, &anchors, &cfg, &rois)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let trainable: Vec<usize> = (0..model.params.len()).filter(|&i| model.params.trainable[i]).collect();
    let mut analytic = Vec::with_capacity(weights);
    let mut numeric = Vec::with_capacity(weights);
    for _ in 0..weights {
        let p = trainable[rng.gen_range(0..trainable.len())];
        let e = rng.gen_range(0..model.params.tensors[p].len());
        analytic.push(res.grads[p].as_ref().map_or(0.0, |g| g.data()[e]));
        let orig = model.params.tensors[p].data()[e];
        let eval = |v: f64, model: &mut ToyMaskFace| -> Result<f64> {
            model.params.tensors[p].data_mut()[e] = v;
            Ok(step_gradients(model, &scene, &anchors, &cfg, &rois)?.report.l_total)
        };
        let up = eval(orig + FD_STEP, &mut model)?;
        let down = eval(orig - FD_STEP, &mut model)?;
        eval(orig, &mut model)?;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(relative_error(&analytic, &numeric))
}
