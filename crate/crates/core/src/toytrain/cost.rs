//! Analytic multiply-accumulate counts and a timing probe for the
//! keypoint head's per-proposal cost.

use super::infer::image_tensor;
use super::model::{ToyMaskFace, ToyModelConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::synthdata::Image;
use serde::Serialize;
use std::time::Instant;

fn conv(o: usize, c: usize, k: usize, h: usize, w: usize) -> u64 {
    (o * c * k * k * h * w) as u64
}

/// Multiply-accumulates of the dense detection path, by stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DetectionMacs {
    pub backbone: u64,
    pub fpn: u64,
    pub context: u64,
    pub heads: u64,
}

impl DetectionMacs {
    pub fn total(&self) -> u64 {
        self.backbone + self.fpn + self.context + self.heads
    }
}

pub fn detection_macs(cfg: &ToyModelConfig, width: usize, height: usize) -> DetectionMacs {
    let bw = &cfg.backbone_widths;
    let mut backbone = 0;
    let (mut h, mut w, mut c) = (height, width, 3);
    let mut stage_dims = Vec::new();
    for (i, &o) in bw.iter().enumerate() {
        if i > 0 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        backbone += conv(o, c, 3, h, w);
        c = o;
        if i >= 2 {
            stage_dims.push((c, h, w));
        }
    }
    let f = cfg.fpn_channels;
    let mut fpn = 0;
    for &(c, h, w) in &stage_dims {
        fpn += conv(f, c, 1, h, w) + conv(f, f, 3, h, w);
    }
    let mut levels: Vec<(usize, usize)> = stage_dims.iter().map(|&(_, h, w)| (h, w)).collect();
    let (h5, w5) = levels[3];
    levels.push((h5.div_ceil(2), w5.div_ceil(2)));
    let [w1, w2, w3] = cfg.context_widths;
    let m = cfg.context_channels();
    let a = cfg.anchors_per_cell();
    let (mut context, mut heads) = (0, 0);
    for &(h, w) in &levels {
        context += conv(w1, f, 3, h, w) + conv(w2, f, 3, h, w) + conv(w2, w2, 3, h, w) + conv(w3, w2, 3, h, w) + conv(w3, w3, 3, h, w);
        heads += conv(5 * a, m, 1, h, w);
    }
    DetectionMacs { backbone, fpn, context, heads }
}

/// Multiply-accumulates of the keypoint head for one proposal, counting
/// four bilinear taps per RoIAlign sample and per upsampled output.
pub fn keypoint_macs(cfg: &ToyModelConfig) -> u64 {
    let p = cfg.pooled_size;
    let m = cfg.context_channels();
    let sr = cfg.sampling_ratio;
    let mut total = (m * p * p * sr * sr * 4) as u64;
    let mut c = m;
    for _ in 0..cfg.kp_convs {
        total += conv(cfg.kp_channels, c, 3, p, p);
        c = cfg.kp_channels;
    }
    total += (c * cfg.num_keypoints * 16 * p * p) as u64;
    total += (cfg.num_keypoints * cfg.mask_size * cfg.mask_size * 4) as u64;
    total
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadScaling {
    pub proposal_counts: Vec<usize>,
    /// Median seconds per run for each proposal count, dense pass included.
    pub seconds: Vec<f64>,
    /// Median seconds of the dense pass alone.
    pub dense_seconds: f64,
    /// Least-squares slope of time against proposal count.
    pub seconds_per_proposal: f64,
    pub r_squared: f64,
}

impl HeadScaling {
    /// Measured per-proposal cost relative to the dense pass.
    pub fn time_ratio(&self) -> f64 {
        self.seconds_per_proposal / self.dense_seconds
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time one dense pass plus the inference keypoint head on `n` proposals for every
/// `n` in `counts`, taking the median over `repeats` runs.
pub fn measure_head_scaling(model: &ToyMaskFace, img: &Image, counts: &[usize], repeats: usize, k0: i32) -> Result<HeadScaling> {
    if counts.len() < 2 || repeats == 0 {
        return Err(Error::Config("need at least two proposal counts and one repeat".into()));
    }
    let x = image_tensor(img);
    let (w, h) = (img.width as f64, img.height as f64);
    let roi = |i: usize| {
        let s = 0.2 + 0.02 * (i % 8) as f64;
        let cx = w * (0.3 + 0.05 * (i % 5) as f64);
        let cy = h * (0.3 + 0.05 * (i % 7) as f64);
        BBox::from_center_size(cx, cy, s * w, s * h)
    };
    // Counts are interleaved within each repeat so drift hits all of them alike.
    let mut dense = Vec::with_capacity(repeats * counts.len());
    let mut runs = vec![Vec::with_capacity(repeats); counts.len()];
    for _ in 0..repeats {
        for (ni, &n) in counts.iter().enumerate() {
            let t = Instant::now();
            let fwd = model.forward(&x, false)?;
            dense.push(t.elapsed().as_secs_f64());
            for i in 0..n {
                std::hint::black_box(model.keypoint_logits_inference(&fwd, &roi(i)?, k0)?);
            }
            runs[ni].push(t.elapsed().as_secs_f64());
        }
    }
    let seconds: Vec<f64> = runs.into_iter().map(median).collect();
    let xs: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, seconds.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&seconds).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = seconds.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(HeadScaling {
        proposal_counts: counts.to_vec(),
        seconds,
        dense_seconds: median(dense),
        seconds_per_proposal: slope,
        r_squared,
    })
}
