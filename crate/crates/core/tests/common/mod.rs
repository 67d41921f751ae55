//! Independent reference implementations shared by the integration tests.
//! Each one follows the textbook definition directly, with no shared code
//! paths beyond the input types.
#![allow(dead_code)]

use maskkit::geometry::BBox;
use maskkit::roialign::FeatureMap;
use maskkit::suppression::Detection;
use rand::Rng;

pub fn iou_oracle(a: &BBox<f64>, b: &BBox<f64>) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    inter / union
}

/// Bilinear read with zero padding, one corner at a time.
pub fn bilinear_oracle(map: &FeatureMap<f64>, c: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let mut v = 0.0;
    for (yy, wy) in [(y0, 1.0 - (y - y0)), (y0 + 1.0, y - y0)] {
        for (xx, wx) in [(x0, 1.0 - (x - x0)), (x0 + 1.0, x - x0)] {
            if yy >= 0.0 && xx >= 0.0 && (yy as usize) < map.height && (xx as usize) < map.width {
                v += wy * wx * map.data[(c * map.height + yy as usize) * map.width + xx as usize];
            }
        }
    }
    v
}

/// RoIAlign straight from the definition: half-pixel offset, regular
/// `sr x sr` samples per bin, mean of bilinear reads.
pub fn roi_align_oracle(map: &FeatureMap<f64>, roi: &BBox<f64>, out: usize, sr: usize) -> Vec<f64> {
    let s = map.stride as f64;
    let (x0, y0) = (roi.x1 / s - 0.5, roi.y1 / s - 0.5);
    let (bw, bh) = ((roi.x2 - roi.x1) / s / out as f64, (roi.y2 - roi.y1) / s / out as f64);
    let mut res = Vec::with_capacity(map.channels * out * out);
    for c in 0..map.channels {
        for py in 0..out {
            for px in 0..out {
                let mut acc = 0.0;
                for iy in 0..sr {
                    for ix in 0..sr {
                        let y = y0 + bh * (py as f64 + (iy as f64 + 0.5) / sr as f64);
                        let x = x0 + bw * (px as f64 + (ix as f64 + 0.5) / sr as f64);
                        acc += bilinear_oracle(map, c, y, x);
                    }
                }
                res.push(acc / (sr * sr) as f64);
            }
        }
    }
    res
}

/// Greedy NMS by the quadratic definition: walk boxes by (score desc,
/// index asc) and keep one iff no already-kept box overlaps it above `t`.
pub fn nms_oracle(dets: &[Detection<f64>], t: f64) -> Vec<usize> {
    let n = dets.len();
    let iou: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| iou_oracle(&dets[i].bbox, &dets[j].bbox)).collect()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou[k][i] <= t) {
            kept.push(i);
        }
    }
    kept
}

/// AP by recomputing precision and recall from scratch for every prefix of
/// the global ranking, then integrating the right-max envelope.
pub fn ap_oracle(dets: &[Vec<Detection<f64>>], gts: &[Vec<BBox<f64>>], t: f64) -> f64 {
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for i in 0..ds.len() {
            ranked.push((img, i));
        }
    }
    ranked.sort_by(|&(ia, a), &(ib, b)| dets[ib][b].score.partial_cmp(&dets[ia][a].score).unwrap().then((ia, a).cmp(&(ib, b))));
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut pr = Vec::new();
    for k in 1..=ranked.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for &(img, i) in &ranked[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts[img].iter().enumerate() {
                let v = iou_oracle(&dets[img][i].bbox, gt);
                if !used[img][g] && v >= t && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[img][g] = true;
                tp += 1;
            }
        }
        pr.push((tp as f64 / n_gt as f64, tp as f64 / k as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..pr.len() {
        let (r, _) = pr[k];
        if r > prev {
            let p = pr[k..].iter().map(|x| x.1).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
    }
    ap
}

pub fn random_box(rng: &mut impl Rng, extent: f64, min_side: f64, max_side: f64) -> BBox<f64> {
    let w = rng.gen_range(min_side..max_side);
    let h = rng.gen_range(min_side..max_side);
    let x = rng.gen_range(0.0..extent - w);
    let y = rng.gen_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Random detections clustered so that suppression has work to do.
pub fn random_detections(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Detection<f64>> {
    let centers: Vec<BBox<f64>> = (0..rng.gen_range(1..=4)).map(|_| random_box(rng, extent, 10.0, 40.0)).collect();
    (0..n)
        .map(|_| {
            let c = centers[rng.gen_range(0..centers.len())];
            let j = |r: &mut dyn rand::RngCore| r.gen_range(-6.0..6.0);
            let (x1, y1) = (c.x1 + j(rng), c.y1 + j(rng));
            let b = BBox::new(x1, y1, x1.max(c.x2 + j(rng)).max(x1 + 1.0), y1.max(c.y2 + j(rng)).max(y1 + 1.0)).unwrap();
            // Coarse scores produce ties that exercise the index tie-break.
            let score = (rng.gen_range(0..20) as f64) / 20.0 + 0.01;
            Detection::new(b, score)
        })
        .collect()
}
