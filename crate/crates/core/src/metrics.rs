//! Average precision, normalized mean error and cumulative error curves.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::matching::greedy_match;
use crate::scalar::Scalar;
use crate::suppression::Detection;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmeNormalizer {
    BboxSqrtArea,
    InterOcular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// IoU for a detection to count as a true positive.
    pub iou_match_thresh: f64,
    /// IoU for picking the proposal whose landmarks are scored against a face.
    pub landmark_iou_thresh: f64,
    pub nme_normalizer: NmeNormalizer,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_match_thresh: 0.5,
            landmark_iou_thresh: 0.3,
            nme_normalizer: NmeNormalizer::BboxSqrtArea,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let inside = |t: f64| t > 0.0 && t < 1.0;
        if inside(self.iou_match_thresh) && inside(self.landmark_iou_thresh) {
            Ok(())
        } else {
            Err(Error::Config(format!("evaluation thresholds must lie in (0, 1): {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult<T> {
    pub ap: T,
    /// `(recall, precision)` after every ranked detection.
    pub points: Vec<(T, T)>,
}

/// All-points interpolated AP over a single class.
///
/// Detections from every image are ranked together by descending score
/// (ties: image order, then detection order). Each detection is matched to
/// the unmatched ground truth of its own image with the highest IoU at or
/// above `iou_thresh`.
pub fn pr_curve_ap<T: Scalar>(dets: &[Vec<Detection<T>>], gts: &[Vec<BBox<T>>], iou_thresh: T) -> Result<ApResult<T>> {
    if dets.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            op: "pr_curve_ap",
            lhs: vec![dets.len()],
            rhs: vec![gts.len()],
        });
    }
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(Error::UndefinedMetric("average precision with zero ground-truth boxes".into()));
    }
    let mut ranked: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| (0..ds.len()).map(move |i| (img, i)))
        .collect();
    ranked.sort_by(|&(ia, a), &(ib, b)| {
        dets[ib][b]
            .score
            .partial_cmp(&dets[ia][a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((ia, a).cmp(&(ib, b)))
    });

    // Greedy matching is per image and score-ordered, so it can be resolved
    // image by image before the global sweep.
    let tp_flags: Vec<Vec<bool>> = dets
        .iter()
        .zip(gts)
        .map(|(ds, gs)| {
            let boxes: Vec<BBox<T>> = ds.iter().map(|d| d.bbox).collect();
            let scores: Vec<T> = ds.iter().map(|d| d.score).collect();
            greedy_match(&boxes, &scores, gs, iou_thresh)
                .into_iter()
                .map(|m| m.is_some())
                .collect()
        })
        .collect();

    let n_gt = T::of_usize(total_gt);
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked.len());
    for (rank, &(img, i)) in ranked.iter().enumerate() {
        if tp_flags[img][i] {
            tp += 1;
        }
        points.push((T::of_usize(tp) / n_gt, T::of_usize(tp) / T::of_usize(rank + 1)));
    }
    Ok(ApResult {
        ap: interpolated_area(&points),
        points,
    })
}

/// Area under the right-max envelope of a recall-ordered PR sequence.
fn interpolated_area<T: Scalar>(points: &[(T, T)]) -> T {
    let mut envelope: Vec<T> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = T::zero();
    let mut area = T::zero();
    for (&(r, _), &p) in points.iter().zip(&envelope) {
        if r > prev_recall {
            area = area + (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    area
}

/// Mean Euclidean landmark error divided by `normalizer`, over the points
/// where `valid` is true (all points when `valid` is `None`).
pub fn nme<T: Scalar>(pred: &[(T, T)], gt: &[(T, T)], valid: Option<&[bool]>, normalizer: T) -> Result<T> {
    if pred.len() != gt.len() || valid.is_some_and(|v| v.len() != gt.len()) {
        return Err(Error::ShapeMismatch {
            op: "nme",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    if !(normalizer > T::zero()) || !normalizer.is_finite() {
        return Err(Error::UndefinedMetric(format!("NME normalizer {normalizer}")));
    }
    let mut sum = T::zero();
    let mut count = 0usize;
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if valid.is_some_and(|v| !v[i]) {
            continue;
        }
        sum = sum + ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("NME with no valid landmarks".into()));
    }
    Ok(sum / T::of_usize(count) / normalizer)
}

pub fn bbox_sqrt_area<T: Scalar>(gt: &BBox<T>) -> T {
    gt.area().sqrt()
}

/// Distance between two ground-truth eye points.
pub fn inter_ocular<T: Scalar>(gt: &[(T, T)], left: usize, right: usize) -> T {
    let (a, b) = (gt[left], gt[right]);
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Cumulative error distribution over faces; undetected faces count as `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ced<T> {
    sorted: Vec<T>,
}

impl<T: Scalar> Ced<T> {
    pub fn new(nmes: &[Option<T>]) -> Result<Self> {
        if nmes.is_empty() {
            return Err(Error::UndefinedMetric("CED of an empty set".into()));
        }
        let mut sorted: Vec<T> = nmes.iter().map(|v| v.unwrap_or(T::infinity())).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Fraction of faces with NME <= `t`.
    pub fn fraction_at(&self, t: T) -> T {
        let n = self.sorted.partition_point(|&v| v <= t);
        T::of_usize(n) / T::of_usize(self.sorted.len())
    }

    /// Smallest error reached by at least a fraction `q` of faces: the
    /// `ceil(q n)`-th order statistic.
    pub fn at(&self, q: f64) -> T {
        let n = self.sorted.len();
        let rank = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
        self.sorted[rank.min(n) - 1]
    }

    /// Step points `(nme, fraction)` at every distinct finite error.
    pub fn curve(&self) -> Vec<(T, T)> {
        let n = T::of_usize(self.sorted.len());
        let mut out: Vec<(T, T)> = Vec::new();
        for (i, &v) in self.sorted.iter().enumerate() {
            if !v.is_finite() {
                break;
            }
            let frac = T::of_usize(i + 1) / n;
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 = frac,
                _ => out.push((v, frac)),
            }
        }
        out
    }
}

/// Two-column CSV with a one-line header.
pub fn write_curve_csv<T: Scalar, W: Write>(mut w: W, header: (&str, &str), points: &[(T, T)]) -> std::io::Result<()> {
    writeln!(w, "{},{}", header.0, header.1)?;
    for (x, y) in points {
        writeln!(w, "{},{}", x.to_f64_lossy(), y.to_f64_lossy())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt() -> Vec<Vec<BBox<f64>>> {
        vec![vec![BBox::new(0., 0., 10., 10.).unwrap()]]
    }

    fn det(x: f64, s: f64) -> Detection<f64> {
        Detection::new(BBox::new(x, 0., x + 10., 10.).unwrap(), s)
    }

    #[test]
    fn ap_examples() {
        assert_eq!(pr_curve_ap(&[vec![det(0., 0.9)]], &gt(), 0.5).unwrap().ap, 1.0);
        assert_eq!(pr_curve_ap(&[vec![det(0., 0.9), det(50., 0.8)]], &gt(), 0.5).unwrap().ap, 1.0);
        assert_eq!(pr_curve_ap(&[vec![det(50., 0.9), det(0., 0.8)]], &gt(), 0.5).unwrap().ap, 0.5);
        assert!(pr_curve_ap::<f64>(&[vec![]], &[vec![]], 0.5).is_err());
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let r = pr_curve_ap(&[vec![det(0., 0.9), det(0., 0.8)]], &gt(), 0.5).unwrap();
        assert_eq!(r.points, vec![(1.0, 1.0), (1.0, 0.5)]);
    }

    #[test]
    fn nme_examples() {
        let g: Vec<(f64, f64)> = (0..5).map(|i| (10.0 * i as f64, 5.0)).collect();
        assert_eq!(nme(&g, &g, None, 100.0).unwrap(), 0.0);
        let p: Vec<(f64, f64)> = g.iter().map(|&(x, y)| (x + 2.0, y)).collect();
        let b = BBox::new(0., 0., 100., 100.).unwrap();
        assert!((nme(&p, &g, None, bbox_sqrt_area(&b)).unwrap() - 0.02).abs() < 1e-15);
        assert_eq!(nme(&[(3.0, 4.0)], &[(0.0, 0.0)], None, 50.0).unwrap(), 5.0 / 50.0);
        assert!(nme(&p, &g, None, 0.0).is_err());
    }

    #[test]
    fn nme_respects_validity() {
        let v = nme(&[(1.0, 0.0), (100.0, 0.0)], &[(0.0, 0.0), (0.0, 0.0)], Some(&[true, false]), 1.0).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn ced_examples() {
        let vals: Vec<Option<f64>> = (1..=100).map(|i| Some(i as f64)).collect();
        assert_eq!(Ced::new(&vals).unwrap().at(0.95), 95.0);
        let none = Ced::<f64>::new(&[None, None]).unwrap();
        assert!(none.at(0.95).is_infinite());
        assert!(none.curve().is_empty());
        let same = Ced::new(&[Some(0.3); 7]).unwrap();
        for q in [0.1, 0.5, 0.95, 1.0] {
            assert_eq!(same.at(q), 0.3);
        }
        assert!(Ced::<f64>::new(&[]).is_err());
    }

    #[test]
    fn ced_curve_steps() {
        let c = Ced::new(&[Some(0.2), Some(0.1), Some(0.2), None]).unwrap();
        assert_eq!(c.curve(), vec![(0.1, 0.25), (0.2, 0.75)]);
        assert_eq!(c.fraction_at(0.15), 0.25);
        assert_eq!(c.fraction_at(1e9), 0.75);
    }

    #[test]
    fn curve_csv_format() {
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, ("recall", "precision"), &[(0.5, 1.0)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "recall,precision\n0.5,1\n");
    }
}
