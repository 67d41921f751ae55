//! RoIAlign pooling and the one-hot keypoint mask coding.
//!
//! Coordinates follow the half-pixel-center convention: feature cell `i`
//! covers image interval `[i, i + 1) * stride` and its value sits at
//! continuous feature coordinate `i + 0.5`. Samples that fall outside the
//! map read zeros.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::KeypointTarget;
use crate::scalar::Scalar;

/// `channels x height x width` feature grid, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: u32,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, stride: u32, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || stride == 0 {
            return Err(Error::Config("feature map dimensions must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                op: "FeatureMap::new",
                lhs: vec![data.len()],
                rhs: vec![channels, height, width],
            });
        }
        Ok(Self { channels, height, width, stride, data })
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, stride: u32, f: impl Fn(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, stride, data }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Precomputed interpolation taps of one RoI: for every output bin, the
/// flat map offsets and weights (already averaged over samples).
#[derive(Debug, Clone)]
pub struct RoiTaps<T> {
    pub out_size: usize,
    /// Start of each bin's taps in `taps`, plus a final end marker.
    offsets: Vec<usize>,
    taps: Vec<(usize, T)>,
}

pub fn roi_taps<T: Scalar>(
    height: usize,
    width: usize,
    stride: u32,
    roi: &BBox<T>,
    out_size: usize,
    sampling_ratio: usize,
) -> Result<RoiTaps<T>> {
    if out_size == 0 || sampling_ratio == 0 {
        return Err(Error::Config("roi_align needs positive out_size and sampling_ratio".into()));
    }
    let s = T::of(stride as f64);
    let half = T::of(0.5);
    let x0 = roi.x1 / s - half;
    let y0 = roi.y1 / s - half;
    let rw = roi.width() / s;
    let rh = roi.height() / s;
    if !(rw >= T::of(1e-6)) || !(rh >= T::of(1e-6)) {
        return Err(Error::DegenerateRoi(format!(
            "feature-space size {:.3e} x {:.3e}",
            rw.to_f64_lossy(),
            rh.to_f64_lossy()
        )));
    }
    let n = T::of_usize(out_size);
    let (bw, bh) = (rw / n, rh / n);
    let sr = T::of_usize(sampling_ratio);
    let weight = T::one() / (sr * sr);
    let nb = out_size * out_size;
    let mut offsets = Vec::with_capacity(nb + 1);
    let mut taps = Vec::with_capacity(4 * sampling_ratio * sampling_ratio * nb);
    offsets.push(0);
    for py in 0..out_size {
        for px in 0..out_size {
            for iy in 0..sampling_ratio {
                let y = y0 + bh * (T::of_usize(py) + (T::of_usize(iy) + half) / sr);
                for ix in 0..sampling_ratio {
                    let x = x0 + bw * (T::of_usize(px) + (T::of_usize(ix) + half) / sr);
                    push_bilinear(&mut taps, height, width, y, x, weight);
                }
            }
            offsets.push(taps.len());
        }
    }
    Ok(RoiTaps { out_size, offsets, taps })
}

#[inline]
fn push_bilinear<T: Scalar>(taps: &mut Vec<(usize, T)>, h: usize, w: usize, y: T, x: T, weight: T) {
    let yf = y.floor();
    let xf = x.floor();
    let ly = y - yf;
    let lx = x - xf;
    let (iy, ix) = (yf.to_f64_lossy() as i64, xf.to_f64_lossy() as i64);
    let one = T::one();
    let corners = [
        (iy, ix, (one - ly) * (one - lx)),
        (iy, ix + 1, (one - ly) * lx),
        (iy + 1, ix, ly * (one - lx)),
        (iy + 1, ix + 1, ly * lx),
    ];
    for (cy, cx, cw) in corners {
        if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w && cw != T::zero() {
            taps.push((cy as usize * w + cx as usize, cw * weight));
        }
    }
}

impl<T: Scalar> RoiTaps<T> {
    pub fn num_bins(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Flat map offsets and weights feeding output bin `b`.
    pub fn bin(&self, b: usize) -> &[(usize, T)] {
        &self.taps[self.offsets[b]..self.offsets[b + 1]]
    }

    /// Pool a `channels x plane` buffer; output is `channels x out x out`.
    pub fn apply(&self, data: &[T], channels: usize, plane: usize) -> Vec<T> {
        let nb = self.num_bins();
        let mut out = vec![T::zero(); channels * nb];
        for (src, dst) in data.chunks(plane).take(channels).zip(out.chunks_mut(nb)) {
            for (b, o) in dst.iter_mut().enumerate() {
                *o = self.bin(b).iter().fold(T::zero(), |acc, &(i, w)| acc + w * src[i]);
            }
        }
        out
    }

    /// Accumulate the adjoint of [`RoiTaps::apply`] into `grad_map`.
    pub fn apply_transpose(&self, grad_out: &[T], channels: usize, plane: usize, grad_map: &mut [T]) {
        let nb = self.num_bins();
        for c in 0..channels {
            let dst = &mut grad_map[c * plane..(c + 1) * plane];
            for b in 0..nb {
                let taps = self.bin(b);
                let g = grad_out[c * nb + b];
                if g == T::zero() {
                    continue;
                }
                for &(i, w) in taps {
                    dst[i] = dst[i] + w * g;
                }
            }
        }
    }
}

/// RoIAlign of `roi` (image coordinates) on `map`; output `C x out x out`.
pub fn roi_align<T: Scalar>(map: &FeatureMap<T>, roi: &BBox<T>, out_size: usize, sampling_ratio: usize) -> Result<Vec<T>> {
    let taps = roi_taps(map.height, map.width, map.stride, roi, out_size, sampling_ratio)?;
    Ok(taps.apply(&map.data, map.channels, map.height * map.width))
}

/// Gradient of `sum(grad_out * roi_align(map))` with respect to the map.
pub fn roi_align_backward<T: Scalar>(
    map: &FeatureMap<T>,
    roi: &BBox<T>,
    out_size: usize,
    sampling_ratio: usize,
    grad_out: &[T],
) -> Result<Vec<T>> {
    let taps = roi_taps(map.height, map.width, map.stride, roi, out_size, sampling_ratio)?;
    let plane = map.height * map.width;
    if grad_out.len() != map.channels * out_size * out_size {
        return Err(Error::ShapeMismatch {
            op: "roi_align_backward",
            lhs: vec![grad_out.len()],
            rhs: vec![map.channels, out_size, out_size],
        });
    }
    let mut grad = vec![T::zero(); map.data.len()];
    taps.apply_transpose(grad_out, map.channels, plane, &mut grad);
    Ok(grad)
}

/// A landmark in image coordinates with its visibility flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark<T> {
    pub x: T,
    pub y: T,
    pub visible: bool,
}

/// One-hot cell per landmark; invisible or out-of-RoI landmarks map to `None`.
pub fn encode_keypoint_target<T: Scalar>(roi: &BBox<T>, landmarks: &[Landmark<T>], m: usize) -> Result<KeypointTarget> {
    if m < 2 {
        return Err(Error::Config(format!("mask size {m} must be at least 2")));
    }
    let mf = T::of_usize(m);
    let cell = |v: T, lo: T, size: T| -> usize {
        let idx = ((v - lo) / size * mf).floor().to_f64_lossy();
        idx.clamp(0.0, (m - 1) as f64) as usize
    };
    Ok(landmarks
        .iter()
        .map(|lm| {
            if !lm.visible || !roi.contains_point(lm.x, lm.y) {
                None
            } else {
                Some((cell(lm.y, roi.y1, roi.height()), cell(lm.x, roi.x1, roi.width())))
            }
        })
        .collect())
}

/// Hard-argmax decode of `K x m x m` logits to points at cell centers.
/// Ties resolve to the lowest row-major index.
pub fn decode_keypoint_mask<T: Scalar>(logits: &[T], k: usize, m: usize, roi: &BBox<T>) -> Result<Vec<(T, T)>> {
    let plane = m * m;
    if m == 0 || logits.len() != k * plane {
        return Err(Error::ShapeMismatch {
            op: "decode_keypoint_mask",
            lhs: vec![logits.len()],
            rhs: vec![k, m, m],
        });
    }
    let mf = T::of_usize(m);
    let half = T::of(0.5);
    Ok((0..k)
        .map(|kk| {
            let row = &logits[kk * plane..(kk + 1) * plane];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            let (j, l) = (best / m, best % m);
            (
                roi.x1 + (T::of_usize(l) + half) * roi.width() / mf,
                roi.y1 + (T::of_usize(j) + half) * roi.height() / mf,
            )
        })
        .collect())
}
