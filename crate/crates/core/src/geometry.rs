//! Boxes, IoU, box-delta coding, anchor tiling and pyramid-level assignment.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Axis-aligned box in continuous image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || !(x2 > x1) || !(y2 > y1) {
            return Err(Error::InvalidBox {
                x1: x1.to_f64_lossy(),
                y1: y1.to_f64_lossy(),
                x2: x2.to_f64_lossy(),
                y2: y2.to_f64_lossy(),
            });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center_size(cx: T, cy: T, w: T, h: T) -> Result<Self> {
        let half = T::of(0.5);
        Self::new(cx - half * w, cy - half * h, cx + half * w, cy + half * h)
    }

    #[inline]
    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (T, T) {
        let half = T::of(0.5);
        ((self.x1 + self.x2) * half, (self.y1 + self.y2) * half)
    }

    #[inline]
    pub fn intersection(&self, other: &Self) -> T {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    /// Intersection over union, in `[0, 1]`.
    #[inline]
    pub fn iou(&self, other: &Self) -> T {
        let inter = self.intersection(other);
        if inter <= T::zero() {
            return T::zero();
        }
        let union = self.area() + other.area() - inter;
        (inter / union).min(T::one())
    }

    pub fn contains_point(&self, x: T, y: T) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Uniform scaling about the image origin.
    pub fn scaled(&self, sx: T, sy: T) -> Self {
        Self {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }

    pub fn translated(&self, dx: T, dy: T) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Clip to `[0, w] x [0, h]`; `None` if nothing with positive area remains.
    pub fn clipped(&self, w: T, h: T) -> Option<Self> {
        let z = T::zero();
        Self::new(
            self.x1.max(z).min(w),
            self.y1.max(z).min(h),
            self.x2.max(z).min(w),
            self.y2.max(z).min(h),
        )
        .ok()
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            x1: U::of(self.x1.to_f64_lossy()),
            y1: U::of(self.y1.to_f64_lossy()),
            x2: U::of(self.x2.to_f64_lossy()),
            y2: U::of(self.y2.to_f64_lossy()),
        }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Center/log-size offsets of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta<T> {
    pub dx: T,
    pub dy: T,
    pub dw: T,
    pub dh: T,
}

impl<T: Scalar> BoxDelta<T> {
    pub fn new(dx: T, dy: T, dw: T, dh: T) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), T::zero())
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Largest log-size offset accepted by [`decode_deltas`].
pub fn delta_log_clamp<T: Scalar>() -> T {
    T::of((1000.0f64 / 16.0).ln())
}

pub fn encode_deltas<T: Scalar>(anchor: &BBox<T>, gt: &BBox<T>) -> BoxDelta<T> {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BoxDelta {
        dx: (gcx - acx) / aw,
        dy: (gcy - acy) / ah,
        dw: (gt.width() / aw).ln(),
        dh: (gt.height() / ah).ln(),
    }
}

/// Result of decoding deltas; `clamped` is set when a log-size offset hit the limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded<T> {
    pub bbox: BBox<T>,
    pub clamped: bool,
}

pub fn decode_deltas<T: Scalar>(anchor: &BBox<T>, d: &BoxDelta<T>) -> Result<Decoded<T>> {
    if !d.is_finite() {
        return Err(Error::Config(format!("non-finite box delta {d:?}")));
    }
    let limit = delta_log_clamp::<T>();
    let dw = d.dw.max(-limit).min(limit);
    let dh = d.dh.max(-limit).min(limit);
    let clamped = dw != d.dw || dh != d.dh;
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + d.dx * aw;
    let cy = acy + d.dy * ah;
    let bbox = BBox::from_center_size(cx, cy, aw * dw.exp(), ah * dh.exp())?;
    Ok(Decoded { bbox, clamped })
}

/// Anchor tiling parameters. Level `i` uses `base_areas[i]` and `strides[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub base_areas: Vec<f64>,
    pub scales: Vec<f64>,
    pub strides: Vec<u32>,
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            base_areas: vec![16.0 * 16.0, 32.0 * 32.0, 64.0 * 64.0, 128.0 * 128.0, 256.0 * 256.0],
            scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            strides: vec![4, 8, 16, 32, 64],
            aspect_ratios: vec![1.0],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_areas.is_empty() || self.base_areas.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "anchor base_areas ({}) and strides ({}) must be non-empty and equal length",
                self.base_areas.len(),
                self.strides.len()
            )));
        }
        if self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::Config("anchor scales and aspect_ratios must be non-empty".into()));
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !self.base_areas.iter().all(positive)
            || !self.scales.iter().all(positive)
            || !self.aspect_ratios.iter().all(positive)
            || self.strides.contains(&0)
        {
            return Err(Error::Config("anchor parameters must be positive".into()));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    /// `(w, h)` of every anchor shape at a level, in per-cell order.
    pub fn level_shapes(&self, level_idx: usize) -> Vec<(f64, f64)> {
        let side = self.base_areas[level_idx].sqrt();
        let mut out = Vec::with_capacity(self.anchors_per_cell());
        for &ratio in &self.aspect_ratios {
            for &scale in &self.scales {
                // ratio = h / w at constant area.
                let w = side * scale / ratio.sqrt();
                let h = side * scale * ratio.sqrt();
                out.push((w, h));
            }
        }
        out
    }

    pub fn min_side(&self) -> f64 {
        (0..self.strides.len())
            .flat_map(|l| self.level_shapes(l))
            .map(|(w, h)| w.min(h))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_side(&self) -> f64 {
        (0..self.strides.len())
            .flat_map(|l| self.level_shapes(l))
            .map(|(w, h)| w.max(h))
            .fold(0.0, f64::max)
    }

    /// Closed-form anchor count for an image size.
    pub fn anchor_count(&self, image_w: usize, image_h: usize) -> usize {
        self.strides
            .iter()
            .map(|&s| {
                let s = s as usize;
                image_w.div_ceil(s) * image_h.div_ceil(s) * self.anchors_per_cell()
            })
            .sum()
    }
}

/// Layout of one pyramid level inside an [`AnchorGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelLayout {
    /// Pyramid level `k` (2 for the stride-4 map).
    pub level: usize,
    pub stride: u32,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Index of the first anchor of this level in the flat list.
    pub offset: usize,
    pub anchors_per_cell: usize,
}

impl LevelLayout {
    pub fn len(&self) -> usize {
        self.grid_w * self.grid_h * self.anchors_per_cell
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense anchor set over all levels. Within a level, anchors are ordered
/// row-major by cell, then by shape.
#[derive(Debug, Clone)]
pub struct AnchorGrid<T> {
    pub boxes: Vec<BBox<T>>,
    pub level_of: Vec<u8>,
    pub cell_of: Vec<(u32, u32)>,
    pub levels: Vec<LevelLayout>,
}

impl<T> AnchorGrid<T> {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Level index of the finest map; level `k` has stride `2^k`.
pub const FIRST_LEVEL: usize = 2;

pub fn generate_anchors<T: Scalar>(
    cfg: &AnchorConfig,
    image_w: usize,
    image_h: usize,
) -> Result<AnchorGrid<T>> {
    cfg.validate()?;
    let total = cfg.anchor_count(image_w, image_h);
    let mut grid = AnchorGrid {
        boxes: Vec::with_capacity(total),
        level_of: Vec::with_capacity(total),
        cell_of: Vec::with_capacity(total),
        levels: Vec::with_capacity(cfg.strides.len()),
    };
    for (li, &stride) in cfg.strides.iter().enumerate() {
        let s = stride as usize;
        let (gw, gh) = (image_w.div_ceil(s), image_h.div_ceil(s));
        let shapes = cfg.level_shapes(li);
        grid.levels.push(LevelLayout {
            level: FIRST_LEVEL + li,
            stride,
            grid_w: gw,
            grid_h: gh,
            offset: grid.boxes.len(),
            anchors_per_cell: shapes.len(),
        });
        for row in 0..gh {
            for col in 0..gw {
                let cx = (col as f64 + 0.5) * stride as f64;
                let cy = (row as f64 + 0.5) * stride as f64;
                for &(w, h) in &shapes {
                    grid.boxes.push(BBox::from_center_size(T::of(cx), T::of(cy), T::of(w), T::of(h))?);
                    grid.level_of.push(li as u8);
                    grid.cell_of.push((col as u32, row as u32));
                }
            }
        }
    }
    Ok(grid)
}

pub const DEFAULT_K0: i32 = 3;
pub const MIN_LEVEL: usize = 2;
pub const MAX_LEVEL: usize = 6;

/// Pyramid level for a RoI: `max(2, floor(k0 + log2(sqrt(w h) / 224)))`, capped at 6.
pub fn assign_level<T: Scalar>(roi: &BBox<T>, k0: i32) -> usize {
    let size = roi.area().to_f64_lossy().sqrt();
    let k = (k0 as f64 + (size / 224.0).log2()).floor();
    if !(k >= MIN_LEVEL as f64) {
        MIN_LEVEL
    } else if k >= MAX_LEVEL as f64 {
        MAX_LEVEL
    } else {
        k as usize
    }
}
