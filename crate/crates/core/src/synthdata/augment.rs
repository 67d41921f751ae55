use super::{filter_annotations, AnnotationFilter, Face, Scene, FLIP_PERMUTATION};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::roialign::Landmark;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Detection,
    Landmark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    pub scale_range: (f64, f64),
    pub crop_size: usize,
    pub bbox_crop_prob: f64,
    pub hflip_prob: f64,
    pub color_gain: (f64, f64),
    pub color_bias: (f64, f64),
    pub landmark_box_range: (f64, f64),
    pub landmark_crop_size: usize,
    pub rotation_deg: f64,
    pub filter: AnnotationFilter,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mode: AugmentMode::Detection,
            scale_range: (0.5, 2.5),
            crop_size: 640,
            bbox_crop_prob: 0.5,
            hflip_prob: 0.5,
            color_gain: (0.8, 1.2),
            color_bias: (-0.1, 0.1),
            landmark_box_range: (150.0, 450.0),
            landmark_crop_size: 480,
            rotation_deg: 30.0,
            filter: AnnotationFilter::default(),
        }
    }
}

impl AugmentConfig {
    pub fn landmark() -> Self {
        Self {
            mode: AugmentMode::Landmark,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let ok = ordered(self.scale_range)
            && self.scale_range.0 > 0.0
            && ordered(self.color_gain)
            && ordered(self.color_bias)
            && ordered(self.landmark_box_range)
            && self.landmark_box_range.0 > 0.0
            && prob(self.bbox_crop_prob)
            && prob(self.hflip_prob)
            && self.crop_size > 0
            && self.landmark_crop_size > 0
            && self.rotation_deg >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation configuration {self:?}")))
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.gen_range(r.0..r.1)
    } else {
        r.0
    }
}

fn sample_color(rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> ([f64; 3], [f64; 3]) {
    let gain = [0; 3].map(|_| uniform(rng, cfg.color_gain));
    let bias = [0; 3].map(|_| uniform(rng, cfg.color_bias));
    (gain, bias)
}

/// Concrete draw of the detection pipeline's random choices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionAugParams {
    pub scale: f64,
    /// Crop origin in scaled-image pixels; negative values pad.
    pub crop_x: i64,
    pub crop_y: i64,
    pub flip: bool,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
}

impl DetectionAugParams {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            crop_x: 0,
            crop_y: 0,
            flip: false,
            gain: [1.0; 3],
            bias: [0.0; 3],
        }
    }
}

fn scaled_dims(scene: &Scene, scale: f64) -> (usize, usize) {
    let w = ((scene.image.width as f64 * scale).round() as usize).max(1);
    let h = ((scene.image.height as f64 * scale).round() as usize).max(1);
    (w, h)
}

fn crop_origin(rng: &mut ChaCha8Rng, extent: usize, crop: usize, around: Option<f64>) -> i64 {
    let (e, c) = (extent as i64, crop as i64);
    let (lo, hi) = ((e - c).min(0), (e - c).max(0));
    match around {
        Some(center) => {
            let pick = center.floor() as i64 - rng.gen_range(0..c);
            pick.clamp(lo, hi)
        }
        None => rng.gen_range(lo..=hi),
    }
}

pub fn sample_detection_params(scene: &Scene, cfg: &AugmentConfig, seed: u64) -> DetectionAugParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = uniform(&mut rng, cfg.scale_range);
    let (w, h) = scaled_dims(scene, scale);
    let (sx, sy) = (w as f64 / scene.image.width as f64, h as f64 / scene.image.height as f64);
    let kept = filter_annotations(&scaled_faces(&scene.faces, sx, sy), &cfg.filter);
    let around_box = !kept.is_empty() && rng.gen_bool(cfg.bbox_crop_prob);
    let target = if around_box {
        let f = &kept[rng.gen_range(0..kept.len())];
        Some(f.bbox.center())
    } else {
        None
    };
    let crop_x = crop_origin(&mut rng, w, cfg.crop_size, target.map(|c| c.0));
    let crop_y = crop_origin(&mut rng, h, cfg.crop_size, target.map(|c| c.1));
    let flip = rng.gen_bool(cfg.hflip_prob);
    let (gain, bias) = sample_color(&mut rng, cfg);
    DetectionAugParams {
        scale,
        crop_x,
        crop_y,
        flip,
        gain,
        bias,
    }
}

fn scaled_faces(faces: &[Face], sx: f64, sy: f64) -> Vec<Face> {
    faces
        .iter()
        .map(|f| Face {
            bbox: f.bbox.scaled(sx, sy),
            landmarks: f
                .landmarks
                .iter()
                .map(|l| Landmark { x: l.x * sx, y: l.y * sy, visible: l.visible })
                .collect(),
        })
        .collect()
}

fn flip_face(face: &Face, width: f64) -> Face {
    let b = face.bbox;
    let mirrored = BBox { x1: width - b.x2, y1: b.y1, x2: width - b.x1, y2: b.y2 };
    let landmarks = if face.landmarks.len() == FLIP_PERMUTATION.len() {
        FLIP_PERMUTATION
            .iter()
            .map(|&src| {
                let l = face.landmarks[src];
                Landmark { x: width - l.x, ..l }
            })
            .collect()
    } else {
        face.landmarks.iter().map(|l| Landmark { x: width - l.x, ..*l }).collect()
    };
    Face { bbox: mirrored, landmarks }
}

/// Apply a fixed draw of the detection pipeline: scale, annotation filter,
/// crop (faces kept iff their center lies inside), flip, color.
pub fn apply_detection_aug(scene: &Scene, p: &DetectionAugParams, cfg: &AugmentConfig) -> Scene {
    let crop = cfg.crop_size;
    let (w, h) = scaled_dims(scene, p.scale);
    let (sx, sy) = (w as f64 / scene.image.width as f64, h as f64 / scene.image.height as f64);
    let (ox, oy) = (p.crop_x as f64, p.crop_y as f64);
    let cf = crop as f64;
    let flip = p.flip;
    let mut image = scene.image.resample(crop, crop, |u, v| {
        let xc = if flip { cf - u } else { u };
        ((xc + ox) / sx, (v + oy) / sy)
    });
    image.color_affine(p.gain, p.bias);

    let faces = filter_annotations(&scaled_faces(&scene.faces, sx, sy), &cfg.filter)
        .into_iter()
        .filter(|f| {
            let (cx, cy) = f.bbox.center();
            cx >= ox && cx < ox + cf && cy >= oy && cy < oy + cf
        })
        .map(|f| {
            let moved = Face {
                bbox: f.bbox.translated(-ox, -oy),
                landmarks: f.landmarks.iter().map(|l| Landmark { x: l.x - ox, y: l.y - oy, ..*l }).collect(),
            };
            if flip {
                flip_face(&moved, cf)
            } else {
                moved
            }
        })
        .collect();
    Scene { image, faces, seed: scene.seed }
}

pub fn augment_detection(scene: &Scene, cfg: &AugmentConfig, seed: u64) -> Scene {
    let p = sample_detection_params(scene, cfg, seed);
    apply_detection_aug(scene, &p, cfg)
}

/// Concrete draw of the landmark pipeline's random choices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkAugParams {
    pub scale: f64,
    pub crop_x: f64,
    pub crop_y: f64,
    /// In-plane rotation about the crop center, radians.
    pub theta: f64,
    pub flip: bool,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
}

pub fn sample_landmark_params(scene: &Scene, cfg: &AugmentConfig, seed: u64) -> Result<LandmarkAugParams> {
    if scene.faces.is_empty() {
        return Err(Error::Config("landmark augmentation needs at least one face".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let face = &scene.faces[rng.gen_range(0..scene.faces.len())];
    let size = face.bbox.area().sqrt();
    let scale = uniform(&mut rng, cfg.landmark_box_range) / size;
    let crop = cfg.landmark_crop_size as f64;
    let (cx, cy) = face.bbox.center();
    let jitter = crop / 8.0;
    let crop_x = (cx * scale - crop / 2.0 + rng.gen_range(-jitter..=jitter)).round();
    let crop_y = (cy * scale - crop / 2.0 + rng.gen_range(-jitter..=jitter)).round();
    let max_theta = cfg.rotation_deg.to_radians();
    let theta = if max_theta > 0.0 { rng.gen_range(-max_theta..=max_theta) } else { 0.0 };
    let flip = rng.gen_bool(cfg.hflip_prob);
    let (gain, bias) = sample_color(&mut rng, cfg);
    Ok(LandmarkAugParams { scale, crop_x, crop_y, theta, flip, gain, bias })
}

/// Rotate `(x, y)` by `theta` about `(cx, cy)` (image axes, y down).
pub fn rotate_point(x: f64, y: f64, cx: f64, cy: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    (cx + c * dx - s * dy, cy + s * dx + c * dy)
}

pub fn apply_landmark_aug(scene: &Scene, p: &LandmarkAugParams, cfg: &AugmentConfig) -> Scene {
    let crop = cfg.landmark_crop_size;
    let cf = crop as f64;
    let center = cf / 2.0;
    let forward = |x: f64, y: f64| -> (f64, f64) {
        let (rx, ry) = rotate_point(x * p.scale - p.crop_x, y * p.scale - p.crop_y, center, center, p.theta);
        if p.flip {
            (cf - rx, ry)
        } else {
            (rx, ry)
        }
    };
    let mut image = scene.image.resample(crop, crop, |u, v| {
        let u = if p.flip { cf - u } else { u };
        let (x, y) = rotate_point(u, v, center, center, -p.theta);
        ((x + p.crop_x) / p.scale, (y + p.crop_y) / p.scale)
    });
    image.color_affine(p.gain, p.bias);

    let faces = scene
        .faces
        .iter()
        .filter_map(|f| {
            let (cx, cy) = f.bbox.center();
            let (tcx, tcy) = forward(cx, cy);
            if !(tcx >= 0.0 && tcx < cf && tcy >= 0.0 && tcy < cf) {
                return None;
            }
            let b = f.bbox;
            let corners = [(b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2)].map(|(x, y)| forward(x, y));
            let hull = BBox {
                x1: corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min),
                y1: corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min),
                x2: corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max),
                y2: corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max),
            };
            let moved: Vec<Landmark<f64>> = f
                .landmarks
                .iter()
                .map(|l| {
                    let (x, y) = forward(l.x, l.y);
                    Landmark { x, y, visible: l.visible }
                })
                .collect();
            let landmarks = if p.flip && moved.len() == FLIP_PERMUTATION.len() {
                FLIP_PERMUTATION.iter().map(|&src| moved[src]).collect()
            } else {
                moved
            };
            Some(Face { bbox: hull, landmarks })
        })
        .collect();
    Scene { image, faces, seed: scene.seed }
}

pub fn augment_landmark(scene: &Scene, cfg: &AugmentConfig, seed: u64) -> Result<Scene> {
    let p = sample_landmark_params(scene, cfg, seed)?;
    Ok(apply_landmark_aug(scene, &p, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, LANDMARK_OFFSETS};

    fn scene() -> Scene {
        generate_scene(11, 120, 100, 2, (20.0, 36.0)).unwrap().0
    }

    fn small_cfg() -> AugmentConfig {
        AugmentConfig {
            crop_size: 96,
            landmark_crop_size: 96,
            landmark_box_range: (30.0, 60.0),
            ..AugmentConfig::default()
        }
    }

    #[test]
    fn identity_aug_translates_annotations() {
        let s = scene();
        let cfg = AugmentConfig { crop_size: 120, ..small_cfg() };
        let out = apply_detection_aug(&s, &DetectionAugParams::identity(), &cfg);
        assert_eq!(out.faces, s.faces);
        assert_eq!(out.image.get(5, 5), s.image.get(5, 5));
    }

    #[test]
    fn flip_mirrors_and_swaps_eyes() {
        let s = scene();
        let cfg = AugmentConfig { crop_size: 120, ..small_cfg() };
        let p = DetectionAugParams { flip: true, ..DetectionAugParams::identity() };
        let out = apply_detection_aug(&s, &p, &cfg);
        for (a, b) in s.faces.iter().zip(&out.faces) {
            assert_eq!(b.landmarks[1].x, 120.0 - a.landmarks[0].x);
            assert_eq!(b.landmarks[0].x, 120.0 - a.landmarks[1].x);
            assert_eq!(b.landmarks[2].x, 120.0 - a.landmarks[2].x);
            assert_eq!(b.bbox.x1, 120.0 - a.bbox.x2);
        }
        assert_eq!(out.image.get(0, 3), s.image.get(119, 3));
    }

    #[test]
    fn scale_doubles_boxes() {
        let s = scene();
        let cfg = AugmentConfig { crop_size: 240, ..small_cfg() };
        let p = DetectionAugParams { scale: 2.0, ..DetectionAugParams::identity() };
        let out = apply_detection_aug(&s, &p, &cfg);
        for (a, b) in s.faces.iter().zip(&out.faces) {
            assert!((b.bbox.width() - 2.0 * a.bbox.width()).abs() < 1e-9);
            assert!((b.bbox.height() - 2.0 * a.bbox.height()).abs() < 1e-9);
        }
    }

    #[test]
    fn template_consistency_under_random_detection_aug() {
        let cfg = small_cfg();
        for seed in 0..40 {
            let s = generate_scene(seed, 120, 100, 3, (12.0, 40.0)).unwrap().0;
            let out = augment_detection(&s, &cfg, 1000 + seed);
            assert_eq!(out.image.width, 96);
            for f in &out.faces {
                for (k, l) in f.landmarks.iter().enumerate() {
                    let (fx, fy) = LANDMARK_OFFSETS[k];
                    let ex = f.bbox.x1 + fx * f.bbox.width();
                    let ey = f.bbox.y1 + fy * f.bbox.height();
                    assert!((ex - l.x).abs() <= 1.0 && (ey - l.y).abs() <= 1.0, "seed {seed} kp {k}");
                }
            }
        }
    }

    #[test]
    fn determinism() {
        let s = scene();
        let a = augment_detection(&s, &small_cfg(), 5);
        let b = augment_detection(&s, &small_cfg(), 5);
        assert_eq!(a, b);
        let a = augment_landmark(&s, &small_cfg(), 5).unwrap();
        let b = augment_landmark(&s, &small_cfg(), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_oracle() {
        let (x, y) = rotate_point(10.0 + 7.0, 10.0, 10.0, 10.0, std::f64::consts::FRAC_PI_2);
        assert!((x - 10.0).abs() < 1e-12 && (y - 17.0).abs() < 1e-12);
        let theta = 0.4f64;
        let (r00, r01, r10, r11) = (theta.cos(), -theta.sin(), theta.sin(), theta.cos());
        let (x, y) = rotate_point(3.0, -2.0, 0.0, 0.0, theta);
        assert!((x - (r00 * 3.0 + r01 * -2.0)).abs() < 1e-12);
        assert!((y - (r10 * 3.0 + r11 * -2.0)).abs() < 1e-12);
    }

    #[test]
    fn landmark_aug_zero_rotation_translates() {
        let s = scene();
        let cfg = small_cfg();
        let p = LandmarkAugParams { scale: 1.0, crop_x: 10.0, crop_y: 4.0, theta: 0.0, flip: false, gain: [1.0; 3], bias: [0.0; 3] };
        let out = apply_landmark_aug(&s, &p, &cfg);
        for f in &out.faces {
            let src = s.faces.iter().find(|g| (g.bbox.x1 - 10.0 - f.bbox.x1).abs() < 1e-9).unwrap();
            for (a, b) in src.landmarks.iter().zip(&f.landmarks) {
                assert!((a.x - 10.0 - b.x).abs() < 1e-9 && (a.y - 4.0 - b.y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn landmark_aug_center_fixed_under_rotation() {
        let mut s = scene();
        let cfg = small_cfg();
        // place a landmark exactly at the future crop center
        s.faces[0].landmarks[2] = Landmark { x: 48.0 + 10.0, y: 48.0 + 4.0, visible: true };
        s.faces[0].bbox = BBox::new(40.0, 40.0, 80.0, 80.0).unwrap();
        let p = LandmarkAugParams { scale: 1.0, crop_x: 10.0, crop_y: 4.0, theta: 30f64.to_radians(), flip: false, gain: [1.0; 3], bias: [0.0; 3] };
        let out = apply_landmark_aug(&s, &p, &cfg);
        let lm = out.faces[0].landmarks[2];
        assert!((lm.x - 48.0).abs() < 1e-9 && (lm.y - 48.0).abs() < 1e-9);
    }

    #[test]
    fn landmark_aug_requires_faces() {
        let empty = generate_scene(0, 32, 32, 0, (8.0, 8.0)).unwrap().0;
        assert!(augment_landmark(&empty, &small_cfg(), 0).is_err());
        let out = augment_landmark(&scene(), &small_cfg(), 9).unwrap();
        assert_eq!(out.image.width, 96);
        for f in &out.faces {
            assert!(f.bbox.width() > 0.0 && f.bbox.height() > 0.0);
        }
    }
}
