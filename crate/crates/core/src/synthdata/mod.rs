//! Procedural face scenes with exact ground truth, annotation filtering,
//! the two training augmentation pipelines and PPM/JSON persistence.

mod augment;
mod image;
mod io;

pub use augment::{
    augment_detection, augment_landmark, apply_detection_aug, apply_landmark_aug, sample_detection_params,
    sample_landmark_params, AugmentConfig, AugmentMode, DetectionAugParams, LandmarkAugParams,
};
pub use image::Image;
pub use io::{read_scene, read_scene_dir, scene_paths, write_scene};

use crate::error::{Error, Result};
use crate::geometry::{AnchorConfig, BBox};
use crate::roialign::Landmark;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Number of landmarks per face.
pub const NUM_LANDMARKS: usize = 5;

/// Fractional `(x, y)` template offsets inside the face box: left eye,
/// right eye, nose, left mouth corner, right mouth corner.
pub const LANDMARK_OFFSETS: [(f64, f64); NUM_LANDMARKS] = [(0.3, 0.35), (0.7, 0.35), (0.5, 0.55), (0.35, 0.75), (0.65, 0.75)];

/// Landmark identity after a horizontal mirror.
pub const FLIP_PERMUTATION: [usize; NUM_LANDMARKS] = [1, 0, 2, 4, 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub bbox: BBox<f64>,
    pub landmarks: Vec<Landmark<f64>>,
}

impl Face {
    /// Face whose landmarks sit at the template offsets of `bbox`.
    pub fn from_template(bbox: BBox<f64>) -> Self {
        let landmarks = LANDMARK_OFFSETS
            .iter()
            .map(|&(fx, fy)| Landmark {
                x: bbox.x1 + fx * bbox.width(),
                y: bbox.y1 + fy * bbox.height(),
                visible: true,
            })
            .collect();
        Self { bbox, landmarks }
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        self.landmarks.iter().map(|l| (l.x, l.y)).collect()
    }

    pub fn visibility(&self) -> Vec<bool> {
        self.landmarks.iter().map(|l| l.visible).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub faces: Vec<Face>,
    pub seed: u64,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BBox<f64>> {
        self.faces.iter().map(|f| f.bbox).collect()
    }
}

/// Seed of scene `index` in a corpus generated from `base`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const PLACEMENT_RETRIES: usize = 64;
const FACE_RGB: [f64; 3] = [222.0, 178.0, 146.0];
const FEATURE_RGB: [f64; 3] = [38.0, 24.0, 30.0];

/// Render a scene. Faces are placed without overlap; the second return
/// value counts faces that could not be placed.
pub fn generate_scene(seed: u64, width: usize, height: usize, n_faces: usize, size_range: (f64, f64)) -> Result<(Scene, usize)> {
    if width == 0 || height == 0 {
        return Err(Error::Config("scene dimensions must be positive".into()));
    }
    let (lo, hi) = size_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::Config(format!("invalid face size range {size_range:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = background(&mut rng, width, height);

    let mut faces: Vec<Face> = Vec::with_capacity(n_faces);
    let mut shortfall = 0;
    for _ in 0..n_faces {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let w = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let h = w * rng.gen_range(1.0..1.2);
            if w >= width as f64 || h >= height as f64 {
                continue;
            }
            let x1 = rng.gen_range(0.0..(width as f64 - w));
            let y1 = rng.gen_range(0.0..(height as f64 - h));
            let bbox = BBox::new(x1, y1, x1 + w, y1 + h)?;
            if faces.iter().any(|f| f.bbox.intersection(&bbox) > 0.0) {
                continue;
            }
            faces.push(Face::from_template(bbox));
            placed = true;
            break;
        }
        if !placed {
            shortfall += 1;
        }
    }
    for face in &faces {
        draw_face(&mut image, face, &mut rng);
    }
    Ok((Scene { image, faces, seed }, shortfall))
}

/// Low-frequency color field plus per-pixel noise.
fn background(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Image {
    const CELL: usize = 16;
    let gw = width.div_ceil(CELL) + 2;
    let gh = height.div_ceil(CELL) + 2;
    let grid: Vec<[f64; 3]> = (0..gw * gh)
        .map(|_| [rng.gen_range(20.0..190.0), rng.gen_range(20.0..190.0), rng.gen_range(20.0..190.0)])
        .collect();
    let mut img = Image::new(width, height);
    for y in 0..height {
        let gy = y as f64 / CELL as f64;
        let (y0, ty) = (gy.floor() as usize, gy.fract());
        for x in 0..width {
            let gx = x as f64 / CELL as f64;
            let (x0, tx) = (gx.floor() as usize, gx.fract());
            let mut px = [0u8; 3];
            for (c, out) in px.iter_mut().enumerate() {
                let v00 = grid[y0 * gw + x0][c];
                let v01 = grid[y0 * gw + x0 + 1][c];
                let v10 = grid[(y0 + 1) * gw + x0][c];
                let v11 = grid[(y0 + 1) * gw + x0 + 1][c];
                let v = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11);
                *out = (v + rng.gen_range(-12.0..12.0)).round().clamp(0.0, 255.0) as u8;
            }
            img.set(x, y, px);
        }
    }
    img
}

fn draw_face(img: &mut Image, face: &Face, rng: &mut ChaCha8Rng) {
    let b = face.bbox;
    let (cx, cy) = b.center();
    let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
    let blob = (0.07 * b.width().min(b.height())).max(1.0);
    let x_lo = b.x1.floor().max(0.0) as usize;
    let y_lo = b.y1.floor().max(0.0) as usize;
    let x_hi = (b.x2.ceil() as usize).min(img.width);
    let y_hi = (b.y2.ceil() as usize).min(img.height);
    for y in y_lo..y_hi {
        let py = y as f64 + 0.5;
        for x in x_lo..x_hi {
            let px = x as f64 + 0.5;
            let e = ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2);
            if e > 1.0 {
                continue;
            }
            let on_feature = face
                .landmarks
                .iter()
                .any(|l| (px - l.x).powi(2) + (py - l.y).powi(2) <= blob * blob);
            let base = if on_feature { FEATURE_RGB } else { FACE_RGB };
            // shading darkens towards the rim
            let shade = 1.0 - 0.15 * e;
            let noise = rng.gen_range(-6.0..6.0);
            let rgb = base.map(|v| (v * shade + noise).round().clamp(0.0, 255.0) as u8);
            img.set(x, y, rgb);
        }
    }
}

/// Box-area gate applied to training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFilter {
    pub min_area: f64,
    pub max_area: f64,
}

impl AnnotationFilter {
    /// `[0.4 * smallest anchor area, 2.5 * largest anchor area]`.
    pub fn from_anchors(cfg: &AnchorConfig) -> Self {
        Self::from_areas(cfg.min_side().powi(2), cfg.max_side().powi(2))
    }

    pub fn from_areas(area_small: f64, area_large: f64) -> Self {
        Self {
            min_area: 0.4 * area_small,
            max_area: 2.5 * area_large,
        }
    }

    pub fn keeps(&self, b: &BBox<f64>) -> bool {
        let a = b.area();
        a >= self.min_area && a <= self.max_area
    }
}

impl Default for AnnotationFilter {
    fn default() -> Self {
        Self::from_anchors(&AnchorConfig::default())
    }
}

pub fn filter_annotations(faces: &[Face], filter: &AnnotationFilter) -> Vec<Face> {
    faces.iter().filter(|f| filter.keeps(&f.bbox)).cloned().collect()
}

/// Corpus of `n` scenes with 1..=`max_faces` faces each.
pub fn generate_corpus(base_seed: u64, n: usize, size: usize, max_faces: usize, size_range: (f64, f64)) -> Result<Vec<Scene>> {
    (0..n)
        .map(|i| {
            let seed = scene_seed(base_seed, i as u64);
            let n_faces = 1 + (seed % max_faces.max(1) as u64) as usize;
            generate_scene(seed, size, size, n_faces, size_range).map(|(s, _)| s)
        })
        .collect()
}
