/// Interleaved 8-bit RGB image. Intensities map to `[0, 1]` as `v / 255`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-planar `3 x H x W` buffer in `[0, 1]`.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c] as f64 / 255.0;
            }
        }
        out
    }

    /// Bilinear resampling. `inverse` maps an output pixel center to the
    /// continuous source position (pixel `i` spans `[i, i + 1)`); samples
    /// outside the source read black.
    pub fn resample(&self, out_w: usize, out_h: usize, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Image {
        let mut out = Image::new(out_w, out_h);
        for v in 0..out_h {
            for u in 0..out_w {
                let (sx, sy) = inverse(u as f64 + 0.5, v as f64 + 0.5);
                out.set(u, v, self.sample(sx - 0.5, sy - 0.5));
            }
        }
        out
    }

    fn sample(&self, x: f64, y: f64) -> [u8; 3] {
        let (xf, yf) = (x.floor(), y.floor());
        let (tx, ty) = (x - xf, y - yf);
        let (ix, iy) = (xf as i64, yf as i64);
        let mut acc = [0.0f64; 3];
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                let (cx, cy) = (ix + dx, iy + dy);
                let w = wx * wy;
                if w == 0.0 || cx < 0 || cy < 0 || cx as usize >= self.width || cy as usize >= self.height {
                    continue;
                }
                let px = self.get(cx as usize, cy as usize);
                for c in 0..3 {
                    acc[c] += w * px[c] as f64;
                }
            }
        }
        acc.map(|v| v.round().clamp(0.0, 255.0) as u8)
    }

    /// Per-channel affine jitter `v * gain + 255 * bias`, clamped.
    pub fn color_affine(&mut self, gain: [f64; 3], bias: [f64; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] as f64 * gain[c] + 255.0 * bias[c]).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}
