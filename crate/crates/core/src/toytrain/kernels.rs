//! Forward and backward kernels on `C x H x W` buffers.
//!
//! Parallel loops split work by output plane only, so every element is
//! accumulated by one thread in a fixed order and results do not depend on
//! the thread count.

#![allow(clippy::needless_range_loop)]

use rayon::prelude::*;
use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Worker count: `MASKKIT_THREADS` if set and positive, else all cores.
pub fn thread_count() -> usize {
    std::env::var("MASKKIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .expect("kernel thread pool")
    })
}

const PAR_MIN_WORK: usize = 1 << 16;

fn for_each_plane(out: &mut [f64], plane: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    if plane == 0 {
        return;
    }
    if work >= PAR_MIN_WORK && pool().current_num_threads() > 1 {
        pool().install(|| out.par_chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p)));
    } else {
        out.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    }
}

/// `out[y][x] += w * src[y + dy][x + dx]` over the valid overlap.
#[inline]
fn axpy_shifted(out: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, wv: f64) {
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (h as isize - dy).min(h as isize).max(0) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
    if x_lo >= x_hi {
        return;
    }
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let o = &mut out[y * w + x_lo..y * w + x_hi];
        let s0 = (x_lo as isize + dx) as usize;
        let s = &src[sy * w + s0..sy * w + s0 + (x_hi - x_lo)];
        for (a, b) in o.iter_mut().zip(s) {
            *a += wv * b;
        }
    }
}

#[inline]
fn dot_shifted(a: &[f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (h as isize - dy).min(h as isize).max(0) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
    if x_lo >= x_hi {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let s0 = (x_lo as isize + dx) as usize;
        let ar = &a[y * w + x_lo..y * w + x_hi];
        let sr = &src[sy * w + s0..sy * w + s0 + (x_hi - x_lo)];
        acc += ar.iter().zip(sr).map(|(p, q)| p * q).sum::<f64>();
    }
    acc
}

/// Square `k x k` convolution, stride 1, zero padding `k / 2`.
/// `w` is `O x C x k x k`; output is `O x H x W`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], o: usize, k: usize) -> Vec<f64> {
    let plane = h * w;
    let p = (k / 2) as isize;
    let mut out = vec![0.0; o * plane];
    for_each_plane(&mut out, plane, o * c * k * k * plane, |oi, dst| {
        dst.fill(bias[oi]);
        for ci in 0..c {
            let src = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((oi * c + ci) * k + ky) * k + kx];
                    axpy_shifted(dst, src, h, w, ky as isize - p, kx as isize - p, wv);
                }
            }
        }
    });
    out
}

/// Gradients of [`conv2d`]: `(d input, d weight, d bias)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    o: usize,
    k: usize,
    grad_out: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let p = (k / 2) as isize;
    let work = o * c * k * k * plane;
    let gx = need_input.then(|| {
        let mut gx = vec![0.0; c * plane];
        for_each_plane(&mut gx, plane, work, |ci, dst| {
            for oi in 0..o {
                let g = &grad_out[oi * plane..(oi + 1) * plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((oi * c + ci) * k + ky) * k + kx];
                        // out[y][x] uses in[y + ky - p][x + kx - p]
                        axpy_shifted(dst, g, h, w, p - ky as isize, p - kx as isize, wv);
                    }
                }
            }
        });
        gx
    });
    let mut gw = vec![0.0; o * c * k * k];
    for_each_plane(&mut gw, c * k * k, work, |oi, dst| {
        let g = &grad_out[oi * plane..(oi + 1) * plane];
        for ci in 0..c {
            let src = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    dst[(ci * k + ky) * k + kx] = dot_shifted(g, src, h, w, ky as isize - p, kx as isize - p);
                }
            }
        }
    });
    let gb = (0..o).map(|oi| grad_out[oi * plane..(oi + 1) * plane].iter().sum()).collect();
    (gx, gw, gb)
}

/// Sub-pixel decomposition of the stride-2, pad-1, 4-tap transposed
/// convolution: output index `2 * i + p` reads input `i + d` through kernel
/// tap `k`, for each `(k, d)` in `PHASE_TAPS[p]`.
const PHASE_TAPS: [[(usize, isize); 2]; 2] = [[(1, 0), (3, -1)], [(0, 1), (2, 0)]];

/// Split an `2H x 2W` plane into its four `H x W` parity planes, ordered
/// `(py, px)` = (0,0), (0,1), (1,0), (1,1).
fn deinterleave(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; 4 * plane];
    for (phase, dst) in out.chunks_mut(plane).enumerate() {
        let (py, px) = (phase / 2, phase % 2);
        for y in 0..h {
            let row = &src[(2 * y + py) * 2 * w..(2 * y + py + 1) * 2 * w];
            for (d, s) in dst[y * w..(y + 1) * w].iter_mut().zip(row.iter().skip(px).step_by(2)) {
                *d = *s;
            }
        }
    }
    out
}

/// Transposed 4x4 convolution, stride 2, padding 1: `C x H x W -> O x 2H x 2W`.
/// `w` is `C x O x 4 x 4`.
pub fn conv_transpose4(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], o: usize) -> Vec<f64> {
    let (plane, ow) = (h * w, 2 * w);
    let mut out = vec![0.0; o * 4 * plane];
    for_each_plane(&mut out, 4 * plane, o * c * 16 * plane, |oi, dst| {
        let mut phase = vec![0.0; plane];
        for py in 0..2 {
            for px in 0..2 {
                phase.fill(bias[oi]);
                for ci in 0..c {
                    let src = &x[ci * plane..(ci + 1) * plane];
                    for &(ky, dy) in &PHASE_TAPS[py] {
                        for &(kx, dx) in &PHASE_TAPS[px] {
                            let wv = weight[((ci * o + oi) * 4 + ky) * 4 + kx];
                            axpy_shifted(&mut phase, src, h, w, dy, dx, wv);
                        }
                    }
                }
                for y in 0..h {
                    let row = &mut dst[(2 * y + py) * ow..(2 * y + py + 1) * ow];
                    for (d, v) in row.iter_mut().skip(px).step_by(2).zip(&phase[y * w..(y + 1) * w]) {
                        *d = *v;
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose4_backward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    o: usize,
    grad_out: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let work = o * c * 16 * plane;
    let phases: Vec<f64> = (0..o).flat_map(|oi| deinterleave(&grad_out[oi * 4 * plane..(oi + 1) * 4 * plane], h, w)).collect();
    let g_phase = |oi: usize, py: usize, px: usize| &phases[(oi * 4 + py * 2 + px) * plane..(oi * 4 + py * 2 + px + 1) * plane];
    let gx = need_input.then(|| {
        let mut gx = vec![0.0; c * plane];
        for_each_plane(&mut gx, plane, work, |ci, dst| {
            for oi in 0..o {
                for py in 0..2 {
                    for px in 0..2 {
                        let g = g_phase(oi, py, px);
                        for &(ky, dy) in &PHASE_TAPS[py] {
                            for &(kx, dx) in &PHASE_TAPS[px] {
                                let wv = weight[((ci * o + oi) * 4 + ky) * 4 + kx];
                                axpy_shifted(dst, g, h, w, -dy, -dx, wv);
                            }
                        }
                    }
                }
            }
        });
        gx
    });
    let mut gw = vec![0.0; c * o * 16];
    for_each_plane(&mut gw, o * 16, work, |ci, dst| {
        let src = &x[ci * plane..(ci + 1) * plane];
        for oi in 0..o {
            for py in 0..2 {
                for px in 0..2 {
                    let g = g_phase(oi, py, px);
                    for &(ky, dy) in &PHASE_TAPS[py] {
                        for &(kx, dx) in &PHASE_TAPS[px] {
                            dst[(oi * 4 + ky) * 4 + kx] = dot_shifted(src, g, h, w, -dy, -dx);
                        }
                    }
                }
            }
        }
    });
    let gb = (0..o).map(|oi| grad_out[oi * 4 * plane..(oi + 1) * 4 * plane].iter().sum()).collect();
    (gx, gw, gb)
}

/// 2x2 max pooling with stride 2 and ceil rounding. Returns values and the
/// flat input index of each maximum (first maximum on ties).
pub fn maxpool2(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..oh {
            for xi in 0..ow {
                let mut best = base + 2 * y * w + 2 * xi;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let (yy, xx) = (2 * y + dy, 2 * xi + dx);
                    if yy < h && xx < w {
                        let idx = base + yy * w + xx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Source row/column of nearest-neighbor resizing from `src` to `dst` cells.
#[inline]
pub fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    (i * src / dst).min(src - 1)
}

pub fn upsample_nearest(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            let sy = nearest_index(y, h, oh);
            for xi in 0..ow {
                out.push(x[(ci * h + sy) * w + nearest_index(xi, w, ow)]);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(g: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut gx = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            let sy = nearest_index(y, h, oh);
            for xi in 0..ow {
                gx[(ci * h + sy) * w + nearest_index(xi, w, ow)] += g[(ci * oh + y) * ow + xi];
            }
        }
    }
    gx
}

/// Half-pixel 1-D interpolation taps for a 2x upsample: `(i0, i1, t1)`.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Separable 2x bilinear upsample: a horizontal pass per input row, then
/// a vertical blend of whole rows.
pub fn bilinear2x(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    let mut rows = vec![0.0; h * ow];
    for (ci, dst) in out.chunks_mut(oh * ow).enumerate() {
        let p = &x[ci * h * w..(ci + 1) * h * w];
        for (src, row) in p.chunks(w).zip(rows.chunks_mut(ow)) {
            for (r, &(x0, x1, lx)) in row.iter_mut().zip(&tx) {
                *r = (1.0 - lx) * src[x0] + lx * src[x1];
            }
        }
        for (orow, &(y0, y1, ly)) in dst.chunks_mut(ow).zip(&ty) {
            let (top, bot) = (&rows[y0 * ow..(y0 + 1) * ow], &rows[y1 * ow..(y1 + 1) * ow]);
            for ((o, a), b) in orow.iter_mut().zip(top).zip(bot) {
                *o = (1.0 - ly) * a + ly * b;
            }
        }
    }
    out
}

pub fn bilinear2x_backward(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let ow = 2 * w;
    let mut gx = vec![0.0; c * h * w];
    for ci in 0..c {
        let dst = &mut gx[ci * h * w..(ci + 1) * h * w];
        let src = &g[ci * 4 * h * w..(ci + 1) * 4 * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = src[oy * ow + ox];
                dst[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                dst[y0 * w + x1] += (1.0 - ly) * lx * v;
                dst[y1 * w + x0] += ly * (1.0 - lx) * v;
                dst[y1 * w + x1] += ly * lx * v;
            }
        }
    }
    gx
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_1x1_conv() {
        let x: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.5 - 3.0).collect();
        let w = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(conv2d(&x, 2, 3, 4, &w, &[0.0, 0.0], 2, 1), x);
    }

    #[test]
    fn conv3x3_matches_direct_sum() {
        let (c, h, w, o) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let wt: Vec<f64> = (0..o * c * 9).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect();
        let b = vec![0.5, -1.0, 0.25];
        let out = conv2d(&x, c, h, w, &wt, &b, o, 3);
        for oi in 0..o {
            for y in 0..h {
                for xi in 0..w {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (yy, xx) = (y as isize + ky as isize - 1, xi as isize + kx as isize - 1);
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                    acc += wt[((oi * c + ci) * 3 + ky) * 3 + kx] * x[(ci * h + yy as usize) * w + xx as usize];
                                }
                            }
                        }
                    }
                    assert!((out[(oi * h + y) * w + xi] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_transpose_matches_scatter_definition() {
        let (c, h, w, o) = (3, 4, 5, 2);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 29) % 13) as f64 - 6.0).collect();
        let wt: Vec<f64> = (0..c * o * 16).map(|i| ((i * 17) % 9) as f64 * 0.1 - 0.4).collect();
        let b = vec![0.3, -0.7];
        let (oh, ow) = (2 * h, 2 * w);
        let mut want: Vec<f64> = (0..o).flat_map(|oi| std::iter::repeat_n(b[oi], oh * ow)).collect();
        for ci in 0..c {
            for oi in 0..o {
                for y in 0..h {
                    for xi in 0..w {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let (yy, xx) = (2 * y as isize + ky as isize - 1, 2 * xi as isize + kx as isize - 1);
                                if yy >= 0 && xx >= 0 && (yy as usize) < oh && (xx as usize) < ow {
                                    want[(oi * oh + yy as usize) * ow + xx as usize] +=
                                        wt[((ci * o + oi) * 4 + ky) * 4 + kx] * x[(ci * h + y) * w + xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        let got = conv_transpose4(&x, c, h, w, &wt, &b, o);
        assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn bilinear_matches_half_pixel_definition() {
        let (c, h, w) = (2, 3, 4);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 31) % 17) as f64 * 0.25 - 2.0).collect();
        let out = bilinear2x(&x, c, h, w);
        let coord = |o: usize, n: usize| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n - 1);
            (i0, (i0 + 1).min(n - 1), s - i0 as f64)
        };
        for ci in 0..c {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    let ((y0, y1, ly), (x0, x1, lx)) = (coord(oy, h), coord(ox, w));
                    let at = |y: usize, xi: usize| x[(ci * h + y) * w + xi];
                    let want = (1.0 - ly) * ((1.0 - lx) * at(y0, x0) + lx * at(y0, x1)) + ly * ((1.0 - lx) * at(y1, x0) + lx * at(y1, x1));
                    assert!((out[(ci * 2 * h + oy) * 2 * w + ox] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let x = vec![2.5; 2 * 3 * 3];
        assert!(bilinear2x(&x, 2, 3, 3).iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn maxpool_ceil_shape() {
        let x: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let (v, _) = maxpool2(&x, 1, 3, 5);
        assert_eq!(v, vec![6.0, 8.0, 9.0, 11.0, 13.0, 14.0]);
    }

    #[test]
    fn nearest_upsample_2x() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(upsample_nearest(&x, 1, 2, 2, 4, 4)[..8], [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
