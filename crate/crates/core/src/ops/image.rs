//! Image-space descriptors: Sobel gradient magnitude, local variance,
//! half-pixel bilinear upsampling and channel reductions.
//!
//! Border handling for the Sobel and variance maps is replicate padding.

use crate::tensor::Scalar;

/// Added under the square root so the magnitude is differentiable on flat
/// regions.
pub const SOBEL_EPS: f64 = 1e-8;

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamp_idx(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Returns `(magnitude, gx, gy)` for every plane of a `[planes, h, w]` buffer.
pub fn sobel_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = x.len();
    let mut mag = vec![T::zero(); n];
    let mut gx = vec![T::zero(); n];
    let mut gy = vec![T::zero(); n];
    let eps = T::lit(SOBEL_EPS);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut sx = T::zero();
                let mut sy = T::zero();
                for (ky, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                    let iy = clamp_idx(y as isize + ky as isize - 1, h);
                    for kx in 0..3 {
                        let ix = clamp_idx(xx as isize + kx as isize - 1, w);
                        let v = x[base + iy * w + ix];
                        sx += T::lit(rx[kx]) * v;
                        sy += T::lit(ry[kx]) * v;
                    }
                }
                let i = base + y * w + xx;
                gx[i] = sx;
                gy[i] = sy;
                mag[i] = (sx * sx + sy * sy + eps).sqrt();
            }
        }
    }
    (mag, gx, gy)
}

#[allow(clippy::too_many_arguments)]
pub fn sobel_backward<T: Scalar>(
    mag: &[T],
    gx: &[T],
    gy: &[T],
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    dx: &mut [T],
) {
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                let i = base + y * w + xx;
                let ax = dy[i] * gx[i] / mag[i];
                let ay = dy[i] * gy[i] / mag[i];
                for ky in 0..3 {
                    let iy = clamp_idx(y as isize + ky as isize - 1, h);
                    for kx in 0..3 {
                        let ix = clamp_idx(xx as isize + kx as isize - 1, w);
                        dx[base + iy * w + ix] +=
                            ax * T::lit(SOBEL_X[ky][kx]) + ay * T::lit(SOBEL_Y[ky][kx]);
                    }
                }
            }
        }
    }
}

/// Sliding-window variance `E[x^2] - E[x]^2` clamped at zero. Returns the
/// output and the per-pixel window means (needed by the backward pass).
pub fn local_variance_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<T>, Vec<T>) {
    let r = (window / 2) as isize;
    let count = T::lit((window * window) as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut means = vec![T::zero(); x.len()];
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut s = T::zero();
                let mut s2 = T::zero();
                for dy in -r..=r {
                    let iy = clamp_idx(y as isize + dy, h);
                    for dx in -r..=r {
                        let v = x[base + iy * w + clamp_idx(xx as isize + dx, w)];
                        s += v;
                        s2 += v * v;
                    }
                }
                let m = s / count;
                let i = base + y * w + xx;
                means[i] = m;
                out[i] = (s2 / count - m * m).max(T::zero());
            }
        }
    }
    (out, means)
}

#[allow(clippy::too_many_arguments)]
pub fn local_variance_backward<T: Scalar>(
    x: &[T],
    out: &[T],
    means: &[T],
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    dx: &mut [T],
) {
    let r = (window / 2) as isize;
    let scale = T::lit(2.0 / (window * window) as f64);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                let i = base + y * w + xx;
                if out[i] <= T::zero() {
                    continue;
                }
                let g = dy[i] * scale;
                for oy in -r..=r {
                    let iy = clamp_idx(y as isize + oy, h);
                    for ox in -r..=r {
                        let j = base + iy * w + clamp_idx(xx as isize + ox, w);
                        dx[j] += g * (x[j] - means[i]);
                    }
                }
            }
        }
    }
}

/// Source taps for half-pixel bilinear resampling along one axis:
/// `(lo, hi, weight_of_hi)` for every output coordinate.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample_bilinear_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for &(y0, y1, ly) in &ty {
            let ly = T::lit(ly);
            for &(x0, x1, lx) in &tx {
                let lx = T::lit(lx);
                let top = x[base + y0 * w + x0] * (T::one() - lx) + x[base + y0 * w + x1] * lx;
                let bot = x[base + y1 * w + x0] * (T::one() - lx) + x[base + y1 * w + x1] * lx;
                out.push(top * (T::one() - ly) + bot * ly);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn upsample_bilinear_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut k = 0;
    for p in 0..planes {
        let base = p * h * w;
        for &(y0, y1, ly) in &ty {
            let ly = T::lit(ly);
            for &(x0, x1, lx) in &tx {
                let lx = T::lit(lx);
                let g = dy[k];
                k += 1;
                dx[base + y0 * w + x0] += g * (T::one() - ly) * (T::one() - lx);
                dx[base + y0 * w + x1] += g * (T::one() - ly) * lx;
                dx[base + y1 * w + x0] += g * ly * (T::one() - lx);
                dx[base + y1 * w + x1] += g * ly * lx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_pixel_row() {
        let y = upsample_bilinear_forward(&[0.0f64, 1.0], 1, 1, 2, 1, 4);
        assert_eq!(y, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn identity_scale_reproduces_input() {
        let x: Vec<f64> = (0..12).map(|v| v as f64 * 0.3).collect();
        assert_eq!(upsample_bilinear_forward(&x, 1, 3, 4, 3, 4), x);
    }

    #[test]
    fn checkerboard_variance() {
        let x: Vec<f64> = (0..25).map(|i| ((i / 5 + i % 5) % 2) as f64).collect();
        let (v, _) = local_variance_forward(&x, 1, 5, 5, 3);
        assert!((v[2 * 5 + 2] - 20.0 / 81.0).abs() < 1e-12);
        assert!((v[5 + 2] - 20.0 / 81.0).abs() < 1e-12);
    }

    #[test]
    fn sobel_flat_and_step() {
        let flat = vec![0.7f64; 36];
        let (m, _, _) = sobel_forward(&flat, 1, 6, 6);
        assert!(m.iter().all(|&v| v <= SOBEL_EPS.sqrt() + 1e-15));
        // columns 0..3 zero, 3..6 one: edge between columns 2 and 3
        let step: Vec<f64> = (0..36).map(|i| if i % 6 >= 3 { 1.0 } else { 0.0 }).collect();
        let (m, gx, _) = sobel_forward(&step, 1, 6, 6);
        for y in 0..6 {
            assert!(m[y * 6] < 1e-3 && m[y * 6 + 5] < 1e-3);
            assert!((gx[y * 6 + 2] - 4.0).abs() < 1e-12);
            assert!((gx[y * 6 + 3] - 4.0).abs() < 1e-12);
        }
    }
}
