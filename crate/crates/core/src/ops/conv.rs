//! Convolution and pooling kernels on NCHW buffers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Scalar;

/// Hyperparameters of a 2-D convolution with a square kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, no dilation, "same" padding for an odd kernel.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "ConvSpec";
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(invalid(OP, format!("kernel must be odd and positive, got {}", self.kernel)));
        }
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(invalid(OP, "stride, dilation and groups must be >= 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid(OP, "channel counts must be >= 1"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(invalid(
                OP,
                format!(
                    "channels ({} -> {}) not divisible by groups {}",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        Ok(())
    }

    /// Output extent along one spatial axis; errors when it would be < 1.
    pub fn out_size(&self, input: usize, axis: &str) -> Result<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(shape_err(
                "conv2d",
                axis,
                format!(">= {}", span.saturating_sub(2 * self.padding)),
                input,
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }
}

struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    g: &Geometry,
    spec: &ConvSpec,
    cols: &mut [T],
) {
    let k = spec.kernel;
    let p = spec.padding as isize;
    let s = spec.stride as isize;
    let d = spec.dilation as isize;
    let plane = g.oh * g.ow;
    for ci in 0..c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize * d - p;
                let dx = kx as isize * d - p;
                for oy in 0..g.oh {
                    let iy = oy as isize * s + dy;
                    let orow = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        orow.fill(T::zero());
                        continue;
                    }
                    let xrow = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        let ix = ox as isize * s + dx;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, g: &Geometry, spec: &ConvSpec, dx: &mut [T]) {
    let k = spec.kernel;
    let p = spec.padding as isize;
    let s = spec.stride as isize;
    let d = spec.dilation as isize;
    let plane = g.oh * g.ow;
    for ci in 0..c {
        let xc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize * d - p;
                let dxo = kx as isize * d - p;
                for oy in 0..g.oh {
                    let iy = oy as isize * s + dy;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = ox as isize * s + dxo;
                        if ix >= 0 && ix < g.w as isize {
                            xc[base + ix as usize] += col[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output shape of `conv2d` for an NCHW input, validating every axis.
pub fn conv2d_out_shape(x_shape: &[usize], w_shape: &[usize], spec: &ConvSpec) -> Result<[usize; 4]> {
    spec.validate()?;
    if x_shape.len() != 4 {
        return Err(shape_err("conv2d", "rank", 4, x_shape.len()));
    }
    if x_shape[1] != spec.in_channels {
        return Err(shape_err("conv2d", "input channels (axis 1)", spec.in_channels, x_shape[1]));
    }
    let ws = spec.weight_shape();
    if w_shape != ws {
        return Err(shape_err("conv2d", "weight shape", format!("{ws:?}"), format!("{w_shape:?}")));
    }
    let oh = spec.out_size(x_shape[2], "height (axis 2)")?;
    let ow = spec.out_size(x_shape[3], "width (axis 3)")?;
    Ok([x_shape[0], spec.out_channels, oh, ow])
}

/// Cross-correlation forward pass. `bias` has `out_channels` entries.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    x_shape: [usize; 4],
    w: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
    out_shape: [usize; 4],
) -> Vec<T> {
    let [b, c, h, wd] = x_shape;
    let [_, co, oh, ow] = out_shape;
    let g = Geometry { h, w: wd, oh, ow };
    let groups = spec.groups;
    let cig = c / groups;
    let cog = co / groups;
    let kk = spec.kernel * spec.kernel;
    let plane = oh * ow;
    let mut out = vec![T::zero(); b * co * plane];
    let mut cols = vec![T::zero(); cig * kk * plane];
    for n in 0..b {
        for gi in 0..groups {
            let xs = &x[(n * c + gi * cig) * h * wd..(n * c + (gi + 1) * cig) * h * wd];
            let ys = &mut out[(n * co + gi * cog) * plane..(n * co + (gi + 1) * cog) * plane];
            let wg = &w[gi * cog * cig * kk..(gi + 1) * cog * cig * kk];
            if spec.kernel == 1 && spec.stride == 1 && spec.padding == 0 {
                T::gemm(false, false, cog, plane, cig, T::one(), wg, xs, T::zero(), ys);
            } else {
                im2col(xs, cig, &g, spec, &mut cols);
                T::gemm(false, false, cog, plane, cig * kk, T::one(), wg, &cols, T::zero(), ys);
            }
        }
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                for v in &mut out[(n * co + oc) * plane..(n * co + oc + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d` with respect to input, weight and bias; each output
/// buffer is accumulated into when present.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    x_shape: [usize; 4],
    w: &[T],
    spec: &ConvSpec,
    out_shape: [usize; 4],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let [b, c, h, wd] = x_shape;
    let [_, co, oh, ow] = out_shape;
    let g = Geometry { h, w: wd, oh, ow };
    let groups = spec.groups;
    let cig = c / groups;
    let cog = co / groups;
    let kk = spec.kernel * spec.kernel;
    let plane = oh * ow;
    let pointwise = spec.kernel == 1 && spec.stride == 1 && spec.padding == 0;

    if let Some(db) = db {
        for n in 0..b {
            for oc in 0..co {
                db[oc] += dy[(n * co + oc) * plane..(n * co + oc + 1) * plane].iter().copied().sum();
            }
        }
    }
    let mut cols = vec![T::zero(); cig * kk * plane];
    if let Some(dw) = dw {
        for n in 0..b {
            for gi in 0..groups {
                let xs = &x[(n * c + gi * cig) * h * wd..(n * c + (gi + 1) * cig) * h * wd];
                let dys = &dy[(n * co + gi * cog) * plane..(n * co + (gi + 1) * cog) * plane];
                let dwg = &mut dw[gi * cog * cig * kk..(gi + 1) * cog * cig * kk];
                if pointwise {
                    T::gemm(false, true, cog, cig, plane, T::one(), dys, xs, T::one(), dwg);
                } else {
                    im2col(xs, cig, &g, spec, &mut cols);
                    T::gemm(false, true, cog, cig * kk, plane, T::one(), dys, &cols, T::one(), dwg);
                }
            }
        }
    }
    if let Some(dx) = dx {
        for n in 0..b {
            for gi in 0..groups {
                let dys = &dy[(n * co + gi * cog) * plane..(n * co + (gi + 1) * cog) * plane];
                let wg = &w[gi * cog * cig * kk..(gi + 1) * cog * cig * kk];
                let dxs = &mut dx[(n * c + gi * cig) * h * wd..(n * c + (gi + 1) * cig) * h * wd];
                if pointwise {
                    T::gemm(true, false, cig, plane, cog, T::one(), wg, dys, T::one(), dxs);
                } else {
                    T::gemm(true, false, cig * kk, plane, cog, T::one(), wg, dys, T::zero(), &mut cols);
                    col2im(&cols, cig, &g, spec, dxs);
                }
            }
        }
    }
}

/// Window-wise maximum without padding. Returns the output and, for every
/// output element, the flat input index that produced it.
pub fn max_pool2d_forward<T: Scalar>(
    x: &[T],
    shape: [usize; 4],
    kernel: usize,
    stride: usize,
) -> Result<(Vec<T>, Vec<usize>, [usize; 4])> {
    let [b, c, h, w] = shape;
    if kernel == 0 || stride == 0 {
        return Err(invalid("max_pool2d", "kernel and stride must be >= 1"));
    }
    if h < kernel {
        return Err(shape_err("max_pool2d", "height (axis 2)", format!(">= {kernel}"), h));
    }
    if w < kernel {
        return Err(shape_err("max_pool2d", "width (axis 3)", format!(">= {kernel}"), w));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                let mut bv = x[best];
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..kernel {
                        if x[row + kx] > bv {
                            bv = x[row + kx];
                            best = row + kx;
                        }
                    }
                }
                out.push(bv);
                arg.push(best);
            }
        }
    }
    Ok((out, arg, [b, c, oh, ow]))
}

/// Adaptive average pooling with the usual floor/ceil bin edges. Output bins
/// may overlap or repeat input cells when the output is larger than the input.
pub fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end.max(start + 1))
        })
        .collect()
}

pub fn adaptive_avg_pool_forward<T: Scalar>(
    x: &[T],
    shape: [usize; 4],
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let [b, c, h, w] = shape;
    let by = adaptive_bins(h, out_h);
    let bx = adaptive_bins(w, out_w);
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in 0..b * c {
        let base = plane * h * w;
        for &(y0, y1) in &by {
            for &(x0, x1) in &bx {
                let mut acc = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += x[base + y * w + xx];
                    }
                }
                out.push(acc / T::lit(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<T: Scalar>(
    dy: &[T],
    shape: [usize; 4],
    out_h: usize,
    out_w: usize,
    dx: &mut [T],
) {
    let [b, c, h, w] = shape;
    let by = adaptive_bins(h, out_h);
    let bx = adaptive_bins(w, out_w);
    let mut k = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for &(y0, y1) in &by {
            for &(x0, x1) in &bx {
                let g = dy[k] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                k += 1;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dx[base + y * w + xx] += g;
                    }
                }
            }
        }
    }
}

/// Depthwise convolution with a distinct `kxk` kernel per (sample, channel),
/// stride 1 and zero "same" padding. `kernels` is `[b, c, k, k]`.
pub fn dynamic_depthwise_forward<T: Scalar>(
    x: &[T],
    shape: [usize; 4],
    kernels: &[T],
    k: usize,
) -> Vec<T> {
    let [b, c, h, w] = shape;
    let r = (k / 2) as isize;
    let mut out = vec![T::zero(); x.len()];
    for plane in 0..b * c {
        let xs = &x[plane * h * w..(plane + 1) * h * w];
        let ks = &kernels[plane * k * k..(plane + 1) * k * k];
        let ys = &mut out[plane * h * w..(plane + 1) * h * w];
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let dx = kx as isize - r;
                let kv = ks[ky * k + kx];
                for y in 0..h {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xs[iy as usize * w..(iy as usize + 1) * w];
                    let yrow = &mut ys[y * w..(y + 1) * w];
                    let lo = (-dx).max(0) as usize;
                    let hi = (w as isize - dx.max(0)) as usize;
                    for xx in lo..hi {
                        yrow[xx] += kv * xrow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn dynamic_depthwise_backward<T: Scalar>(
    x: &[T],
    shape: [usize; 4],
    kernels: &[T],
    k: usize,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
) {
    let [b, c, h, w] = shape;
    let r = (k / 2) as isize;
    for plane in 0..b * c {
        let xs = &x[plane * h * w..(plane + 1) * h * w];
        let gs = &dy[plane * h * w..(plane + 1) * h * w];
        for ky in 0..k {
            let oy = ky as isize - r;
            for kx in 0..k {
                let ox = kx as isize - r;
                let kv = kernels[plane * k * k + ky * k + kx];
                let mut kacc = T::zero();
                let lo = (-ox).max(0) as usize;
                let hi = (w as isize - ox.max(0)) as usize;
                for y in 0..h {
                    let iy = y as isize + oy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = iy as usize * w;
                    for xx in lo..hi {
                        let src = irow + (xx as isize + ox) as usize;
                        let g = gs[y * w + xx];
                        kacc += g * xs[src];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[plane * h * w + src] += g * kv;
                        }
                    }
                }
                if let Some(dk) = dk.as_deref_mut() {
                    dk[plane * k * k + ky * k + kx] += kacc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_counts_window_cells() {
        let spec = ConvSpec::same(1, 1, 3);
        let x = vec![1.0f64; 9];
        let w = vec![1.0f64; 9];
        let shape = conv2d_out_shape(&[1, 1, 3, 3], &[1, 1, 3, 3], &spec).unwrap();
        let y = conv2d_forward(&x, [1, 1, 3, 3], &w, None, &spec, shape);
        assert_eq!(y[4], 9.0);
        assert_eq!(y[0], 4.0);
        assert_eq!(y[1], 6.0);
    }

    #[test]
    fn spec_rejects_bad_values() {
        assert!(ConvSpec::same(3, 8, 2).validate().is_err());
        assert!(ConvSpec::same(3, 8, 3).with_groups(2).validate().is_err());
        assert!(ConvSpec::same(4, 8, 3).with_groups(2).validate().is_ok());
        let s = ConvSpec::same(1, 1, 3).with_padding(0);
        assert!(s.out_size(2, "h").is_err());
        assert_eq!(s.out_size(3, "h").unwrap(), 1);
    }

    #[test]
    fn output_size_formula() {
        let s = ConvSpec::same(1, 1, 3).with_stride(2).with_padding(1);
        assert_eq!(s.out_size(224, "h").unwrap(), 112);
        let d = ConvSpec::same(1, 1, 3).with_dilation(2).with_padding(2);
        assert_eq!(d.out_size(17, "h").unwrap(), 17);
    }

    #[test]
    fn weight_shape_mismatch_names_axis() {
        let spec = ConvSpec::same(3, 8, 3);
        let err = conv2d_out_shape(&[1, 4, 8, 8], &[8, 3, 3, 3], &spec).unwrap_err();
        assert!(err.to_string().contains("input channels"));
    }

    #[test]
    fn adaptive_bins_cover_input() {
        assert_eq!(adaptive_bins(4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(adaptive_bins(2, 4), vec![(0, 1), (0, 1), (1, 2), (1, 2)]);
        assert_eq!(adaptive_bins(7, 7), (0..7).map(|i| (i, i + 1)).collect::<Vec<_>>());
    }

    #[test]
    fn pool_window_max() {
        let (y, arg, s) = max_pool2d_forward(&[1.0f32, 2.0, 3.0, 4.0], [1, 1, 2, 2], 2, 2).unwrap();
        assert_eq!(y, vec![4.0]);
        assert_eq!(arg, vec![3]);
        assert_eq!(s, [1, 1, 1, 1]);
        assert!(max_pool2d_forward(&[1.0f32], [1, 1, 1, 1], 2, 2).is_err());
    }
}
