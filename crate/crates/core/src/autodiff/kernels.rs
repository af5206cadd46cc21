//! Numeric kernels behind the graph ops. All convolutions are single-sample,
//! channel-major (`[C, H, W]`) cross-correlations with symmetric zero padding.

use std::ops::Range;

/// Stride, dilation and padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    /// Output positions `o` for which `o * stride + offset - padding` lands in `0..input`.
    fn valid_outputs(&self, offset: usize, input: usize, output: usize) -> Range<usize> {
        let s = self.stride as isize;
        let shift = offset as isize - self.padding as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // largest o with o*s + shift <= input - 1
        let top = input as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { (top / s + 1).min(output as isize) };
        let lo = lo.min(hi);
        lo as usize..hi as usize
    }
}

pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// out[co, oy, ox] = sum_{ci, ky, kx} w[co, ci, ky, kx] * x[ci, oy*s + ky*d - p, ox*s + kx*d - p]
pub fn conv2d(x: &[f64], w: &[f64], g: ConvGeometry, dims: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; dims.c_out * dims.out_h * dims.out_w];
    for_each_tap(g, dims, |co, ci, wi, iy, oys, oxs, ix0| {
        let wv = w[wi];
        let x_plane = &x[ci * dims.in_h * dims.in_w..];
        let o_plane = &mut out[co * dims.out_h * dims.out_w..];
        for (oy, iy) in oys.clone().zip(iy) {
            let xrow = &x_plane[iy * dims.in_w..];
            let orow = &mut o_plane[oy * dims.out_w..];
            for ox in oxs.clone() {
                orow[ox] += wv * xrow[ox * g.stride + ix0 - g.padding];
            }
        }
    });
    out
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(gout: &[f64], w: &[f64], g: ConvGeometry, dims: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; dims.c_in * dims.in_h * dims.in_w];
    for_each_tap(g, dims, |co, ci, wi, iy, oys, oxs, ix0| {
        let wv = w[wi];
        let g_plane = &gout[co * dims.out_h * dims.out_w..];
        let x_plane = &mut out[ci * dims.in_h * dims.in_w..];
        for (oy, iy) in oys.clone().zip(iy) {
            let grow = &g_plane[oy * dims.out_w..];
            let xrow = &mut x_plane[iy * dims.in_w..];
            for ox in oxs.clone() {
                xrow[ox * g.stride + ix0 - g.padding] += wv * grow[ox];
            }
        }
    });
    out
}

/// Adjoint of [`conv2d`] with respect to its weights.
pub fn conv2d_weight_grad(x: &[f64], gout: &[f64], g: ConvGeometry, dims: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; dims.c_out * dims.c_in * dims.kernel * dims.kernel];
    for_each_tap(g, dims, |co, ci, wi, iy, oys, oxs, ix0| {
        let g_plane = &gout[co * dims.out_h * dims.out_w..];
        let x_plane = &x[ci * dims.in_h * dims.in_w..];
        let mut acc = 0.0;
        for (oy, iy) in oys.clone().zip(iy) {
            let grow = &g_plane[oy * dims.out_w..];
            let xrow = &x_plane[iy * dims.in_w..];
            for ox in oxs.clone() {
                acc += grow[ox] * xrow[ox * g.stride + ix0 - g.padding];
            }
        }
        out[wi] += acc;
    });
    out
}

/// Visits every (co, ci, ky, kx) tap with the ranges of output rows/cols that
/// read inside the input. `ix0 = kx * dilation`; the input column for output
/// column `ox` is `ox * stride + ix0 - padding`.
fn for_each_tap(
    g: ConvGeometry,
    dims: &ConvDims,
    mut f: impl FnMut(usize, usize, usize, std::iter::StepBy<Range<usize>>, &Range<usize>, &Range<usize>, usize),
) {
    let k = dims.kernel;
    for co in 0..dims.c_out {
        for ci in 0..dims.c_in {
            for ky in 0..k {
                let oys = g.valid_outputs(ky * g.dilation, dims.in_h, dims.out_h);
                if oys.is_empty() {
                    continue;
                }
                let iy_start = oys.start * g.stride + ky * g.dilation - g.padding;
                let iys = (iy_start..dims.in_h).step_by(g.stride);
                for kx in 0..k {
                    let oxs = g.valid_outputs(kx * g.dilation, dims.in_w, dims.out_w);
                    if oxs.is_empty() {
                        continue;
                    }
                    let wi = ((co * dims.c_in + ci) * k + ky) * k + kx;
                    f(co, ci, wi, iys.clone(), &oys, &oxs, kx * g.dilation);
                }
            }
        }
    }
}

/// `[m, k] x [k, n] -> [m, n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
