//! Strided/padded convolution and transposed convolution over 2D and 3D
//! feature maps. Both lower to column buffers and `sgemm`; the column
//! buffer is built for a bounded run of output rows at a time so memory
//! stays flat for large volumes.

use crate::graph::{Graph, Var};
use crate::tensor::{join_spatial, split_spatial, Tensor};

/// Target size (in floats) of one column buffer chunk.
const CHUNK_FLOATS: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn cube(k: usize, s: usize, p: usize) -> Self {
        Self { kernel: [k; 3], stride: [s; 3], pad: [p; 3] }
    }

    /// Planar geometry (unit depth kernel).
    pub fn square(k: usize, s: usize, p: usize) -> Self {
        Self { kernel: [1, k, k], stride: [1, s, s], pad: [0, p, p] }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Output extent of a convolution; `None` when the kernel does not fit.
    pub fn conv_out(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    /// Output extent of a transposed convolution.
    pub fn transpose_out(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.pad[a] {
                return None;
            }
            out[a] = full - 2 * self.pad[a];
        }
        Some(out)
    }
}

/// Geometry of one column lowering: the "big" grid is the convolution input,
/// the "small" grid the convolution output.
#[derive(Clone, Copy)]
struct Lowering {
    channels: usize,
    big: [usize; 3],
    small: [usize; 3],
    geom: ConvGeom,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.channels * self.geom.kernel_volume()
    }

    fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    /// Output-row runs (`(d, h)` pairs, each `small[2]` wide) per chunk.
    fn chunk_rows(&self) -> usize {
        let per_row = self.rows() * self.small[2];
        (CHUNK_FLOATS / per_row.max(1)).max(1)
    }

    /// Iterates `(first_row, row_count)` chunks over the `d*h` output rows.
    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let total = self.small[0] * self.small[1];
        let step = self.chunk_rows();
        (0..total).step_by(step).map(move |r| (r, step.min(total - r)))
    }

    /// Gathers `src` (one sample, `[C, big]`) into `cols` (`[rows, count*W_small]`).
    fn im2col(&self, src: &[f32], first_row: usize, count: usize, cols: &mut [f32]) {
        let [kd, kh, kw] = self.geom.kernel;
        let [sd, sh, sw] = self.geom.stride;
        let [pd, ph, pw] = self.geom.pad;
        let [bd, bh, bw] = self.big;
        let wo = self.small[2];
        let ho = self.small[1];
        let len = count * wo;
        debug_assert_eq!(cols.len(), self.rows() * len);
        let mut r = 0;
        for c in 0..self.channels {
            let plane = &src[c * self.big_len()..(c + 1) * self.big_len()];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let row = &mut cols[r * len..(r + 1) * len];
                        for j in 0..count {
                            let rr = first_row + j;
                            let (od, oh) = (rr / ho, rr % ho);
                            let id = (od * sd + a) as isize - pd as isize;
                            let ih = (oh * sh + b) as isize - ph as isize;
                            let dst = &mut row[j * wo..(j + 1) * wo];
                            if id < 0 || id >= bd as isize || ih < 0 || ih >= bh as isize {
                                dst.fill(0.0);
                                continue;
                            }
                            let line = &plane[(id as usize * bh + ih as usize) * bw..][..bw];
                            if sw == 1 {
                                let (lo, hi) = unit_stride_span(e, pw, bw, wo);
                                dst[..lo].fill(0.0);
                                dst[hi..].fill(0.0);
                                if lo < hi {
                                    let off = lo + e - pw;
                                    dst[lo..hi].copy_from_slice(&line[off..off + hi - lo]);
                                }
                                continue;
                            }
                            for (ow, d) in dst.iter_mut().enumerate() {
                                let iw = (ow * sw + e) as isize - pw as isize;
                                *d = if iw >= 0 && iw < bw as isize { line[iw as usize] } else { 0.0 };
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters-adds `cols` into `dst`.
    fn col2im(&self, cols: &[f32], first_row: usize, count: usize, dst: &mut [f32]) {
        let [kd, kh, kw] = self.geom.kernel;
        let [sd, sh, sw] = self.geom.stride;
        let [pd, ph, pw] = self.geom.pad;
        let [bd, bh, bw] = self.big;
        let wo = self.small[2];
        let ho = self.small[1];
        let len = count * wo;
        let mut r = 0;
        for c in 0..self.channels {
            let plane = &mut dst[c * self.big_len()..(c + 1) * self.big_len()];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let row = &cols[r * len..(r + 1) * len];
                        for j in 0..count {
                            let rr = first_row + j;
                            let (od, oh) = (rr / ho, rr % ho);
                            let id = (od * sd + a) as isize - pd as isize;
                            let ih = (oh * sh + b) as isize - ph as isize;
                            if id < 0 || id >= bd as isize || ih < 0 || ih >= bh as isize {
                                continue;
                            }
                            let line = &mut plane[(id as usize * bh + ih as usize) * bw..][..bw];
                            if sw == 1 {
                                let (lo, hi) = unit_stride_span(e, pw, bw, wo);
                                if lo < hi {
                                    let off = lo + e - pw;
                                    let src = &row[j * wo + lo..j * wo + hi];
                                    for (d, &v) in line[off..off + hi - lo].iter_mut().zip(src) {
                                        *d += v;
                                    }
                                }
                                continue;
                            }
                            for (ow, &v) in row[j * wo..(j + 1) * wo].iter().enumerate() {
                                let iw = (ow * sw + e) as isize - pw as isize;
                                if iw >= 0 && iw < bw as isize {
                                    line[iw as usize] += v;
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose unit-stride tap `e` lands inside a row
/// of `bw` inputs (input index `ow + e - pw`).
fn unit_stride_span(e: usize, pw: usize, bw: usize, wo: usize) -> (usize, usize) {
    let lo = pw.saturating_sub(e).min(wo);
    let hi = (bw + pw).saturating_sub(e).min(wo).max(lo);
    (lo, hi)
}

/// `C[m x n] = alpha * A[m x k] * B[k x n] + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds for the strided views.
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the strided views above lie inside their slices and `c` does
    // not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Raw forward convolution of one sample. `w` is `[Co, Ci*K]`.
fn conv_sample(low: &Lowering, x: &[f32], w: &[f32], co: usize, out: &mut [f32]) {
    let rows = low.rows();
    let p = low.small_len();
    if low.geom.is_pointwise() {
        gemm(co, rows, p, w, rows, 1, x, p, 1, 0.0, out, p);
        return;
    }
    let wo = low.small[2];
    let mut cols = Vec::new();
    for (r0, count) in low.chunks() {
        let len = count * wo;
        cols.resize(rows * len, 0.0);
        low.im2col(x, r0, count, &mut cols);
        gemm(co, rows, len, w, rows, 1, &cols, len, 1, 0.0, &mut out[r0 * wo..], p);
    }
}

/// Gradients of a forward convolution for one sample.
#[allow(clippy::too_many_arguments)]
fn conv_sample_backward(
    low: &Lowering,
    x: &[f32],
    w: &[f32],
    co: usize,
    gout: &[f32],
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
) {
    let rows = low.rows();
    let p = low.small_len();
    if low.geom.is_pointwise() {
        if let Some(dw) = dw {
            gemm(co, p, rows, gout, p, 1, x, 1, p, 1.0, dw, rows);
        }
        if let Some(dx) = dx {
            gemm(rows, co, p, w, 1, rows, gout, p, 1, 1.0, dx, p);
        }
        return;
    }
    let wo = low.small[2];
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let mut dx = dx;
    let mut dw = dw;
    for (r0, count) in low.chunks() {
        let len = count * wo;
        let g = &gout[r0 * wo..];
        if let Some(dw) = dw.as_deref_mut() {
            cols.resize(rows * len, 0.0);
            low.im2col(x, r0, count, &mut cols);
            // dW[co, r] += sum_l g[co, l] * cols[r, l]
            gemm(co, len, rows, g, p, 1, &cols, 1, len, 1.0, dw, rows);
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.resize(rows * len, 0.0);
            // dcols[r, l] = sum_co w[co, r] * g[co, l]
            gemm(rows, co, len, w, 1, rows, g, p, 1, 0.0, &mut dcols, len);
            low.col2im(&dcols, r0, count, dx);
        }
    }
}

fn add_bias(out: &mut [f32], bias: &[f32], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad(g: &Tensor, channels: usize) -> Tensor {
    let (n, per) = g.batch_split();
    let plane = per / channels;
    let mut db = vec![0.0f32; channels];
    for s in 0..n {
        for (c, acc) in db.iter_mut().enumerate() {
            let base = s * per + c * plane;
            *acc += g.data()[base..base + plane].iter().sum::<f32>();
        }
    }
    Tensor::new(vec![channels], db)
}

impl Graph {
    /// Convolution. `w` is `[Co, Ci, kd, kh, kw]` (or `[Co, Ci, kh, kw]` for
    /// planar inputs, with `geom.kernel[0] == 1`).
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (n, ci, big) = split_spatial(self.shape(x));
        let volumetric = self.shape(x).len() == 5;
        let co = self.shape(w)[0];
        assert_eq!(self.value(w).len(), co * ci * geom.kernel_volume(), "conv weight shape");
        let small = geom
            .conv_out(big)
            .unwrap_or_else(|| panic!("kernel {:?} does not fit input {big:?}", geom.kernel));
        let low = Lowering { channels: ci, big, small, geom };
        let (in_per, out_per) = (ci * low.big_len(), co * low.small_len());
        let mut out = vec![0.0f32; n * out_per];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                conv_sample(&low, &xv[s * in_per..][..in_per], wv, co, &mut out[s * out_per..][..out_per]);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    add_bias(&mut out[s * out_per..][..out_per], bv, low.small_len());
                }
            }
        }
        let out = Tensor::new(join_spatial(n, co, small, volumetric), out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.op(out, &parents, move |ctx| {
            let (xv, wv) = (ctx.inputs[0], ctx.inputs[1]);
            let mut dx = ctx.needs[0].then(|| vec![0.0f32; xv.len()]);
            let mut dw = ctx.needs[1].then(|| vec![0.0f32; wv.len()]);
            for s in 0..n {
                conv_sample_backward(
                    &low,
                    &xv.data()[s * in_per..][..in_per],
                    wv.data(),
                    co,
                    &ctx.grad.data()[s * out_per..][..out_per],
                    dx.as_mut().map(|d| &mut d[s * in_per..][..in_per]),
                    dw.as_deref_mut(),
                );
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(xv.shape().to_vec(), d)),
                dw.map(|d| Tensor::new(wv.shape().to_vec(), d)),
            ];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| bias_grad(ctx.grad, co)));
            }
            grads
        })
    }

    /// Transposed convolution. `w` is `[Ci, Co, kd, kh, kw]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (n, ci, small) = split_spatial(self.shape(x));
        let volumetric = self.shape(x).len() == 5;
        let co = self.shape(w)[1];
        assert_eq!(self.shape(w)[0], ci, "transposed conv weight shape");
        assert_eq!(self.value(w).len(), ci * co * geom.kernel_volume());
        let big = geom.transpose_out(small).expect("transposed conv output would be empty");
        let low = Lowering { channels: co, big, small, geom };
        let rows = low.rows();
        let (in_per, out_per) = (ci * low.small_len(), co * low.big_len());
        let p_small = low.small_len();
        let wo = small[2];
        let mut out = vec![0.0f32; n * out_per];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut cols = Vec::new();
            for s in 0..n {
                let xs = &xv[s * in_per..][..in_per];
                let os = &mut out[s * out_per..][..out_per];
                for (r0, count) in low.chunks() {
                    let len = count * wo;
                    cols.resize(rows * len, 0.0);
                    // cols[r, l] = sum_ci w[ci, r] * x[ci, l]
                    gemm(rows, ci, len, wv, 1, rows, &xs[r0 * wo..], p_small, 1, 0.0, &mut cols, len);
                    low.col2im(&cols, r0, count, os);
                }
                if let Some(b) = b {
                    add_bias(os, self.value(b).data(), low.big_len());
                }
            }
        }
        let out = Tensor::new(join_spatial(n, co, big, volumetric), out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.op(out, &parents, move |ctx| {
            let (xv, wv) = (ctx.inputs[0], ctx.inputs[1]);
            let mut dx = ctx.needs[0].then(|| vec![0.0f32; xv.len()]);
            let mut dw = ctx.needs[1].then(|| vec![0.0f32; wv.len()]);
            let mut cols = Vec::new();
            for s in 0..n {
                let gs = &ctx.grad.data()[s * out_per..][..out_per];
                let xs = &xv.data()[s * in_per..][..in_per];
                for (r0, count) in low.chunks() {
                    let len = count * wo;
                    cols.resize(rows * len, 0.0);
                    low.im2col(gs, r0, count, &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        // dx[ci, l] = sum_r w[ci, r] * cols[r, l]
                        let dxs = &mut dx[s * in_per + r0 * wo..];
                        gemm(ci, rows, len, wv.data(), rows, 1, &cols, len, 1, 0.0, dxs, p_small);
                    }
                    if let Some(dw) = dw.as_mut() {
                        // dw[ci, r] += sum_l x[ci, l] * cols[r, l]
                        gemm(ci, len, rows, &xs[r0 * wo..], p_small, 1, &cols, 1, len, 1.0, dw, rows);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(xv.shape().to_vec(), d)),
                dw.map(|d| Tensor::new(wv.shape().to_vec(), d)),
            ];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| bias_grad(ctx.grad, co)));
            }
            grads
        })
    }
}
