//! Slice-level compute kernels shared by the pure tensor API and the tape.
//!
//! Dense convolutions are im2col plus a blocked GEMM. Single-channel groups
//! (depthwise) run each kernel tap as one contiguous AXPY over a zero-padded
//! plane. Strided single-channel convolutions fall back to direct loops.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape};

#[inline]
pub(crate) fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent partial sums so the reduction
/// vectorises; the summation order is fixed, so results are deterministic.
#[inline]
pub(crate) fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for i in 0..8 {
            acc[i] += a[i] * b[i];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: Shape,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if k == 0 || stride == 0 || groups == 0 {
            return Err(Error::Parameter(format!(
                "kernel size, stride and groups must be positive (k={k}, stride={stride}, groups={groups})"
            )));
        }
        if input.c % groups != 0 {
            return Err(Error::dim("channels", groups * (input.c / groups).max(1), input.c));
        }
        if cout % groups != 0 {
            return Err(Error::dim("out channels", groups * (cout / groups).max(1), cout));
        }
        if input.h + 2 * pad < k {
            return Err(Error::dim("height", k, input.h + 2 * pad));
        }
        if input.w + 2 * pad < k {
            return Err(Error::dim("width", k, input.w + 2 * pad));
        }
        Ok(ConvGeom {
            cin: input.c,
            h: input.h,
            w: input.w,
            cout,
            k,
            stride,
            pad,
            groups,
            ho: (input.h + 2 * pad - k) / stride + 1,
            wo: (input.w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.cout, self.ho, self.wo)
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin_per_group() * self.k * self.k
    }

    #[inline]
    fn first_in_channel(&self, o: usize) -> usize {
        (o / (self.cout / self.groups)) * self.cin_per_group()
    }

    /// For stride 1: the output-column range whose input column
    /// `ox + kx - pad` lies inside the image, plus the first input column.
    #[inline]
    fn col_span(&self, kx: usize) -> Option<(usize, usize, usize)> {
        let lo = self.pad.saturating_sub(kx);
        let hi = self.wo.min((self.w + self.pad).saturating_sub(kx));
        (lo < hi).then(|| (lo, hi, lo + kx - self.pad))
    }

    #[inline]
    fn in_row(&self, o_row: usize, ky: usize) -> Option<usize> {
        let iy = (o_row * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    #[inline]
    fn in_col(&self, o_col: usize, kx: usize) -> Option<usize> {
        let ix = (o_col * self.stride + kx) as isize - self.pad as isize;
        (ix >= 0 && (ix as usize) < self.w).then_some(ix as usize)
    }
}

/// Read-only strided matrix: element `(r, c)` is `data[r * rs + c * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn cols(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c = a b + beta c` with `a` `m x k`, `b` `k x n` and `c` row-major
/// `m x n`. With `beta = 0` the prior contents of `c` are ignored.
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(extent(m, k, a.rs, a.cs) <= a.data.len(), "gemm: left operand out of bounds");
    assert!(extent(k, n, b.rs, b.cs) <= b.data.len(), "gemm: right operand out of bounds");
    assert!(m * n <= c.len(), "gemm: output out of bounds");
    let st = |rs: usize, cs: usize| (rs as isize, cs as isize);
    // SAFETY: the extents above bound every element the product touches, and
    // `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(m, k, n, a.data.as_ptr(), st(a.rs, a.cs), b.data.as_ptr(), st(b.rs, b.cs), beta, c.as_mut_ptr(), st(n, 1));
    }
}

impl ConvGeom {
    /// Convolutions with several input channels per group go through
    /// im2col + GEMM; the rest use direct plane kernels.
    fn use_gemm(&self) -> bool {
        self.cin_per_group() > 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds input channels `c0..c0 + cin_per_group` into a
    /// `(cg * k * k) x (ho * wo)` patch matrix.
    fn im2col<T: Real>(&self, x: &[T], c0: usize) -> Vec<T> {
        let (in_plane, out_plane) = (self.h * self.w, self.ho * self.wo);
        let cg = self.cin_per_group();
        let mut col = vec![T::zero(); cg * self.k * self.k * out_plane];
        for cl in 0..cg {
            let src = &x[(c0 + cl) * in_plane..(c0 + cl + 1) * in_plane];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let q = (cl * self.k + ky) * self.k + kx;
                    let dst = &mut col[q * out_plane..(q + 1) * out_plane];
                    for oy in 0..self.ho {
                        let Some(iy) = self.in_row(oy, ky) else { continue };
                        if self.stride == 1 {
                            if let Some((lo, hi, ix0)) = self.col_span(kx) {
                                dst[oy * self.wo + lo..oy * self.wo + hi]
                                    .copy_from_slice(&src[iy * self.w + ix0..iy * self.w + ix0 + hi - lo]);
                            }
                        } else {
                            for ox in 0..self.wo {
                                if let Some(ix) = self.in_col(ox, kx) {
                                    dst[oy * self.wo + ox] = src[iy * self.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of `im2col`: scatters patch gradients back onto the input.
    fn col2im<T: Real>(&self, col: &[T], c0: usize, gx: &mut [T]) {
        let (in_plane, out_plane) = (self.h * self.w, self.ho * self.wo);
        for cl in 0..self.cin_per_group() {
            let dst = &mut gx[(c0 + cl) * in_plane..(c0 + cl + 1) * in_plane];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let q = (cl * self.k + ky) * self.k + kx;
                    let src = &col[q * out_plane..(q + 1) * out_plane];
                    for oy in 0..self.ho {
                        let Some(iy) = self.in_row(oy, ky) else { continue };
                        if self.stride == 1 {
                            if let Some((lo, hi, ix0)) = self.col_span(kx) {
                                let d = &mut dst[iy * self.w + ix0..iy * self.w + ix0 + hi - lo];
                                for (a, &b) in d.iter_mut().zip(&src[oy * self.wo + lo..oy * self.wo + hi]) {
                                    *a += b;
                                }
                            }
                        } else {
                            for ox in 0..self.wo {
                                if let Some(ix) = self.in_col(ox, kx) {
                                    dst[iy * self.w + ix] += src[oy * self.wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Width of a zero-padded plane.
    fn padded_w(&self) -> usize {
        self.w + 2 * self.pad
    }

    /// Length of the run that covers every stride-1 output when output rows
    /// are laid out with the padded row pitch.
    fn padded_run(&self) -> usize {
        (self.ho - 1) * self.padded_w() + self.wo
    }

    fn pad_plane<T: Real>(&self, src: &[T], dst: &mut [T]) {
        let wp = self.padded_w();
        for y in 0..self.h {
            let off = (y + self.pad) * wp + self.pad;
            dst[off..off + self.w].copy_from_slice(&src[y * self.w..(y + 1) * self.w]);
        }
    }
}

pub(crate) fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    if !g.use_gemm() {
        return conv_forward_direct(g, x, w, bias, out);
    }
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let cg = g.cin_per_group();
    let q = cg * g.k * g.k;
    let og = g.cout / g.groups;
    for o in 0..g.cout {
        let b = bias.map_or(T::zero(), |b| b[o]);
        out[o * out_plane..(o + 1) * out_plane].iter_mut().for_each(|v| *v = b);
    }
    for grp in 0..g.groups {
        let c0 = grp * cg;
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            &x[c0 * in_plane..(c0 + cg) * in_plane]
        } else {
            owned = g.im2col(x, c0);
            &owned
        };
        let o0 = grp * og;
        gemm(
            og,
            q,
            out_plane,
            MatRef::rows(&w[o0 * q..(o0 + og) * q], q),
            MatRef::rows(cols, out_plane),
            T::one(),
            &mut out[o0 * out_plane..(o0 + og) * out_plane],
        );
    }
}

/// Accumulates input, weight and bias gradients for `conv_forward`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    if let Some(gb) = gb {
        for o in 0..g.cout {
            gb[o] += gout[o * out_plane..(o + 1) * out_plane].iter().copied().sum();
        }
    }
    if !g.use_gemm() {
        return conv_backward_direct(g, x, w, gout, gx, gw);
    }
    let cg = g.cin_per_group();
    let q = cg * g.k * g.k;
    let og = g.cout / g.groups;
    for grp in 0..g.groups {
        let (c0, o0) = (grp * cg, grp * og);
        let go = &gout[o0 * out_plane..(o0 + og) * out_plane];
        let wg = &w[o0 * q..(o0 + og) * q];
        if let Some(gw) = gw.as_deref_mut() {
            let owned;
            let cols: &[T] = if g.is_pointwise() {
                &x[c0 * in_plane..(c0 + cg) * in_plane]
            } else {
                owned = g.im2col(x, c0);
                &owned
            };
            // dW = dY cols^T
            gemm(
                og,
                out_plane,
                q,
                MatRef::rows(go, out_plane),
                MatRef::cols(cols, out_plane),
                T::one(),
                &mut gw[o0 * q..(o0 + og) * q],
            );
        }
        if let Some(gx) = gx.as_deref_mut() {
            // dcols = W^T dY
            let (wt, gy) = (MatRef::cols(wg, q), MatRef::rows(go, out_plane));
            if g.is_pointwise() {
                gemm(cg, og, out_plane, wt, gy, T::one(), &mut gx[c0 * in_plane..(c0 + cg) * in_plane]);
            } else {
                let mut gcol = vec![T::zero(); q * out_plane];
                gemm(q, og, out_plane, wt, gy, T::zero(), &mut gcol);
                g.col2im(&gcol, c0, gx);
            }
        }
    }
}

/// One input channel per group. Stride 1 runs each tap as a single AXPY
/// over a zero-padded plane; other strides use per-pixel loops.
fn conv_forward_direct<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let kk = g.k * g.k;
    if g.stride == 1 {
        let wp = g.padded_w();
        let run = g.padded_run();
        let mut padded = vec![T::zero(); (g.h + 2 * g.pad) * wp];
        let mut acc = vec![T::zero(); run];
        let mut loaded = None;
        for o in 0..g.cout {
            let ci = g.first_in_channel(o);
            if loaded != Some(ci) {
                g.pad_plane(&x[ci * in_plane..(ci + 1) * in_plane], &mut padded);
                loaded = Some(ci);
            }
            let wk = &w[o * kk..(o + 1) * kk];
            acc.iter_mut().for_each(|v| *v = bias.map_or(T::zero(), |b| b[o]));
            for ky in 0..g.k {
                for kx in 0..g.k {
                    axpy(wk[ky * g.k + kx], &padded[ky * wp + kx..ky * wp + kx + run], &mut acc);
                }
            }
            let dst = &mut out[o * out_plane..(o + 1) * out_plane];
            for oy in 0..g.ho {
                dst[oy * g.wo..(oy + 1) * g.wo].copy_from_slice(&acc[oy * wp..oy * wp + g.wo]);
            }
        }
        return;
    }
    for o in 0..g.cout {
        let dst = &mut out[o * out_plane..(o + 1) * out_plane];
        let b = bias.map_or(T::zero(), |b| b[o]);
        dst.iter_mut().for_each(|v| *v = b);
        let src = &x[g.first_in_channel(o) * in_plane..][..in_plane];
        let wk = &w[o * kk..(o + 1) * kk];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let wv = wk[ky * g.k + kx];
                for oy in 0..g.ho {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for ox in 0..g.wo {
                        if let Some(ix) = g.in_col(ox, kx) {
                            dst[oy * g.wo + ox] += wv * src[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_direct<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let kk = g.k * g.k;
    if g.stride == 1 {
        let wp = g.padded_w();
        let pp = (g.h + 2 * g.pad) * wp;
        let run = g.padded_run();
        let mut padded = vec![T::zero(); pp];
        let mut loaded = None;
        // Output gradients laid out with the padded pitch; the gap columns
        // stay zero so they add nothing to the weight dot products.
        let mut gp = vec![T::zero(); run];
        let mut gxp = vec![T::zero(); pp];
        for o in 0..g.cout {
            let ci = g.first_in_channel(o);
            let go = &gout[o * out_plane..(o + 1) * out_plane];
            for oy in 0..g.ho {
                gp[oy * wp..oy * wp + g.wo].copy_from_slice(&go[oy * g.wo..(oy + 1) * g.wo]);
            }
            let wk = &w[o * kk..(o + 1) * kk];
            if let Some(gw) = gw.as_deref_mut() {
                if loaded != Some(ci) {
                    g.pad_plane(&x[ci * in_plane..(ci + 1) * in_plane], &mut padded);
                    loaded = Some(ci);
                }
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        gw[o * kk + ky * g.k + kx] += dot(&gp, &padded[ky * wp + kx..ky * wp + kx + run]);
                    }
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                gxp.iter_mut().for_each(|v| *v = T::zero());
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        axpy(wk[ky * g.k + kx], &gp, &mut gxp[ky * wp + kx..ky * wp + kx + run]);
                    }
                }
                let dst = &mut gx[ci * in_plane..(ci + 1) * in_plane];
                for y in 0..g.h {
                    let off = (y + g.pad) * wp + g.pad;
                    for (d, &v) in dst[y * g.w..(y + 1) * g.w].iter_mut().zip(&gxp[off..off + g.w]) {
                        *d += v;
                    }
                }
            }
        }
        return;
    }
    for o in 0..g.cout {
        let go = &gout[o * out_plane..(o + 1) * out_plane];
        let ci = g.first_in_channel(o);
        let src = &x[ci * in_plane..(ci + 1) * in_plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let widx = o * kk + ky * g.k + kx;
                let wv = w[widx];
                let mut wacc = T::zero();
                for oy in 0..g.ho {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for ox in 0..g.wo {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let gv = go[oy * g.wo + ox];
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[ci * in_plane + iy * g.w + ix] += wv * gv;
                        }
                        wacc += gv * src[iy * g.w + ix];
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[widx] += wacc;
                }
            }
        }
    }
}

pub(crate) fn softmax_channels<T: Real>(s: Shape, x: &[T], out: &mut [T]) {
    let p = s.plane();
    for i in 0..p {
        let mut m = T::neg_infinity();
        for c in 0..s.c {
            m = m.max(x[c * p + i]);
        }
        let mut z = T::zero();
        for c in 0..s.c {
            let e = (x[c * p + i] - m).exp();
            out[c * p + i] = e;
            z += e;
        }
        for c in 0..s.c {
            out[c * p + i] /= z;
        }
    }
}

/// Gradient of channel softmax given its output `y`.
pub(crate) fn softmax_channels_backward<T: Real>(s: Shape, y: &[T], gy: &[T], gx: &mut [T]) {
    let p = s.plane();
    for i in 0..p {
        let mut inner = T::zero();
        for c in 0..s.c {
            inner += y[c * p + i] * gy[c * p + i];
        }
        for c in 0..s.c {
            gx[c * p + i] += y[c * p + i] * (gy[c * p + i] - inner);
        }
    }
}

/// Per-axis source indices and weights for half-pixel bilinear resampling.
#[derive(Clone, Debug)]
pub(crate) struct ResizePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

impl ResizePlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        ResizePlan {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: Self::axis(in_h, out_h),
            cols: Self::axis(in_w, out_w),
        }
    }

    fn axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
                (i0, i1, frac)
            })
            .collect()
    }
}

pub(crate) fn resize_forward<T: Real>(plan: &ResizePlan, channels: usize, x: &[T], out: &mut [T]) {
    let (ip, op) = (plan.in_h * plan.in_w, plan.out_h * plan.out_w);
    for c in 0..channels {
        let src = &x[c * ip..(c + 1) * ip];
        let dst = &mut out[c * op..(c + 1) * op];
        for (oy, &(y0, y1, fy)) in plan.rows.iter().enumerate() {
            let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
            for (ox, &(x0, x1, fx)) in plan.cols.iter().enumerate() {
                let (fx, gx) = (T::lit(fx), T::lit(1.0 - fx));
                let top = src[y0 * plan.in_w + x0] * gx + src[y0 * plan.in_w + x1] * fx;
                let bot = src[y1 * plan.in_w + x0] * gx + src[y1 * plan.in_w + x1] * fx;
                dst[oy * plan.out_w + ox] = top * gy + bot * fy;
            }
        }
    }
}

pub(crate) fn resize_backward<T: Real>(plan: &ResizePlan, channels: usize, gout: &[T], gx: &mut [T]) {
    let (ip, op) = (plan.in_h * plan.in_w, plan.out_h * plan.out_w);
    for c in 0..channels {
        let go = &gout[c * op..(c + 1) * op];
        let dst = &mut gx[c * ip..(c + 1) * ip];
        for (oy, &(y0, y1, fy)) in plan.rows.iter().enumerate() {
            let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
            for (ox, &(x0, x1, fx)) in plan.cols.iter().enumerate() {
                let (fx, gxw) = (T::lit(fx), T::lit(1.0 - fx));
                let g = go[oy * plan.out_w + ox];
                dst[y0 * plan.in_w + x0] += g * gy * gxw;
                dst[y0 * plan.in_w + x1] += g * gy * fx;
                dst[y1 * plan.in_w + x0] += g * fy * gxw;
                dst[y1 * plan.in_w + x1] += g * fy * fx;
            }
        }
    }
}

/// Replicate-padded Sobel responses for every channel. Returns `(gx, gy)`.
pub(crate) fn sobel<T: Real>(s: Shape, x: &[T]) -> (Vec<T>, Vec<T>) {
    let p = s.plane();
    let mut gx = vec![T::zero(); x.len()];
    let mut gy = vec![T::zero(); x.len()];
    for c in 0..s.c {
        let src = &x[c * p..(c + 1) * p];
        for y in 0..s.h {
            for xx in 0..s.w {
                let mut sx = T::zero();
                let mut sy = T::zero();
                for (dy, dx, wx, wy) in SOBEL_TAPS {
                    let v = src[clamp_idx(y, dy, s.h) * s.w + clamp_idx(xx, dx, s.w)];
                    sx += T::lit(wx) * v;
                    sy += T::lit(wy) * v;
                }
                gx[c * p + y * s.w + xx] = sx;
                gy[c * p + y * s.w + xx] = sy;
            }
        }
    }
    (gx, gy)
}

/// Scatters Sobel-response gradients back onto the input (adjoint of `sobel`).
pub(crate) fn sobel_backward<T: Real>(s: Shape, ggx: &[T], ggy: &[T], gin: &mut [T]) {
    let p = s.plane();
    for c in 0..s.c {
        for y in 0..s.h {
            for xx in 0..s.w {
                let i = c * p + y * s.w + xx;
                let (a, b) = (ggx[i], ggy[i]);
                for (dy, dx, wx, wy) in SOBEL_TAPS {
                    let j = c * p + clamp_idx(y, dy, s.h) * s.w + clamp_idx(xx, dx, s.w);
                    gin[j] += T::lit(wx) * a + T::lit(wy) * b;
                }
            }
        }
    }
}

#[inline]
fn clamp_idx(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

/// (dy, dx, horizontal-kernel weight, vertical-kernel weight), skipping the
/// centre tap where both are zero.
const SOBEL_TAPS: [(isize, isize, f64, f64); 8] = [
    (-1, -1, -1.0, -1.0),
    (-1, 0, 0.0, -2.0),
    (-1, 1, 1.0, -1.0),
    (0, -1, -2.0, 0.0),
    (0, 1, 2.0, 0.0),
    (1, -1, -1.0, 1.0),
    (1, 0, 0.0, 2.0),
    (1, 1, 1.0, 1.0),
];
