//! Dense rank-3 tensors (channels x height x width) and the pure, non-tracking
//! operations on them.
//!
//! Storage is channel-major, then row, then column. Every operation returns a
//! new tensor; nothing mutates its inputs, so tensors may be shared freely
//! across threads.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, NumAssign};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, ResizePlan};

/// Floating-point element type. Implemented for `f32` (default runtime) and
/// `f64` (gradient checks and oracles).
pub trait Real:
    Float + NumAssign + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn lit(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// `c = a b + beta c` for an `m x k` by `k x n` product, each operand
    /// addressed by (row stride, column stride).
    ///
    /// # Safety
    /// Every addressed element must lie inside its slice; callers go through
    /// `kernels::gemm`, which checks this.
    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(m: usize, k: usize, n: usize, a: *const Self, sa: (isize, isize), b: *const Self, sb: (isize, isize), beta: Self, c: *mut Self, sc: (isize, isize));
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(m: usize, k: usize, n: usize, a: *const Self, sa: (isize, isize), b: *const Self, sb: (isize, isize), beta: Self, c: *mut Self, sc: (isize, isize)) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, sa.0, sa.1, b, sb.0, sb.1, beta, c, sc.0, sc.1)
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(m: usize, k: usize, n: usize, a: *const Self, sa: (isize, isize), b: *const Self, sb: (isize, isize), beta: Self, c: *mut Self, sc: (isize, isize)) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, sa.0, sa.1, b, sb.0, sb.1, beta, c, sc.0, sc.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_channels(&self, c: usize) -> Self {
        Shape { c, ..*self }
    }

    pub(crate) fn expect_eq(&self, other: &Shape) -> Result<()> {
        if self.c != other.c {
            return Err(Error::dim("channels", self.c, other.c));
        }
        if self.h != other.h {
            return Err(Error::dim("height", self.h, other.h));
        }
        if self.w != other.w {
            return Err(Error::dim("width", self.w, other.w));
        }
        Ok(())
    }

    pub(crate) fn expect_spatial(&self, other: &Shape) -> Result<()> {
        if self.h != other.h {
            return Err(Error::dim("height", self.h, other.h));
        }
        if self.w != other.w {
            return Err(Error::dim("width", self.w, other.w));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(6).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim("data length", shape.numel(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for c in 0..shape.c {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor { shape, data }
    }

    /// A `(len, 1, 1)` tensor holding a vector.
    pub fn from_vec(values: Vec<T>) -> Self {
        Tensor {
            shape: Shape::new(values.len(), 1, 1),
            data: values,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1),
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.shape.h + y) * self.shape.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let idx = (c * self.shape.h + y) * self.shape.w + x;
        self.data[idx] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.shape.expect_eq(&other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Rows `c0..c1` of the channel axis.
    pub fn slice_channels(&self, c0: usize, c1: usize) -> Result<Self> {
        if c1 > self.shape.c || c0 >= c1 {
            return Err(Error::dim("channels", self.shape.c, c1));
        }
        let p = self.shape.plane();
        Ok(Tensor {
            shape: self.shape.with_channels(c1 - c0),
            data: self.data[c0 * p..c1 * p].to_vec(),
        })
    }

    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?;
        let mut c = 0;
        let mut data = Vec::new();
        for t in parts {
            first.shape.expect_spatial(&t.shape)?;
            c += t.shape.c;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: first.shape.with_channels(c),
            data,
        })
    }
}

/// Convolution weights and geometry. The kernel is laid out
/// `(out_channels, in_channels / groups, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
    pub out_channels: usize,
    pub in_channels: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        k: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        let kernel = Tensor::new(Shape::new(out_channels, in_channels, k * k), weights)?;
        if bias.len() != out_channels {
            return Err(Error::dim("bias", out_channels, bias.len()));
        }
        Ok(ConvParams {
            kernel,
            bias,
            out_channels,
            in_channels,
            k,
            stride: 1,
            padding: 0,
            groups: 1,
        })
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// `out_channels x in_channels` 1x1 identity (requires equal widths).
    pub fn identity_1x1(c: usize) -> Self {
        let mut w = vec![T::zero(); c * c];
        for i in 0..c {
            w[i * c + i] = T::one();
        }
        Self::new(c, c, 1, w, vec![T::zero(); c]).expect("valid identity conv")
    }

    /// 3x3 kernel passing each channel through its own centre tap.
    pub fn identity_3x3(c: usize) -> Self {
        let mut w = vec![T::zero(); c * c * 9];
        for i in 0..c {
            w[(i * c + i) * 9 + 4] = T::one();
        }
        Self::new(c, c, 3, w, vec![T::zero(); c])
            .expect("valid identity conv")
            .with_padding(1)
    }

    pub(crate) fn geometry(&self, input: Shape) -> Result<ConvGeom> {
        if input.c != self.in_channels {
            return Err(Error::dim("channels", self.in_channels, input.c));
        }
        ConvGeom::new(
            input,
            self.out_channels,
            self.k,
            self.stride,
            self.padding,
            self.groups,
        )
    }
}

/// Cross-correlation with bias (no kernel flip).
pub fn conv2d<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let geom = params.geometry(input.shape())?;
    if params.kernel.len() != geom.weight_len() {
        return Err(Error::dim("kernel", geom.weight_len(), params.kernel.len()));
    }
    let mut out = vec![T::zero(); geom.out_shape().numel()];
    kernels::conv_forward(
        &geom,
        input.data(),
        params.kernel.data(),
        Some(&params.bias),
        &mut out,
    );
    Ok(Tensor::from_parts(geom.out_shape(), out))
}

/// Softmax across the channel axis at every spatial position.
pub fn softmax_channels<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); input.len()];
    kernels::softmax_channels(input.shape(), input.data(), &mut out);
    Tensor::from_parts(input.shape(), out)
}

/// Per-channel spatial mean, returned as a `(C, 1, 1)` tensor.
pub fn global_average_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.plane() == 0 {
        return Err(Error::dim("spatial extent", 1, 0));
    }
    let n = T::lit(s.plane() as f64);
    let means = (0..s.c)
        .map(|c| input.channel(c).iter().copied().sum::<T>() / n)
        .collect();
    Ok(Tensor::from_vec(means))
}

/// Mean over channels, `(1, H, W)`.
pub fn channel_average_pool<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let p = s.plane();
    let mut out = vec![T::zero(); p];
    for c in 0..s.c {
        for (o, &v) in out.iter_mut().zip(input.channel(c)) {
            *o += v;
        }
    }
    let n = T::lit(s.c as f64);
    out.iter_mut().for_each(|v| *v /= n);
    Tensor::from_parts(Shape::new(1, s.h, s.w), out)
}

/// Tiles a single-channel map into `channels` identical channels.
pub fn replicate_channels<T: Real>(input: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    if input.shape().c != 1 {
        return Err(Error::dim("channels", 1, input.shape().c));
    }
    let mut data = Vec::with_capacity(input.len() * channels);
    for _ in 0..channels {
        data.extend_from_slice(input.data());
    }
    Ok(Tensor::from_parts(input.shape().with_channels(channels), data))
}

/// Half-pixel-centre bilinear interpolation (`align_corners = false`).
pub fn bilinear_resize<T: Real>(input: &Tensor<T>, new_h: usize, new_w: usize) -> Result<Tensor<T>> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::Parameter(format!(
            "resize target must be at least 1x1, got {new_h}x{new_w}"
        )));
    }
    let s = input.shape();
    if s.plane() == 0 {
        return Err(Error::dim("spatial extent", 1, 0));
    }
    let plan = ResizePlan::new(s.h, s.w, new_h, new_w);
    let mut out = vec![T::zero(); s.c * new_h * new_w];
    kernels::resize_forward(&plan, s.c, input.data(), &mut out);
    Ok(Tensor::from_parts(Shape::new(s.c, new_h, new_w), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_conv(out: usize, inp: usize, k: usize, rng: &mut impl Rng) -> ConvParams<f64> {
        let w = (0..out * inp * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = (0..out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ConvParams::new(out, inp, k, w, b).unwrap()
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(Shape::new(2, 2, 2), vec![0.0; 7]).is_err());
    }

    #[test]
    fn identity_1x1_conv_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(Shape::new(4, 5, 6), &mut rng);
        let y = conv2d(&x, &ConvParams::identity_1x1(4)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let c = 0.3;
        let x = Tensor::full(Shape::new(1, 5, 5), c);
        let p = ConvParams::new(1, 1, 3, vec![1.0; 9], vec![0.25])
            .unwrap()
            .with_padding(1);
        let y = conv2d(&x, &p).unwrap();
        assert!((y.at(0, 2, 2) - (9.0 * c + 0.25)).abs() < 1e-12);
        // corner only sees 4 taps
        assert!((y.at(0, 0, 0) - (4.0 * c + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(Shape::new(2, 4, 4), &mut rng);
        let p = random_conv(3, 2, 3, &mut rng);
        let y = conv2d(&x, &p).unwrap();
        let r = oracle::conv2d(&x, &p);
        assert!(y.max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn strided_and_grouped_conv_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(Shape::new(4, 9, 7), &mut rng);
        let p = random_conv(6, 4, 3, &mut rng).with_stride(2).with_padding(1);
        assert!(conv2d(&x, &p).unwrap().max_abs_diff(&oracle::conv2d(&x, &p)) < 1e-12);

        let mut dw = random_conv(4, 1, 3, &mut rng).with_padding(1);
        dw.in_channels = 4;
        dw.groups = 4;
        assert!(conv2d(&x, &dw).unwrap().max_abs_diff(&oracle::conv2d(&x, &dw)) < 1e-12);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(Shape::new(3, 4, 4));
        let p = ConvParams::<f64>::identity_1x1(2);
        match conv2d(&x, &p) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "channels"),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv_rejects_empty_output() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 2));
        let p = ConvParams::new(1, 1, 3, vec![0.0; 9], vec![0.0]).unwrap();
        assert!(conv2d(&x, &p).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::full(Shape::new(5, 2, 2), 0.7f64);
        assert!(softmax_channels(&x).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let x = Tensor::new(Shape::new(2, 1, 1), vec![0.0, 3f64.ln()]).unwrap();
        let y = softmax_channels(&x);
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let x = Tensor::new(Shape::new(2, 1, 1), vec![1000.0, 1000.0f64]).unwrap();
        let y = softmax_channels(&x);
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(Shape::new(8, 6, 6), &mut rng).map(|v| 10.0 * v);
        let y = softmax_channels(&x);
        for i in 0..36 {
            let s: f64 = (0..8).map(|c| y.data()[c * 36 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(y.max_abs_diff(&oracle::softmax_channels(&x)) < 1e-12);
    }

    #[test]
    fn pooling_examples() {
        let x = Tensor::full(Shape::new(2, 3, 3), 0.4f64);
        let g = global_average_pool(&x).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));

        let half = Tensor::from_fn(Shape::new(1, 2, 2), |_, y, _| y as f64);
        assert_eq!(global_average_pool(&half).unwrap().item(), 0.5);

        assert!(global_average_pool(&Tensor::<f64>::zeros(Shape::new(2, 0, 3))).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = random(Shape::new(4, 8, 8), &mut rng);
        assert!(
            global_average_pool(&r)
                .unwrap()
                .max_abs_diff(&oracle::global_average_pool(&r))
                < 1e-12
        );
        assert!(channel_average_pool(&r).max_abs_diff(&oracle::channel_average_pool(&r)) < 1e-12);
    }

    #[test]
    fn channel_pool_symmetry_and_single_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random(Shape::new(1, 4, 4), &mut rng);
        assert_eq!(channel_average_pool(&a), a);
        let neg = a.map(|v| -v);
        let both = Tensor::concat_channels(&[&a, &neg]).unwrap();
        assert!(channel_average_pool(&both).data().iter().all(|&v| v == 0.0));
        let rep = replicate_channels(&a, 3).unwrap();
        assert_eq!(rep.shape(), Shape::new(3, 4, 4));
        assert_eq!(rep.channel(2), a.data());
    }

    #[test]
    fn resize_constant_and_identity() {
        let x = Tensor::full(Shape::new(2, 3, 5), 0.6f64);
        let y = bilinear_resize(&x, 7, 4).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random(Shape::new(3, 6, 5), &mut rng);
        assert_eq!(bilinear_resize(&r, 6, 5).unwrap(), r);
        assert!(bilinear_resize(&r, 0, 5).is_err());
    }

    #[test]
    fn resize_ramp_hand_weights() {
        // Source pixel centres sit at 0.5 and 1.5; destination centres at 0.25,
        // 0.75, 1.25, 1.75 in source-pixel units, so interior samples are the
        // 3:1 / 1:3 mixes and the outermost samples clamp to the edge value.
        let x = Tensor::new(Shape::new(1, 2, 2), vec![0.0, 1.0, 2.0, 3.0f64]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let axis = [0.0, 0.25, 0.75, 1.0];
        for (yy, &fy) in axis.iter().enumerate() {
            for (xx, &fx) in axis.iter().enumerate() {
                let expected = fx * 1.0 + fy * 2.0;
                assert!((y.at(0, yy, xx) - expected).abs() < 1e-12, "{yy},{xx}");
            }
        }
        assert!(y.max_abs_diff(&oracle::bilinear_resize(&x, 4, 4)) < 1e-12);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(Shape::new(2, 3, 3), &mut rng);
        let b = random(Shape::new(3, 3, 3), &mut rng);
        let ab = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.slice_channels(0, 2).unwrap(), a);
        assert_eq!(ab.slice_channels(2, 5).unwrap(), b);
        let bad = Tensor::<f64>::zeros(Shape::new(1, 2, 3));
        assert!(Tensor::concat_channels(&[&a, &bad]).is_err());
    }
}
