//! Dense tensors and the CPU kernels every layer is built from.
//!
//! Everything here is deterministic: kernels are pure functions of their
//! inputs, matmul accumulates along the inner dimension in ascending order,
//! and [`Rng`] is a seeded ChaCha8 stream that produces the same values on
//! every platform.

use std::fmt;

use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tensor dimensions, row-major.
///
/// Zero-sized dims are representable (an `1x0` matrix is a valid matmul
/// operand); network constructors reject empty parameter tensors themselves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Shape {
        Shape(dims.into())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    /// Element count: the product of all dims.
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The four dims of a `B x C x H x W` tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::Shape(format!("expected 4-d shape, got {self}"))),
        }
    }

    /// The two dims of a matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.0[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected 2-d shape, got {self}"))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Dense row-major array of `f32` with an explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Tensor {
        let n = shape.len();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Tensor> {
        if shape.len() != data.len() {
            return Err(Error::Shape(format!(
                "shape {} holds {} elements but {} were provided",
                shape,
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Row-major element lookup; for tests and small-scale inspection.
    pub fn at(&self, index: &[usize]) -> f32 {
        let dims = self.shape.dims();
        assert_eq!(index.len(), dims.len(), "index rank mismatch");
        let mut flat = 0usize;
        for (i, (&ix, &d)) in index.iter().zip(dims).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for dim {i} (size {d})");
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Seeded, reproducible pseudo-random generator (ChaCha8).
///
/// The same seed yields the same stream on every platform. Independent
/// substreams (e.g. one per epoch) come from [`Rng::stream`].
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    chacha: rand_chacha::ChaCha8Rng,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Rng {
        Rng {
            seed,
            chacha: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A fresh generator on substream `stream` of this generator's seed.
    pub fn stream(&self, stream: u64) -> Rng {
        let mut chacha = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        chacha.set_stream(stream);
        Rng {
            seed: self.seed,
            chacha,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u32(&mut self) -> u32 {
        self.chacha.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.chacha.next_u64()
    }

    /// Uniform sample in `[lo, hi)` from 24 random mantissa bits.
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        let unit = (self.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0);
        lo + (hi - lo) * unit
    }

    /// Uniform index in `[0, bound)` via the widening-multiply trick.
    pub fn index(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "index bound must be positive");
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Checked strided GEMM: `c = alpha * a@b + beta * c`.
///
/// Accumulation along `k` is ascending for every output element, so repeated
/// calls with identical inputs are bit-identical.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // Empty inner dim: a@b is all zeros, only the beta scaling remains.
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
    };
    assert!(span(m, k, rsa, csa) < a.len());
    assert!(span(k, n, rsb, csb) < b.len());
    assert!(m * n <= c.len());
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of two 2-d tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.shape().dims2()?;
    let (kb, n) = b.shape().dims2()?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dims disagree: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(Shape::new([m, n]));
    sgemm(
        m,
        ka,
        n,
        1.0,
        a.data(),
        ka as isize,
        1,
        b.data(),
        n as isize,
        1,
        0.0,
        out.data_mut(),
    );
    Ok(out)
}

/// Lay out every valid (no padding) window of one `C x H x W` sample as a row
/// of `cols`, which must hold `out_h * out_w` rows of `C * kh * kw` values.
pub(crate) fn im2col(
    sample: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    cols: &mut [f32],
) {
    let out_h = (h - kh) / stride + 1;
    let out_w = (w - kw) / stride + 1;
    let patch = c * kh * kw;
    debug_assert_eq!(cols.len(), out_h * out_w * patch);
    let mut row = 0usize;
    for oh in 0..out_h {
        for ow in 0..out_w {
            let dst = &mut cols[row * patch..(row + 1) * patch];
            let ih0 = oh * stride;
            let iw0 = ow * stride;
            let mut d = 0usize;
            for ch in 0..c {
                let plane = &sample[ch * h * w..(ch + 1) * h * w];
                for r in 0..kh {
                    let src = &plane[(ih0 + r) * w + iw0..(ih0 + r) * w + iw0 + kw];
                    dst[d..d + kw].copy_from_slice(src);
                    d += kw;
                }
            }
            row += 1;
        }
    }
}

/// Scatter-add the column gradient back onto one input sample (adjoint of
/// [`im2col`]).
pub(crate) fn col2im_add(
    dcols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dsample: &mut [f32],
) {
    let out_h = (h - kh) / stride + 1;
    let out_w = (w - kw) / stride + 1;
    let patch = c * kh * kw;
    debug_assert_eq!(dcols.len(), out_h * out_w * patch);
    let mut row = 0usize;
    for oh in 0..out_h {
        for ow in 0..out_w {
            let src = &dcols[row * patch..(row + 1) * patch];
            let ih0 = oh * stride;
            let iw0 = ow * stride;
            let mut s = 0usize;
            for ch in 0..c {
                let plane = &mut dsample[ch * h * w..(ch + 1) * h * w];
                for r in 0..kh {
                    let dst = &mut plane[(ih0 + r) * w + iw0..(ih0 + r) * w + iw0 + kw];
                    for (d, v) in dst.iter_mut().zip(&src[s..s + kw]) {
                        *d += v;
                    }
                    s += kw;
                }
            }
            row += 1;
        }
    }
}

pub(crate) fn conv_out_size(h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> (usize, usize) {
    ((h - kh) / stride + 1, (w - kw) / stride + 1)
}

/// Valid cross-correlation of a batch with a filter bank, via im2col + GEMM.
pub fn conv2d(input: &Tensor, filters: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::Argument("conv2d stride must be >= 1".into()));
    }
    let (batch, c, h, w) = input.shape().dims4()?;
    let (f, fc, kh, kw) = filters.shape().dims4()?;
    if fc != c {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input {} vs filters {}",
            input.shape(),
            filters.shape()
        )));
    }
    if kh > h || kw > w {
        return Err(Error::Shape(format!(
            "conv2d kernel {}x{} larger than input {}x{}",
            kh, kw, h, w
        )));
    }
    if bias.len() != f {
        return Err(Error::Shape(format!(
            "conv2d bias length {} != filter count {}",
            bias.len(),
            f
        )));
    }
    let (out_h, out_w) = conv_out_size(h, w, kh, kw, stride);
    let positions = out_h * out_w;
    let patch = c * kh * kw;
    let mut out = Tensor::zeros(Shape::new([batch, f, out_h, out_w]));
    let mut cols = vec![0.0f32; positions * patch];
    for b in 0..batch {
        let sample = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        im2col(sample, c, h, w, kh, kw, stride, &mut cols);
        let y = &mut out.data_mut()[b * f * positions..(b + 1) * f * positions];
        // y[F x P] = filters[F x patch] @ cols^T[patch x P]
        sgemm(
            f,
            patch,
            positions,
            1.0,
            filters.data(),
            patch as isize,
            1,
            &cols,
            1,
            patch as isize,
            0.0,
            y,
        );
        for (fi, ybias) in bias.data().iter().enumerate() {
            for v in &mut y[fi * positions..(fi + 1) * positions] {
                *v += ybias;
            }
        }
    }
    Ok(out)
}

/// Non-overlapping 2x2 max pooling. Returns the pooled tensor and, per output
/// element, the flat index of the winning input element (ties go to the
/// lowest flat index).
pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (batch, c, h, w) = input.shape().dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2d needs even spatial dims, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(Shape::new([batch, c, oh, ow]));
    let mut argmax = vec![0u32; batch * c * oh * ow];
    let data = input.data();
    let mut o = 0usize;
    for bc in 0..batch * c {
        let plane = bc * h * w;
        for r in 0..oh {
            for col in 0..ow {
                let base = plane + 2 * r * w + 2 * col;
                let window = [base, base + 1, base + w, base + w + 1];
                let mut best = window[0];
                let mut best_v = data[window[0]];
                for &ix in &window[1..] {
                    if data[ix] > best_v {
                        best_v = data[ix];
                        best = ix;
                    }
                }
                out.data_mut()[o] = best_v;
                argmax[o] = best as u32;
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

/// Glorot-uniform initialization: samples from
/// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`.
pub fn glorot_init(shape: Shape, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Argument(
            "glorot_init fans must be at least 1".into(),
        ));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform(-bound, bound);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn t2(rows: usize, cols: usize, vals: &[f32]) -> Tensor {
        Tensor::from_vec(Shape::new([rows, cols]), vals.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let i = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&i, &a).unwrap(), a);
        assert_eq!(matmul(&a, &i).unwrap(), a);
    }

    #[test]
    fn matmul_hand_expanded() {
        // Hand-expanded dot products:
        // [1 2; 3 4] @ [5 6; 7 8] = [1*5+2*7, 1*6+2*8; 3*5+4*7, 3*6+4*8]
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_empty_inner_dim() {
        let a = t2(1, 0, &[]);
        let b = t2(0, 1, &[]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape().dims(), &[1, 1]);
        assert_eq!(c.data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "got: {msg}");
    }

    fn conv_in_2x2() -> Tensor {
        Tensor::from_vec(Shape::new([1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn conv2d_pointwise_scaling() {
        let f = Tensor::from_vec(Shape::new([1, 1, 1, 1]), vec![2.0]).unwrap();
        let b = Tensor::from_vec(Shape::new([1]), vec![0.0]).unwrap();
        let y = conv2d(&conv_in_2x2(), &f, &b, 1).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv2d_window_sum_and_bias() {
        let f = Tensor::from_vec(Shape::new([1, 1, 2, 2]), vec![1.0; 4]).unwrap();
        let b0 = Tensor::from_vec(Shape::new([1]), vec![0.0]).unwrap();
        let y = conv2d(&conv_in_2x2(), &f, &b0, 1).unwrap();
        assert_eq!(y.shape().dims(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
        let b1 = Tensor::from_vec(Shape::new([1]), vec![1.0]).unwrap();
        let y = conv2d(&conv_in_2x2(), &f, &b1, 1).unwrap();
        assert_eq!(y.data(), &[11.0]);
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let f = Tensor::from_vec(Shape::new([1, 1, 3, 3]), vec![0.0; 9]).unwrap();
        let b = Tensor::from_vec(Shape::new([1]), vec![0.0]).unwrap();
        assert!(matches!(
            conv2d(&conv_in_2x2(), &f, &b, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv2d_unit_filter_is_identity_per_channel() {
        let mut rng = Rng::from_seed(7);
        let x = glorot_init(Shape::new([2, 3, 4, 5]), 3, 3, &mut rng).unwrap();
        let f = Tensor::from_vec(
            Shape::new([3, 3, 1, 1]),
            vec![
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0,
            ],
        )
        .unwrap();
        let b = Tensor::zeros(Shape::new([3]));
        let y = conv2d(&x, &f, &b, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn maxpool_single_window() {
        let x = conv_in_2x2();
        let (y, arg) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_tie_breaks_to_first() {
        let x = Tensor::from_vec(Shape::new([1, 1, 2, 2]), vec![5.0; 4]).unwrap();
        let (y, arg) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn maxpool_negatives() {
        let x = Tensor::from_vec(Shape::new([1, 1, 2, 2]), vec![-1.0, -2.0, -3.0, -4.0]).unwrap();
        let (y, _) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[-1.0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor::zeros(Shape::new([1, 1, 3, 2]));
        assert!(matches!(maxpool2d(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn glorot_bound_and_determinism() {
        let mut rng = Rng::from_seed(11);
        let t = glorot_init(Shape::new([100]), 3, 3, &mut rng).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let mut rng2 = Rng::from_seed(11);
        let t2 = glorot_init(Shape::new([100]), 3, 3, &mut rng2).unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn glorot_mean_near_zero() {
        // Law of large numbers: 1e4 uniform(-1, 1) samples average out.
        let mut rng = Rng::from_seed(3);
        let t = glorot_init(Shape::new([10_000]), 3, 3, &mut rng).unwrap();
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn rng_streams_are_independent_and_stable() {
        let base = Rng::from_seed(5);
        let a: Vec<u32> = {
            let mut r = base.stream(1);
            (0..4).map(|_| r.next_u32()).collect()
        };
        let b: Vec<u32> = {
            let mut r = base.stream(2);
            (0..4).map(|_| r.next_u32()).collect()
        };
        assert_ne!(a, b);
        let a2: Vec<u32> = {
            let mut r = base.stream(1);
            (0..4).map(|_| r.next_u32()).collect()
        };
        assert_eq!(a, a2);
    }

    /// Brute-force matmul used as the independent oracle.
    fn matmul_naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.shape().dims2().unwrap();
        let (_, n) = b.shape().dims2().unwrap();
        let mut c = Tensor::zeros(Shape::new([m, n]));
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                }
                c.data_mut()[i * n + j] = acc as f32;
            }
        }
        c
    }

    proptest! {
        #[test]
        fn matmul_matches_naive_oracle(
            m in 1usize..8, k in 0usize..9, n in 1usize..8, seed in 0u64..1000
        ) {
            let mut rng = Rng::from_seed(seed);
            let mut av = vec![0.0f32; m * k];
            let mut bv = vec![0.0f32; k * n];
            for v in av.iter_mut().chain(bv.iter_mut()) {
                *v = rng.uniform(-2.0, 2.0);
            }
            let a = Tensor::from_vec(Shape::new([m, k]), av).unwrap();
            let b = Tensor::from_vec(Shape::new([k, n]), bv).unwrap();
            let fast = matmul(&a, &b).unwrap();
            let slow = matmul_naive(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                prop_assert!((x - y).abs() <= 1e-4 * y.abs().max(1.0));
            }
        }

        #[test]
        fn maxpool_matches_per_window_oracle(seed in 0u64..500) {
            let mut rng = Rng::from_seed(seed);
            let (b, c, h, w) = (2usize, 3usize, 4usize, 6usize);
            let mut xv = vec![0.0f32; b * c * h * w];
            for v in xv.iter_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
            let x = Tensor::from_vec(Shape::new([b, c, h, w]), xv).unwrap();
            let (y, arg) = maxpool2d(&x).unwrap();
            let mut o = 0usize;
            for bc in 0..b * c {
                for r in 0..h / 2 {
                    for col in 0..w / 2 {
                        let mut expect = f32::NEG_INFINITY;
                        for dr in 0..2 {
                            for dc in 0..2 {
                                let ix = bc * h * w + (2 * r + dr) * w + 2 * col + dc;
                                expect = expect.max(x.data()[ix]);
                            }
                        }
                        prop_assert_eq!(y.data()[o], expect);
                        prop_assert_eq!(x.data()[arg[o] as usize], expect);
                        o += 1;
                    }
                }
            }
        }

        #[test]
        fn kernels_are_pure(seed in 0u64..200) {
            let mut rng = Rng::from_seed(seed);
            let x = glorot_init(Shape::new([2, 2, 6, 6]), 4, 4, &mut rng).unwrap();
            let f = glorot_init(Shape::new([3, 2, 3, 3]), 18, 27, &mut rng).unwrap();
            let bias = glorot_init(Shape::new([3]), 1, 1, &mut rng).unwrap();
            let y1 = conv2d(&x, &f, &bias, 1).unwrap();
            let y2 = conv2d(&x, &f, &bias, 1).unwrap();
            prop_assert_eq!(&y1, &y2);
            prop_assert!(y1.all_finite());
        }
    }
}
