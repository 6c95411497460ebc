//! Dense activation tensors and the scalar abstraction used by the network.
//!
//! Activations are stored channel-major as `C × N × H × W` (CNHW): one
//! contiguous plane per channel spanning the whole batch. A 3×3 convolution
//! then becomes a single GEMM over `N·H·W` columns, and batch-norm statistics
//! are contiguous per channel.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the network can run in. `f32` for training,
/// `f64` for gradient checking.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    /// `C ← α·A·B + β·C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, in-bounds matrices and `c`
    /// must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Row-major matrix view, optionally transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, F> {
    data: &'a [F],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a, F> Mat<'a, F> {
    /// `rows × cols` row-major matrix.
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix buffer too small");
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out ← a·b + beta·out`, where `out` is row-major `m × n`.
pub fn gemm<F: Real>(a: Mat<'_, F>, b: Mat<'_, F>, beta: F, out: &mut [F]) {
    let (m, k) = a.shape();
    let (kb, n) = b.shape();
    assert_eq!(k, kb, "inner dimensions differ");
    assert!(out.len() >= m * n, "output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: shapes were checked against the buffer lengths above and `out`
    // is a distinct mutable borrow.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Channel-major activation tensor (`C × N × H × W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub data: Vec<F>,
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Tensor {
            data: vec![F::zero(); c * n * h * w],
            c,
            n,
            h,
            w,
        }
    }

    pub fn from_vec(data: Vec<F>, c: usize, n: usize, h: usize, w: usize) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data length");
        Tensor { data, c, n, h, w }
    }

    /// Stacks single-channel images (each `h·w` values) into a `1 × N × H × W` batch.
    pub fn from_planes<'a, I>(planes: I, h: usize, w: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut data = Vec::new();
        let mut n = 0;
        for p in planes {
            assert_eq!(p.len(), h * w, "plane size");
            data.extend(p.iter().map(|&v| F::from_f32(v).unwrap()));
            n += 1;
        }
        Tensor { data, c: 1, n, h, w }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c, self.n, self.h, self.w]
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Length of one channel plane (`N·H·W`).
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[F] {
        let p = self.plane_len();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [F] {
        let p = self.plane_len();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// The `h·w` slice for channel `c`, sample `n`.
    pub fn plane(&self, c: usize, n: usize) -> &[F] {
        let hw = self.hw();
        let off = (c * self.n + n) * hw;
        &self.data[off..off + hw]
    }

    pub fn plane_mut(&mut self, c: usize, n: usize) -> &mut [F] {
        let hw = self.hw();
        let off = (c * self.n + n) * hw;
        &mut self.data[off..off + hw]
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial mismatch");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            data,
            c: a.c + b.c,
            n: a.n,
            h: a.h,
            w: a.w,
        }
    }

    /// Splits off the first `c` channels; inverse of [`Tensor::concat_channels`].
    pub fn split_channels(mut self, c: usize) -> (Tensor<F>, Tensor<F>) {
        assert!(c <= self.c);
        let tail = self.data.split_off(c * self.plane_len());
        let rest = Tensor {
            data: tail,
            c: self.c - c,
            n: self.n,
            h: self.h,
            w: self.w,
        };
        self.c = c;
        (self, rest)
    }

    /// Selects one sample of the batch.
    pub fn sample(&self, n: usize) -> Tensor<F> {
        let mut data = Vec::with_capacity(self.c * self.hw());
        for c in 0..self.c {
            data.extend_from_slice(self.plane(c, n));
        }
        Tensor {
            data,
            c: self.c,
            n: 1,
            h: self.h,
            w: self.w,
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
            c: self.c,
            n: self.n,
            h: self.h,
            w: self.w,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expect = naive(&a, &b, m, k, n);
        let mut out = vec![0.0; m * n];
        gemm(Mat::new(&a, m, k), Mat::new(&b, k, n), 0.0, &mut out);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // (Aᵀ)ᵀ·B through a transposed copy of A.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut out2 = vec![1.0; m * n];
        gemm(Mat::new(&at, k, m).t(), Mat::new(&b, k, n), 0.0, &mut out2);
        assert_eq!(out, out2);
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::<f32>::from_vec((0..8).map(|v| v as f32).collect(), 2, 1, 2, 2);
        let b = Tensor::<f32>::from_vec((8..12).map(|v| v as f32).collect(), 1, 1, 2, 2);
        let cat = Tensor::concat_channels(&a, &b);
        assert_eq!(cat.c, 3);
        let (x, y) = cat.split_channels(2);
        assert_eq!(x, a);
        assert_eq!(y, b);
    }
}
