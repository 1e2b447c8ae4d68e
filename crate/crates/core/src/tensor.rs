//! Dense NCHW tensors and the floating-point abstraction shared by the
//! network engine.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type usable by the network engine.
///
/// Training runs in `f32`; gradient checks run the same code in `f64`.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + std::ops::SubAssign + std::ops::MulAssign + 'static
{
    const DTYPE: &'static str;

    /// `c = alpha * op(a) * op(b) + beta * c` over row-major buffers with
    /// explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
    );

    fn from_f64(v: f64) -> Self;

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;

    fn from_le_bytes_slice(bytes: &[u8]) -> Option<Vec<Self>>;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v)
    }
}

fn check_gemm_bounds(m: usize, k: usize, n: usize, la: usize, lb: usize, lc: usize, rsa: isize, csa: isize, rsb: isize, csb: isize, rsc: isize) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0);
    assert!(span(m, k, rsa, csa) <= la, "gemm: a out of bounds");
    assert!(span(k, n, rsb, csb) <= lb, "gemm: b out of bounds");
    assert!(span(m, n, rsc, 1) <= lc, "gemm: c out of bounds");
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], rsa: isize, csa: isize, b: &[f32], rsb: isize, csb: isize, beta: f32, c: &mut [f32], rsc: isize) {
        check_gemm_bounds(m, k, n, a.len(), b.len(), c.len(), rsa, csa, rsb, csb, rsc);
        // SAFETY: every strided access was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, 1);
        }
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Option<Vec<Self>> {
        if bytes.len() % 4 != 0 {
            return None;
        }
        Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, beta: f64, c: &mut [f64], rsc: isize) {
        check_gemm_bounds(m, k, n, a.len(), b.len(), c.len(), rsa, csa, rsb, csb, rsc);
        // SAFETY: every strided access was bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, 1);
        }
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Option<Vec<Self>> {
        if bytes.len() % 8 != 0 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        )
    }
}

/// Row-major `batch x channels x height x width` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: [usize; 4],
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![F::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: [usize; 4], value: F) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!("tensor of shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of elements in one `(batch, channel)` plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> F {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut F {
        let [_, ch, h, w] = self.shape;
        &mut self.data[((n * ch + c) * h + y) * w + x]
    }

    /// Contiguous slice holding sample `n`.
    pub fn sample(&self, n: usize) -> &[F] {
        let len = self.shape[1] * self.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [F] {
        let len = self.shape[1] * self.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN))).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let [na, ca, ha, wa] = a.shape;
        let [nb, cb, hb, wb] = b.shape;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::Shape(format!("cannot concatenate {:?} with {:?}", a.shape, b.shape)));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            data.extend_from_slice(a.sample(n));
            data.extend_from_slice(b.sample(n));
        }
        Ok(Self { shape: [na, ca + cb, ha, wa], data })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits off the first `c` channels.
    pub fn split_channels(&self, c: usize) -> (Self, Self) {
        let [n, ch, h, w] = self.shape;
        let plane = h * w;
        let mut a = Vec::with_capacity(n * c * plane);
        let mut b = Vec::with_capacity(n * (ch - c) * plane);
        for i in 0..n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..c * plane]);
            b.extend_from_slice(&s[c * plane..]);
        }
        (Self { shape: [n, c, h, w], data: a }, Self { shape: [n, ch - c, h, w], data: b })
    }

    /// Selects a subset of samples in the given order.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let [_, c, h, w] = self.shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self { shape: [indices.len(), c, h, w], data }
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.data.len()).sum());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!("cannot stack {:?} with {:?}", first.shape, t.shape)));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape: [n, c, h, w], data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data.iter().zip(&other.data).fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}
