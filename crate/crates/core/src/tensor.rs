//! Dense row-major tensors over `f32` (default) or `f64`.
//!
//! Reductions accumulate in `f64` regardless of the element type. The `f64`
//! instantiation exists so that finite-difference checks can run at a
//! precision where a step of `1e-3` is meaningful.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`].
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn cast_from(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with arbitrary strides (row stride,
    /// column stride) for each operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    a: (usize, (isize, isize)),
    b: (usize, (isize, isize)),
    c: (usize, (isize, isize)),
) {
    let extent = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(extent(m, k, a.1) <= a.0, "gemm: lhs out of bounds");
    assert!(extent(k, n, b.1) <= b.0, "gemm: rhs out of bounds");
    assert!(extent(m, n, c.1) <= c.0, "gemm: output out of bounds");
}

impl Real for f32 {
    fn cast_from(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
        (rsc, csc): (isize, isize),
    ) {
        check_gemm_bounds(
            m,
            k,
            n,
            (a.len(), (rsa, csa)),
            (b.len(), (rsb, csb)),
            (c.len(), (rsc, csc)),
        );
        // SAFETY: every index touched by the kernel lies inside the slices,
        // checked above; the output does not alias the inputs (borrowck).
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
                rsc,
                csc,
            );
        }
    }
}

impl Real for f64 {
    fn cast_from(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
        (rsc, csc): (isize, isize),
    ) {
        check_gemm_bounds(
            m,
            k,
            n,
            (a.len(), (rsa, csa)),
            (b.len(), (rsb, csb)),
            (c.len(), (rsc, csc)),
        );
        // SAFETY: as for the f32 kernel.
        unsafe {
            matrixmultiply::dgemm(
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
                rsc,
                csc,
            );
        }
    }
}

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in dims {dims:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::cast_from(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: T, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + s * b)
    }

    pub fn expect_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::shape(format!(
                "expected rank {rank}, got dims {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().powi(2)).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        self.expect_rank(2)?;
        Ok((self.dims[0], self.dims[1]))
    }

    /// Bit-level equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// Row-wise softmax of a rank-2 tensor, stabilised by subtracting the row max.
pub fn softmax_rows<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = m.matrix_dims()?;
    let mut out = m.clone();
    for r in 0..rows {
        softmax_in_place(&mut out.data[r * cols..(r + 1) * cols]);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += v.as_f64();
    }
    let inv = T::cast_from(1.0 / total);
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// 2x2 average pooling of an `H x W x C` tensor.
pub fn avg_pool2<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    m.expect_rank(3)?;
    let (h, w, c) = (m.dims[0], m.dims[1], m.dims[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "avg_pool2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); oh * ow * c];
    let quarter = T::cast_from(0.25);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let at = |yy: usize, xx: usize| m.data[(yy * w + xx) * c + ch];
                let s = at(2 * y, 2 * x)
                    + at(2 * y, 2 * x + 1)
                    + at(2 * y + 1, 2 * x)
                    + at(2 * y + 1, 2 * x + 1);
                out[(y * ow + x) * c + ch] = s * quarter;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn softmax_uniform_logits() {
        let m = Tensor::<f32>::zeros(&[2, 3]);
        let s = softmax_rows(&m).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let m = Tensor::<f32>::new(vec![1, 2], vec![1000.0, 1000.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        let mut rng = SeededRng::new(11);
        let m: Tensor<f32> = rng.normal_tensor(&[4, 5]).scale(3.0);
        let s = softmax_rows(&m).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = (0..5).map(|c| m.data()[r * 5 + c] as f64).collect();
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            let mut row_sum = 0.0;
            for c in 0..5 {
                let want = row[c].exp() / denom;
                let got = s.data()[r * 5 + c] as f64;
                assert!((want - got).abs() < 1e-6, "{want} vs {got}");
                assert!(got > 0.0 && got < 1.0);
                row_sum += got;
            }
            assert!((row_sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_matrix() {
        let m = Tensor::<f32>::zeros(&[2, 2, 2]);
        assert!(matches!(softmax_rows(&m), Err(Error::Shape(_))));
    }

    #[test]
    fn pool_constant_map() {
        let m = Tensor::<f32>::full(&[4, 6, 2], 0.7);
        let p = avg_pool2(&m).unwrap();
        assert_eq!(p.dims(), &[2, 3, 2]);
        assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
    }

    #[test]
    fn pool_single_block() {
        let m = Tensor::<f32>::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2(&m).unwrap().data(), &[2.5]);
    }

    #[test]
    fn pool_matches_double_loop() {
        let mut rng = SeededRng::new(5);
        let m: Tensor<f32> = rng.normal_tensor(&[8, 8, 1]);
        let p = avg_pool2(&m).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let mut s = 0.0f32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += m.data()[(2 * y + dy) * 8 + 2 * x + dx];
                    }
                }
                assert_eq!(p.data()[y * 4 + x], s * 0.25);
            }
        }
    }

    #[test]
    fn pool_rejects_odd_extent() {
        let m = Tensor::<f32>::zeros(&[3, 4, 1]);
        assert!(matches!(avg_pool2(&m), Err(Error::Shape(_))));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
