//! Dense row-major matrices and a strided GEMM wrapper.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type of the model: `f64` for reference runs, `f32` for training.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// `C = alpha * A * B + beta * C` over strided row/column layouts.
    ///
    /// # Safety
    /// All index ranges implied by the shapes and strides must lie inside the
    /// buffers behind the pointers.
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

    fn of(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
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

    fn of(x: f64) -> f32 {
        x as f32
    }

    fn to_f64_lossy(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
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

    fn of(x: f64) -> f64 {
        x
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// A strided view into a buffer: element (i, j) lives at
/// `offset + i * row_stride + j * col_stride`.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub fn dense(rows: usize, cols: usize) -> Self {
        View { offset: 0, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// Rows `r0..r0+rows`, columns `c0..c0+cols` of a dense `_ × width` matrix.
    pub fn block(width: usize, r0: usize, rows: usize, c0: usize, cols: usize) -> Self {
        View { offset: r0 * width + c0, rows, cols, row_stride: width, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        View {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c = alpha * a * b + beta * c` on views into slices.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(alpha: F, a: &[F], av: View, b: &[F], bv: View, beta: F, c: &mut [F], cv: View) {
    assert_eq!(av.cols, bv.rows, "inner dimensions differ");
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols), "output shape differs");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                c[idx] = if beta == F::zero() { F::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(av.last_index() < a.len() && bv.last_index() < b.len() && cv.last_index() < c.len());
    // SAFETY: every index addressed by the views was bounds-checked above.
    unsafe {
        F::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Matrix { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    pub fn view(&self) -> View {
        View::dense(self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix<F>) -> Matrix<F> {
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(F::one(), &self.data, self.view(), &other.data, other.view(), F::zero(), &mut out.data, View::dense(self.rows, other.cols));
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix<F>) -> Matrix<F> {
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(F::one(), &self.data, self.view().t(), &other.data, other.view(), F::zero(), &mut out.data, View::dense(self.cols, other.cols));
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix<F>) -> Matrix<F> {
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(F::one(), &self.data, self.view(), &other.data, other.view().t(), F::zero(), &mut out.data, View::dense(self.rows, other.rows));
        out
    }

    pub fn add_assign(&mut self, other: &Matrix<F>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Matrix<G> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| G::of(x.to_f64_lossy())).collect() }
    }

    pub fn fill(&mut self, value: F) {
        self.data.iter_mut().for_each(|x| *x = value);
    }
}

/// In-place numerically stable softmax of one row; masked entries must
/// already hold `-inf`.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        row.iter_mut().for_each(|x| *x = F::zero());
        return;
    }
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Log-softmax of one row into `out`.
pub fn log_softmax<F: Scalar>(row: &[F], out: &mut Vec<F>) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
    out.clear();
    out.extend(row.iter().map(|&x| x - lse));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.data[i * b.cols + j] = s;
            }
        }
        out
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let data = (0..rows * cols).map(|i| (((i as u64 + 1) * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0).collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn products_match_naive() {
        let a = sample(5, 7, 1);
        let b = sample(7, 3, 2);
        let c = sample(5, 3, 3);
        let close = |x: &Matrix<f64>, y: &Matrix<f64>| x.data.iter().zip(&y.data).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&a.matmul(&b), &naive(&a, &b)));
        let at = Matrix::from_vec(7, 5, (0..35).map(|i| a.get(i % 5, i / 5)).collect());
        assert!(close(&at.t_matmul(&b), &naive(&a, &b)));
        let ct = Matrix::from_vec(3, 5, (0..15).map(|i| c.get(i % 5, i / 5)).collect());
        assert!(close(&a.t_matmul(&a), &naive(&at, &a)));
        assert!(close(&c.matmul_t(&c), &naive(&c, &ct)));
    }

    #[test]
    fn block_views() {
        // multiply the middle 2x2 block of a 4x4 by identity
        let a = sample(4, 4, 9);
        let id = Matrix::<f64>::identity(2);
        let mut out = vec![0.0; 4];
        gemm(1.0, &a.data, View::block(4, 1, 2, 1, 2), &id.data, id.view(), 0.0, &mut out, View::dense(2, 2));
        assert_eq!(out, vec![a.get(1, 1), a.get(1, 2), a.get(2, 1), a.get(2, 2)]);
    }

    #[test]
    fn softmax_rows() {
        let mut row = vec![1.0f64, 2.0, 3.0, f64::NEG_INFINITY];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(row[3], 0.0);
        let mut ls = Vec::new();
        log_softmax(&[1.0f64, 2.0, 3.0], &mut ls);
        assert!((ls.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
