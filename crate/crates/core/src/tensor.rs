//! Dense row-major `f64` tensors and a thin safe wrapper around a strided gemm kernel.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    /// Returns `None` when `data.len()` disagrees with the shape or an extent is zero.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Option<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return None;
        }
        Some(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.shape[self.shape.len() - 1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> Mat<'a> {
    /// Row-major `rows x cols` view.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Mat { data, rows, cols, row_stride: cols as isize, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        ((self.rows - 1) as isize * self.row_stride + (self.cols - 1) as isize * self.col_stride) as usize
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(alpha: f64, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    assert!(a.row_stride >= 0 && a.col_stride >= 0 && b.row_stride >= 0 && b.col_stride >= 0);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len(), "gemm view out of bounds");
    // Packing dominates the blocked kernel for very thin products; plain
    // loops over contiguous rows are faster there.
    if k <= SMALL && b.col_stride == 1 {
        return gemm_axpy(alpha, a, b, beta, &mut c[..m * n]);
    }
    if m <= SMALL && n <= SMALL && a.col_stride == 1 && b.row_stride == 1 {
        return gemm_dot(alpha, a, b, beta, &mut c[..m * n]);
    }
    // SAFETY: every element addressed by the strides lies inside the borrowed
    // slices (checked above), and `c` is exclusively borrowed for m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const SMALL: usize = 8;

fn scale_output(beta: f64, c: &mut [f64]) {
    if beta == 0.0 {
        c.fill(0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
}

/// Row `i` of `c` accumulates `a[i, p] * b[p, :]` over `p`; needs unit
/// column stride in `b`. Columns are processed in cache-sized blocks.
fn gemm_axpy(alpha: f64, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    const BLOCK: usize = 512;
    let n = b.cols;
    scale_output(beta, c);
    for j0 in (0..n).step_by(BLOCK) {
        let width = BLOCK.min(n - j0);
        for i in 0..a.rows {
            let c_blk = &mut c[i * n + j0..i * n + j0 + width];
            for p in 0..a.cols {
                let coef = alpha * a.data[(i as isize * a.row_stride + p as isize * a.col_stride) as usize];
                let start = (p as isize * b.row_stride) as usize + j0;
                let b_blk = &b.data[start..start + width];
                c_blk.iter_mut().zip(b_blk).for_each(|(o, x)| *o += coef * x);
            }
        }
    }
}

/// Dot product with four independent partial sums so the loop vectorizes.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (u, v) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += u[l] * v[l];
        }
    }
    let tail: f64 = xr.iter().zip(yr).map(|(u, v)| u * v).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Each `c[i, j]` is a dot product of contiguous rows of `a` and columns of `b`.
fn gemm_dot(alpha: f64, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    let (k, n) = (a.cols, b.cols);
    for i in 0..a.rows {
        let a_start = (i as isize * a.row_stride) as usize;
        let a_row = &a.data[a_start..a_start + k];
        for j in 0..n {
            let b_start = (j as isize * b.col_stride) as usize;
            let value = alpha * dot(a_row, &b.data[b_start..b_start + k]);
            let out = &mut c[i * n + j];
            *out = value + if beta == 0.0 { 0.0 } else { beta * *out };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(1.0, Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), 0.0, &mut c);
        let expect = naive(&a, &b, 2, 3, 4);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-14);
        }
        // (b^T a^T)^T = a b, check via the transposed product.
        let mut ct = vec![0.0; 8];
        gemm(1.0, Mat::new(&b, 3, 4).t(), Mat::new(&a, 2, 3).t(), 0.0, &mut ct);
        for i in 0..2 {
            for j in 0..4 {
                assert!((ct[j * 2 + i] - expect[i * 4 + j]).abs() < 1e-14);
            }
        }
        // beta accumulation
        gemm(2.0, Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), 1.0, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - 3.0 * y).abs() < 1e-13);
        }
    }

    proptest::proptest! {
        #[test]
        fn gemm_all_paths_match_naive(
            m in 1usize..14, k in 1usize..14, n in 1usize..14,
            ta in proptest::bool::ANY, tb in proptest::bool::ANY,
            beta in proptest::sample::select(vec![0.0, 1.0, -0.5]),
            seed in 0u64..1000,
        ) {
            let val = |i: usize, s: u64| ((i as u64 * 2654435761 + s) % 1000) as f64 / 500.0 - 1.0;
            let a: Vec<f64> = (0..m * k).map(|i| val(i, seed)).collect();
            let b: Vec<f64> = (0..k * n).map(|i| val(i, seed + 7)).collect();
            let c0: Vec<f64> = (0..m * n).map(|i| val(i, seed + 13)).collect();
            // Store the operands transposed when requested and view them back.
            let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
            let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
            let av = if ta { Mat::new(&at, k, m).t() } else { Mat::new(&a, m, k) };
            let bv = if tb { Mat::new(&bt, n, k).t() } else { Mat::new(&b, k, n) };
            let mut c = c0.clone();
            gemm(1.5, av, bv, beta, &mut c);
            let prod = naive(&a, &b, m, k, n);
            for i in 0..m * n {
                let expect = 1.5 * prod[i] + beta * c0[i];
                proptest::prop_assert!((c[i] - expect).abs() < 1e-12, "{} vs {}", c[i], expect);
            }
        }
    }

    #[test]
    fn from_vec_checks_shape() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_some());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_none());
        assert!(Tensor::from_vec(&[0, 3], vec![]).is_none());
    }
}
