//! Safe strided matrix views over `matrixmultiply`.
//!
//! Output rows are split into fixed blocks of [`ROW_BLOCK`] that may run on
//! separate rayon workers. The block size does not depend on the worker count,
//! so products are bit-identical for any `--threads` setting.

use rayon::prelude::*;

use crate::tensor::Scalar;

const ROW_BLOCK: usize = 64;

/// Read-only strided matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> Mat<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * rs + (cols - 1) * cs;
            assert!(last < data.len(), "matrix view exceeds its buffer");
        }
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn rows_from(self, start: usize, count: usize) -> Self {
        let offset = start * self.rs;
        Self {
            data: &self.data[offset..],
            rows: count,
            ..self
        }
    }
}

/// `c = alpha * a * b + beta * c`, with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm<T: Scalar>(alpha: T, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "output buffer has wrong size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    c.par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(blk, c_blk)| {
            let rows = c_blk.len() / n;
            let a_blk = a.rows_from(blk * ROW_BLOCK, rows);
            // SAFETY: the views were bounds-checked at construction and
            // `rows_from` only narrows them; `c_blk` is an exclusive slice.
            unsafe {
                T::gemm_raw(
                    rows,
                    k,
                    n,
                    alpha,
                    a_blk.data.as_ptr(),
                    a_blk.rs as isize,
                    a_blk.cs as isize,
                    b.data.as_ptr(),
                    b.rs as isize,
                    b.cs as isize,
                    beta,
                    c_blk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_triple_loop_across_blocks() {
        let (m, k, n) = (150, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|v| (v % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v % 5) as f64 * 0.5).collect();
        let mut c = vec![0.0; m * n];
        gemm(
            1.0,
            Mat::row_major(&a, m, k),
            Mat::row_major(&b, k, n),
            0.0,
            &mut c,
        );
        assert_eq!(c, naive(&a, &b, m, k, n));
    }

    #[test]
    fn transposed_views() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let mut c = vec![0.0; 4];
        // a * a^T
        gemm(
            1.0,
            Mat::row_major(&a, 2, 3),
            Mat::row_major(&a, 2, 3).t(),
            0.0,
            &mut c,
        );
        assert_eq!(c, vec![14.0, 32.0, 32.0, 77.0]);
    }
}
