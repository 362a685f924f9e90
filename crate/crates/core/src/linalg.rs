//! Small dense vector helpers and a safe wrapper over `matrixmultiply`.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn scale(alpha: f64, x: &mut [f64]) {
    for xi in x {
        *xi *= alpha;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Strided view of a dense matrix: element `(i, j)` lives at `i * row_stride + j * col_stride`.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Layout {
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Layout {
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
        (self.rows - 1) * self.row_stride as usize + (self.cols - 1) * self.col_stride as usize
    }
}

/// `c = alpha * a·b + beta * c`
#[allow(clippy::too_many_arguments)]
pub fn gemm(alpha: f64, a: &[f64], la: Layout, b: &[f64], lb: Layout, beta: f64, c: &mut [f64], lc: Layout) {
    assert_eq!(la.cols, lb.rows, "inner dimensions differ");
    assert_eq!((la.rows, lb.cols), (lc.rows, lc.cols), "output shape mismatch");
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    if la.cols == 0 {
        for i in 0..lc.rows {
            for j in 0..lc.cols {
                let k = i * lc.row_stride as usize + j * lc.col_stride as usize;
                c[k] *= beta;
            }
        }
        return;
    }
    assert!(la.max_offset() < a.len());
    assert!(lb.max_offset() < b.len());
    assert!(lc.max_offset() < c.len());
    // SAFETY: every access is within the bounds checked above and `c` is
    // uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr(),
            la.row_stride,
            la.col_stride,
            b.as_ptr(),
            lb.row_stride,
            lb.col_stride,
            beta,
            c.as_mut_ptr(),
            lc.row_stride,
            lc.col_stride,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(); // 4x3, used transposed
        let mut c = vec![1.0; 8]; // 2x4
        gemm(
            2.0,
            &a,
            Layout::row_major(2, 3),
            &b,
            Layout::row_major(4, 3).t(),
            0.5,
            &mut c,
            Layout::row_major(2, 4),
        );
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * b[j * 3 + k];
                }
                assert!((c[i * 4 + j] - (2.0 * s + 0.5)).abs() < 1e-12);
            }
        }
    }
}
