//! Matrix product back ends.
//!
//! `gemm_ordered` accumulates every output as `((0 + a0*b0) + a1*b1) + ...`
//! in ascending inner index, which is what a naive triple loop does. The
//! `f32` path hands off to a blocked SIMD kernel and only agrees with the
//! naive loop up to rounding.

use super::Element;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// View of the transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view exceeds its buffer");
        }
    }
}

/// Contiguous row-major output matrix.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "output buffer size");
        Self { data, rows, cols }
    }
}

fn check_dims<T>(a: &MatRef<'_, T>, b: &MatRef<'_, T>, c: &MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!(a.rows, c.rows, "output rows");
    assert_eq!(b.cols, c.cols, "output cols");
    a.check();
    b.check();
}

pub fn gemm_ordered<T: Element>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: MatMut<'_, T>,
    accumulate: bool,
) {
    check_dims(&a, &b, &c);
    let n = c.cols;
    if !accumulate {
        c.data.fill(T::zero());
    }
    if n == 0 {
        return;
    }
    for (i, crow) in c.data.chunks_exact_mut(n).enumerate() {
        for k in 0..a.cols {
            let aik = a.data[i * a.row_stride + k * a.col_stride];
            // Skipping exact zeros leaves every sum bit-identical: the
            // accumulator starts at +0 and can never become -0.
            if aik == T::zero() {
                continue;
            }
            let base = k * b.row_stride;
            if b.col_stride == 1 {
                for (cv, &bv) in crow.iter_mut().zip(&b.data[base..base + n]) {
                    *cv = *cv + aik * bv;
                }
            } else {
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv = *cv + aik * b.data[base + j * b.col_stride];
                }
            }
        }
    }
}

pub fn sgemm_blocked(a: MatRef<'_, f32>, b: MatRef<'_, f32>, c: MatMut<'_, f32>, accumulate: bool) {
    check_dims(&a, &b, &c);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.data.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: dimensions and strides were validated against the buffers by
    // `check_dims`; `c` is an exclusive contiguous row-major borrow.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
