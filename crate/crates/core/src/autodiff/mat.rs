//! Dense row-major matrices and the GEMM kernel the tape is built on.

/// A dense row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix {rows}x{cols} from {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Strided matrix view used to express transposes and sub-blocks to GEMM.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> View<'a> {
    /// Sub-block of a row-major matrix with `cols` columns.
    pub fn block(m: &'a Mat, row0: usize, col0: usize) -> Self {
        Self {
            data: &m.data,
            offset: row0 * m.cols + col0,
            row_stride: m.cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }
}

/// `out[m×n] = beta·out + a[m×k] · b[k×n]`, with `out` a sub-block of a
/// row-major buffer with row stride `out_stride`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    out: &mut [f64],
    out_offset: usize,
    out_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for r in 0..m {
            for v in &mut out[out_offset + r * out_stride..out_offset + r * out_stride + n] {
                *v *= beta;
            }
        }
        return;
    }
    // Bounds check the farthest element each operand touches.
    let last = |v: &View<'_>, rows: usize, cols: usize| {
        v.offset as isize + (rows as isize - 1) * v.row_stride + (cols as isize - 1) * v.col_stride
    };
    assert!(last(&a, m, k) < a.data.len() as isize && last(&b, k, n) < b.data.len() as isize);
    assert!(out_offset + (m - 1) * out_stride + n <= out.len());
    // SAFETY: the asserts above bound every index GEMM reads or writes, and
    // `out` does not alias the inputs (it is a distinct &mut borrow).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr().add(b.offset),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr().add(out_offset),
            out_stride as isize,
            1,
        );
    }
}

/// Plain `a · b` for whole matrices.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols);
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(
        a.rows,
        a.cols,
        b.cols,
        View::block(a, 0, 0),
        View::block(b, 0, 0),
        0.0,
        &mut out.data,
        0,
        b.cols,
    );
    out
}
