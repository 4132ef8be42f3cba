//! Strided GEMM entry points over `matrixmultiply::dgemm`.

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
    pub offset: usize,
}

impl Mat {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
            offset: 0,
        }
    }

    /// Column block `[col0, col0 + cols)` of a dense `rows × total` matrix.
    pub fn block(rows: usize, total: usize, col0: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: total,
            col_stride: 1,
            offset: col0,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            offset: self.offset,
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c = beta * c + a · b`.
pub(crate) fn gemm(a: &[f64], am: Mat, b: &[f64], bm: Mat, beta: f64, c: &mut [f64], cm: Mat) {
    assert_eq!(am.cols, bm.rows, "gemm inner dimension");
    assert_eq!(am.rows, cm.rows, "gemm rows");
    assert_eq!(bm.cols, cm.cols, "gemm cols");
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    assert!(am.last_index() < a.len().max(1));
    assert!(bm.last_index() < b.len().max(1));
    assert!(cm.last_index() < c.len());
    if am.cols == 0 {
        for i in 0..cm.rows {
            for j in 0..cm.cols {
                c[cm.offset + i * cm.row_stride + j * cm.col_stride] *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm lies inside the bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            am.rows,
            am.cols,
            bm.cols,
            1.0,
            a.as_ptr().add(am.offset),
            am.row_stride as isize,
            am.col_stride as isize,
            b.as_ptr().add(bm.offset),
            bm.row_stride as isize,
            bm.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cm.offset),
            cm.row_stride as isize,
            cm.col_stride as isize,
        );
    }
}
