//! General matrix multiply over f32 storage with f64 accumulation.

/// Strided view of an `rows × cols` matrix inside a flat slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` block.
    pub fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

pub(crate) fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| f64::from(v)).collect()
}

/// `out (+)= a · b` where `out` is row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output extent");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds elements of `a.data` / `b.data`
    // for every (row, col) within the stated extents, and `out` holds exactly
    // rows·cols contiguous elements.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            1.0,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_view_matches_explicit_transpose() {
        // a: 2×3, b: 2×3 → a · bᵀ is 2×2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, -1.0, 2.0, 1.0, 0.0];
        let mut out = vec![0.0; 4];
        gemm(
            MatRef::row_major(&a, 2, 3),
            MatRef::transposed(&b, 2, 3),
            &mut out,
        );
        assert_eq!(out, vec![-2.0, 4.0, -2.0, 13.0]);
    }
}
