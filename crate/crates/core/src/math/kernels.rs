//! Thin wrappers over the GEMM kernel.

/// `c = a · b + beta · c` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]` row-major.
/// Operand strides are `(row_stride, col_stride)` so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        let last_a = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
        let last_b = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
        assert!(last_a < a.len() && last_b < b.len(), "gemm operand out of bounds");
    }
    // SAFETY: bounds of every operand were checked above; the kernel only
    // touches elements inside the described matrices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
