//! Thin safe wrapper over the BLAS-style matrix multiply.

use super::Scalar;

/// `c = a·b + beta·c` for row-major matrices, with optional logical
/// transposition of either operand (no data movement, just strides).
///
/// Logical sizes are `a: [m,k]`, `b: [k,n]`, `c: [m,n]`; a transposed operand
/// is stored as its flipped physical shape.
pub(crate) fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k, "gemm lhs size");
    debug_assert_eq!(b.len(), k * n, "gemm rhs size");
    debug_assert_eq!(c.len(), m * n, "gemm out size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
