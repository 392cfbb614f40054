//! Thin safe wrapper over `matrixmultiply::dgemm` for the convolution
//! hot path. All matrices are row-major; logical transposes are stride
//! swaps, not copies.

/// `c[m,n] = a(^T)[m,k] * b(^T)[k,n] + beta * c`.
///
/// `a_trans` means `a` is stored as its transpose (`k x m` row-major), and
/// likewise for `b_trans`.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "lhs buffer size");
    assert_eq!(b.len(), k * n, "rhs buffer size");
    assert_eq!(c.len(), m * n, "dst buffer size");
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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
