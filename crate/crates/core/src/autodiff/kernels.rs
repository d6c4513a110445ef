//! Dense kernels shared by the forward, reverse and tangent sweeps.

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape `[m, k]` and `op(b)`
/// of shape `[k, n]`. A transposed operand is stored in its untransposed
/// row-major form (`[k, m]` for `a`, `[n, k]` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the length assertions above guarantee every strided access made
    // by dgemm for an (m, k, n) product stays inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `[a, b, c, d] -> [a, c, b, d]`
pub(crate) fn permute_0213(src: &[f64], dims: [usize; 4], dst: &mut [f64]) {
    let [a, b, c, d] = dims;
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let t = ((i * c + k) * b + j) * d;
                dst[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
}
