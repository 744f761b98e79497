// Dense kernels. All `gemm*` variants accumulate into `out` and use a fixed
// loop order, so results are bitwise reproducible.

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    strided(a, (k, 1), b, (n, 1), out, m, k, n);
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    strided(a, (k, 1), b, (1, k), out, m, k, n);
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    strided(a, (1, k), b, (n, 1), out, k, m, n);
}

/// `out[m,n] += A·B` for row-major `out`, with `(row, col)` strides for `A [m,k]` and `B [k,n]`.
fn strided(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), out: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n, "gemm operand too short");
    // SAFETY: the extents checked above cover every element addressed by the
    // given strides, and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent lanes, combined in a fixed order
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            lanes[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

pub(crate) fn sum(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |acc, v| acc + v)
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (t, v) in y.iter_mut().zip(x) {
        *t += alpha * v;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in row.iter_mut() {
        *v = (*v - max).exp();
    }
    let total = sum(row);
    for v in row.iter_mut() {
        *v /= total;
    }
}
