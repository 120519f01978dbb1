//! Raw numeric kernels shared by forward and backward rules.

/// `c (+)= op(a) · op(b)` for one `m×k · k×n` product.
///
/// `a_t` means `a` is stored `k×m`; `b_t` means `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
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

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output `o[idx] = input[permuted idx]` where output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(input: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(input.len());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..input.len() {
        out.push(input[offset]);
        // odometer increment over the output index
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += src_strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
