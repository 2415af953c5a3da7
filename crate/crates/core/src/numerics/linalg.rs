use super::{svd, Scalar, Tensor};
use crate::error::{Error, Result};

/// `c (m×n) = op(a) · op(b)`, or `c += op(a) · op(b)` when `accumulate` is set.
///
/// `op(a)` is `m×k`; with `trans_a` the slice holds the `k×m` matrix instead.
/// Same for `b` (`k×n`, stored `n×k` when transposed).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand too small"
    );
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        T::gemm_raw(
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

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros([m, n]);
    gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), false);
    Ok(out)
}

pub fn frobenius_norm<T: Scalar>(w: &Tensor<T>) -> T {
    let s: f64 = w.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
    T::lit(s.sqrt())
}

/// Cosine of the angle between two tensors viewed as flat vectors.
pub fn cosine_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.check_same_shape(b)?;
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm tensor".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Best rank-`r` factorization `b1 · b2` of `target` by truncated SVD.
///
/// `b1 = U_r · diag(σ_r)` and `b2 = V_rᵀ`.
pub fn least_squares_lowrank<T: Scalar>(target: &Tensor<T>, r: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (rows, cols) = target.dims2()?;
    let kmax = rows.min(cols);
    if r == 0 || r > kmax {
        return Err(Error::Dimension(format!(
            "rank {r} out of range 1..={kmax} for shape {:?}",
            target.shape()
        )));
    }
    let s = svd(target)?;
    let mut b1 = Tensor::zeros([rows, r]);
    let mut b2 = Tensor::zeros([r, cols]);
    for j in 0..r {
        let sigma = s.sigma[j];
        for i in 0..rows {
            b1.set2(i, j, T::lit(s.u.get2(i, j).as_f64() * sigma));
        }
        for i in 0..cols {
            b2.set2(j, i, s.v.get2(i, j));
        }
    }
    Ok((b1, b2))
}
