use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `W = U · diag(σ) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult<T = f32> {
    /// `rows × k` with orthonormal columns.
    pub u: Tensor<T>,
    /// Nonincreasing, nonnegative; `k = min(rows, cols)`.
    pub sigma: Vec<f64>,
    /// `cols × k` with orthonormal columns.
    pub v: Tensor<T>,
}

/// One-sided Jacobi SVD, computed in `f64` regardless of `T`.
///
/// Each column of `u` is signed so its largest-magnitude entry (first on ties)
/// is nonnegative, and the matching `v` column follows.
pub fn svd<T: Scalar>(w: &Tensor<T>) -> Result<SvdResult<T>> {
    let (rows, cols) = w.dims2()?;
    if !w.is_finite() {
        return Err(Error::Numerical("svd input contains non-finite values".into()));
    }
    let a: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
    let (u, sigma, v) = if rows >= cols {
        jacobi_tall(&a, rows, cols)?
    } else {
        let mut at = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                at[j * rows + i] = a[i * cols + j];
            }
        }
        let (vt, sigma, ut) = jacobi_tall(&at, cols, rows)?;
        (ut, sigma, vt)
    };
    let k = sigma.len();
    let (mut u, mut v) = (u, v);
    apply_sign_convention(&mut u, &mut v);
    Ok(SvdResult {
        u: Tensor::new([rows, k], to_row_major(&u, rows).into_iter().map(T::lit).collect())?,
        sigma,
        v: Tensor::new([cols, k], to_row_major(&v, cols).into_iter().map(T::lit).collect())?,
    })
}

type Columns = Vec<Vec<f64>>;

fn to_row_major(columns: &Columns, rows: usize) -> Vec<f64> {
    let k = columns.len();
    let mut out = vec![0.0; rows * k];
    for (j, col) in columns.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            out[i * k + j] = x;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns column lists `(u: rows×n, σ, v: n×n)` for `rows >= n`.
fn jacobi_tall(a: &[f64], rows: usize, n: usize) -> Result<(Columns, Vec<f64>, Columns)> {
    let mut u: Columns = (0..n).map(|j| (0..rows).map(|i| a[i * n + j]).collect()).collect();
    let mut v: Columns = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge after {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = u.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma_max = norms[order[0]];
    let tol = sigma_max * (rows.max(n) as f64) * f64::EPSILON;
    let mut sigma = Vec::with_capacity(n);
    let mut uu: Columns = Vec::with_capacity(n);
    let mut vv: Columns = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for &j in &order {
        let s = norms[j];
        vv.push(v[j].clone());
        if s > tol && s > 0.0 {
            sigma.push(s);
            uu.push(u[j].iter().map(|x| x / s).collect());
        } else {
            sigma.push(0.0);
            pending.push(uu.len());
            uu.push(vec![0.0; rows]);
        }
    }
    complete_basis(&mut uu, &pending, rows);
    Ok((uu, sigma, vv))
}

fn rotate(cols: &mut Columns, p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the `pending` columns with unit vectors orthogonal to every other column.
fn complete_basis(cols: &mut Columns, pending: &[usize], rows: usize) {
    if pending.is_empty() {
        return;
    }
    let mut filled: Vec<bool> = (0..cols.len()).map(|j| !pending.contains(&j)).collect();
    let mut candidate = 0;
    for &slot in pending {
        while candidate < rows {
            let mut e = vec![0.0; rows];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of Gram-Schmidt for stability
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if filled[j] {
                        let proj = dot(&e, c);
                        e.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                cols[slot] = e.into_iter().map(|x| x / norm).collect();
                filled[slot] = true;
                break;
            }
        }
    }
}

fn apply_sign_convention(u: &mut Columns, v: &mut Columns) {
    for (uc, vc) in u.iter_mut().zip(v.iter_mut()) {
        let mut best = 0;
        for (i, x) in uc.iter().enumerate() {
            if x.abs() > uc[best].abs() {
                best = i;
            }
        }
        if uc[best] < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{frobenius_norm, matmul};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn reconstruct(s: &SvdResult<f64>) -> Tensor<f64> {
        let k = s.sigma.len();
        let mut us = s.u.clone();
        let rows = us.shape()[0];
        for i in 0..rows {
            for j in 0..k {
                let x = us.get2(i, j) * s.sigma[j];
                us.set2(i, j, x);
            }
        }
        matmul(&us, &s.v.transpose().unwrap()).unwrap()
    }

    fn orthonormality_error(m: &Tensor<f64>) -> f64 {
        let g = matmul(&m.transpose().unwrap(), m).unwrap();
        g.sub(&Tensor::eye(g.shape()[0])).unwrap().max_abs()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([rows, cols], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn diagonal_values_sorted() {
        let s = svd(&Tensor::<f64>::diag(&[3.0, 4.0])).unwrap();
        assert_eq!(s.sigma, vec![4.0, 3.0]);
    }

    #[test]
    fn negative_diagonal_uses_magnitudes() {
        let s = svd(&Tensor::<f64>::diag(&[-3.0, 1.0, -5.0])).unwrap();
        assert_eq!(s.sigma, vec![5.0, 3.0, 1.0]);
        assert!(
            reconstruct(&s)
                .sub(&Tensor::diag(&[-3.0, 1.0, -5.0]))
                .unwrap()
                .max_abs()
                < 1e-12
        );
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, 2.0, 2.0];
        let v = [3.0, 4.0];
        let w = Tensor::<f64>::from_fn([3, 2], |i| u[i / 2] * v[i % 2]);
        let s = svd(&w).unwrap();
        assert!((s.sigma[0] - 15.0).abs() < 1e-12);
        assert!(s.sigma[1].abs() < 1e-12);
        assert!(orthonormality_error(&s.u) < 1e-12);
        assert!(orthonormality_error(&s.v) < 1e-12);
    }

    #[test]
    fn random_eight_by_five_reconstructs() {
        let w = random_matrix(8, 5, 3);
        let s = svd(&w).unwrap();
        let rel = frobenius_norm(&reconstruct(&s).sub(&w).unwrap()) / frobenius_norm(&w);
        assert!(rel < 1e-5, "{rel}");
    }

    #[test]
    fn wide_matrix_and_f32() {
        let w = random_matrix(3, 7, 11).cast::<f32>();
        let s = svd(&w).unwrap();
        assert_eq!(s.u.shape(), &[3, 3]);
        assert_eq!(s.v.shape(), &[7, 3]);
        let s64 = SvdResult {
            u: s.u.cast::<f64>(),
            sigma: s.sigma.clone(),
            v: s.v.cast::<f64>(),
        };
        let rel = frobenius_norm(&reconstruct(&s64).sub(&w.cast()).unwrap()) / frobenius_norm(&w.cast::<f64>());
        assert!(rel < 1e-5, "{rel}");
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        let s = svd(&Tensor::<f64>::zeros([4, 3])).unwrap();
        assert_eq!(s.sigma, vec![0.0; 3]);
        assert!(orthonormality_error(&s.u) < 1e-12);
        assert!(orthonormality_error(&s.v) < 1e-12);
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let w = random_matrix(6, 4, 5);
        let a = svd(&w).unwrap();
        let b = svd(&w.scale(1.0)).unwrap();
        assert!(a.u.bitwise_eq(&b.u) && a.v.bitwise_eq(&b.v));
        for j in 0..4 {
            let col: Vec<f64> = (0..6).map(|i| a.u.get2(i, j)).collect();
            let big = col
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(big >= 0.0);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut w = Tensor::<f64>::zeros([2, 2]);
        w.data_mut()[1] = f64::NAN;
        assert!(matches!(svd(&w), Err(Error::Numerical(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn svd_invariants(rows in 1usize..=64, cols in 1usize..=64, seed in any::<u64>()) {
            let w = random_matrix(rows, cols, seed);
            let s = svd(&w).unwrap();
            prop_assert!(s.sigma.windows(2).all(|p| p[0] >= p[1]));
            prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
            prop_assert!(orthonormality_error(&s.u) < 1e-5);
            prop_assert!(orthonormality_error(&s.v) < 1e-5);
            let rel = frobenius_norm(&reconstruct(&s).sub(&w).unwrap()) / frobenius_norm(&w);
            prop_assert!(rel < 1e-5);
            let energy: f64 = s.sigma.iter().map(|x| x * x).sum();
            let norm = frobenius_norm(&w);
            prop_assert!((norm * norm - energy).abs() <= 1e-4 * energy);
        }
    }
}
