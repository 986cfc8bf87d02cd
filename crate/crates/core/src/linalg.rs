//! Small dense linear algebra: one-sided Jacobi SVD, Cholesky, and
//! power/inverse iteration for spectral extremes of larger matrices.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_JACOBI_SWEEPS: usize = 80;

/// Largest `min(rows, cols)` handled by the full Jacobi SVD in
/// [`spectral_extremes`]; beyond it iterative methods are used.
pub const FULL_SVD_LIMIT: usize = 64;

fn require_matrix<T: Scalar>(m: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if !m.is_matrix() {
        return Err(Error::shape(op, m.shape(), &[]));
    }
    m.check_finite(op)?;
    Ok((m.rows(), m.cols()))
}

/// Singular values (descending) and right singular vectors of a matrix.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    pub singular_values: Vec<T>,
    /// Columns are right singular vectors of the input, in the same order
    /// as `singular_values`. For wide inputs these belong to the transpose.
    pub v: Tensor<T>,
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Wide matrices are transposed first, so `singular_values` always has
/// `min(rows, cols)` entries.
pub fn jacobi_svd<T: Scalar>(m: &Tensor<T>) -> Result<Svd<T>> {
    let (p, q) = require_matrix(m, "jacobi_svd")?;
    let a = if p < q { m.transpose()? } else { m.clone() };
    let (p, q) = (a.rows(), a.cols());

    // column-major working copy
    let mut cols: Vec<Vec<T>> = (0..q).map(|j| (0..p).map(|i| a.at(i, j)).collect()).collect();
    let mut v: Vec<Vec<T>> = (0..q)
        .map(|j| (0..q).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let eps = T::epsilon();

    let mut converged = q < 2;
    let mut worst = T::zero();
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        worst = T::zero();
        for i in 0..q {
            for j in (i + 1)..q {
                let (alpha, beta, gamma) = {
                    let (ci, cj) = (&cols[i], &cols[j]);
                    let mut al = T::zero();
                    let mut be = T::zero();
                    let mut ga = T::zero();
                    for k in 0..p {
                        al = al + ci[k] * ci[k];
                        be = be + cj[k] * cj[k];
                        ga = ga + ci[k] * cj[k];
                    }
                    (al, be, ga)
                };
                if gamma == T::zero() {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(off);
                if off <= eps {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "jacobi_svd",
            iterations: MAX_JACOBI_SWEEPS,
            residual: worst.as_f64(),
        });
    }

    let norms: Vec<T> = cols.iter().map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());
    let singular_values = order.iter().map(|&k| norms[k]).collect();
    let mut vt = Tensor::zeros(&[q, q]);
    for (new_col, &k) in order.iter().enumerate() {
        for r in 0..q {
            vt.set(r, new_col, v[k][r]);
        }
    }
    Ok(Svd {
        singular_values,
        v: vt,
    })
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], i: usize, j: usize, c: T, s: T) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for k in 0..ci.len() {
        let (x, y) = (ci[k], cj[k]);
        ci[k] = c * x - s * y;
        cj[k] = s * x + c * y;
    }
}

/// Gram matrix of the smaller side: `MᵀM` when tall, `MMᵀ` when wide.
fn small_gram<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let t = m.transpose()?;
    if m.rows() >= m.cols() {
        t.matmul(m)
    } else {
        m.matmul(&t)
    }
}

fn sym_matvec<T: Scalar>(g: &Tensor<T>, x: &[T]) -> Vec<T> {
    (0..g.rows())
        .map(|i| g.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn normalize<T: Scalar>(x: &mut [T]) -> T {
    let n = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if n > T::zero() {
        for v in x.iter_mut() {
            *v = *v / n;
        }
    }
    n
}

fn start_vector<T: Scalar>(n: usize) -> Vec<T> {
    // deterministic, not orthogonal to any coordinate axis
    let mut v: Vec<T> = (0..n).map(|i| T::one() + T::lit(0.1 * ((i * 7 + 3) % 11) as f64)).collect();
    normalize(&mut v);
    v
}

/// Largest singular value by power iteration on the small Gram matrix.
pub fn power_iteration_sigma_max<T: Scalar>(m: &Tensor<T>, tol: T, max_iter: usize) -> Result<T> {
    require_matrix(m, "power_iteration")?;
    let g = small_gram(m)?;
    let mut v = start_vector::<T>(g.rows());
    let mut lambda = T::zero();
    for _ in 0..max_iter {
        let mut w = sym_matvec(&g, &v);
        let next = normalize(&mut w);
        if next == T::zero() {
            return Ok(T::zero());
        }
        let done = (next - lambda).abs() <= tol * next;
        lambda = next;
        v = w;
        if done {
            return Ok(lambda.sqrt());
        }
    }
    Err(Error::NoConvergence {
        what: "power_iteration",
        iterations: max_iter,
        residual: residual_norm(&g, &v, lambda).as_f64(),
    })
}

fn residual_norm<T: Scalar>(g: &Tensor<T>, v: &[T], lambda: T) -> T {
    sym_matvec(g, v)
        .iter()
        .zip(v)
        .map(|(&a, &b)| (a - lambda * b) * (a - lambda * b))
        .sum::<T>()
        .sqrt()
}

/// Smallest singular value by inverse iteration on the small Gram matrix.
/// Returns 0 when the Gram matrix is numerically singular.
pub fn inverse_iteration_sigma_min<T: Scalar>(m: &Tensor<T>, tol: T, max_iter: usize) -> Result<T> {
    require_matrix(m, "inverse_iteration")?;
    let g = small_gram(m)?;
    let Ok(l) = cholesky(&g) else {
        return Ok(T::zero());
    };
    let mut v = start_vector::<T>(g.rows());
    let mut mu = T::zero();
    for _ in 0..max_iter {
        let mut y = cholesky_solve(&l, &v);
        let next = normalize(&mut y);
        let done = (next - mu).abs() <= tol * next;
        mu = next;
        v = y;
        if done {
            return Ok((T::one() / mu).sqrt());
        }
    }
    Err(Error::NoConvergence {
        what: "inverse_iteration",
        iterations: max_iter,
        residual: residual_norm(&g, &v, T::one() / mu).as_f64(),
    })
}

/// `(σ_max, σ_min)` of `m` over its `min(rows, cols)` singular values.
pub fn spectral_extremes<T: Scalar>(m: &Tensor<T>, tol: T) -> Result<(T, T)> {
    let (p, q) = require_matrix(m, "spectral_extremes")?;
    if p.min(q) <= FULL_SVD_LIMIT {
        let s = jacobi_svd(m)?.singular_values;
        Ok((s[0], *s.last().unwrap()))
    } else {
        let max_iter = 100_000;
        Ok((
            power_iteration_sigma_max(m, tol, max_iter)?,
            inverse_iteration_sigma_min(m, tol, max_iter)?,
        ))
    }
}

/// Lower-triangular `L` with `L Lᵀ = a` for symmetric positive-definite `a`.
pub fn cholesky<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = require_matrix(a, "cholesky")?;
    if n != c {
        return Err(Error::shape("cholesky", a.shape(), &[n, n]));
    }
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut d = a.at(j, j);
        for k in 0..j {
            d = d - l.at(j, k) * l.at(j, k);
        }
        if !(d > T::zero()) {
            return Err(Error::Domain(format!(
                "matrix not positive definite (pivot {j} = {d})"
            )));
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s = s - l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor `L`.
pub fn cholesky_solve<T: Scalar>(l: &Tensor<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s = s - l.at(i, k) * y[k];
        }
        y[i] = s / l.at(i, i);
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s = s - l.at(k, i) * y[k];
        }
        y[i] = s / l.at(i, i);
    }
    y
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub fn spd_inverse<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let l = cholesky(a)?;
    let n = a.rows();
    let mut inv = Tensor::zeros(&[n, n]);
    let mut e = vec![T::zero(); n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = T::zero());
        e[j] = T::one();
        let col = cholesky_solve(&l, &e);
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
    }
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let s = (inv.at(i, j) + inv.at(j, i)) * half;
            inv.set(i, j, s);
            inv.set(j, i, s);
        }
    }
    Ok(inv)
}

/// `log det a` for symmetric positive-definite `a`.
pub fn spd_logdet<T: Scalar>(a: &Tensor<T>) -> Result<T> {
    let l = cholesky(a)?;
    Ok((0..a.rows()).map(|i| l.at(i, i).ln()).sum::<T>() * T::lit(2.0))
}

pub fn trace<T: Scalar>(a: &Tensor<T>) -> T {
    (0..a.rows().min(a.cols())).map(|i| a.at(i, i)).sum()
}

pub fn matvec<T: Scalar>(a: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    if !a.is_matrix() || a.cols() != x.len() {
        return Err(Error::shape("matvec", a.shape(), &[x.len()]));
    }
    Ok((0..a.rows())
        .map(|i| a.row(i).iter().zip(x).map(|(&p, &q)| p * q).sum())
        .collect())
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
