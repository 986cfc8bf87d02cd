//! Jacobians, spectral extremes, Laplace posteriors, bi-Lipschitz probes and
//! ε(x)-collapse profiles.

mod bilip;
mod collapse;
mod laplace;

pub use bilip::{bilipschitz_probe, probe_maps, nearest_rank_quantile, BiLipReport, ProbeConfig, ProbeRow};
pub use collapse::{collapse_profile, CollapseProfile, CollapseRecord, EpsFamily, Verdict};
pub use laplace::{kl_lower_bound, laplace_posterior, LaplaceResult};

use crate::error::{Error, Result};
use crate::nn::RowMap;
use crate::{Tape, Tensor};

/// `J[i][j] = ∂fᵢ/∂zⱼ` at `z`, one reverse sweep for all output rows.
///
/// The input is replicated into an `[out × in]` batch; the loss `Σᵢ out[i][i]`
/// then has the Jacobian as its gradient with respect to that batch.
pub fn jacobian(map: &dyn RowMap, z: &[f64]) -> Result<Tensor> {
    let (p, q) = (map.out_dim(), map.in_dim());
    if z.len() != q {
        return Err(Error::shape("jacobian", &[z.len()], &[q]));
    }
    let mut tape = Tape::new();
    let mut batch = Vec::with_capacity(p * q);
    for _ in 0..p {
        batch.extend_from_slice(z);
    }
    let input = tape.param(Tensor::new(&[p, q], batch)?);
    let out = map.trace(&mut tape, input)?;
    if tape.shape(out) != [p, p] {
        return Err(Error::shape("jacobian", tape.shape(out), &[p, p]));
    }
    let eye = tape.constant(Tensor::eye(p));
    let diag = tape.mul(out, eye)?;
    let loss = tape.sum(diag);
    let j = tape.backward(loss)?.take(input);
    j.check_finite("jacobian")?;
    Ok(j)
}

/// Central-difference Jacobian, for cross-checking [`jacobian`].
pub fn jacobian_fd(map: &dyn RowMap, z: &[f64], h: f64) -> Result<Tensor> {
    let (p, q) = (map.out_dim(), map.in_dim());
    if z.len() != q {
        return Err(Error::shape("jacobian_fd", &[z.len()], &[q]));
    }
    let mut batch = Vec::with_capacity(2 * q * q);
    for j in 0..q {
        for sign in [1.0, -1.0] {
            let mut zz = z.to_vec();
            zz[j] += sign * h;
            batch.extend(zz);
        }
    }
    let out = map.eval(&Tensor::new(&[2 * q, q], batch)?)?;
    let mut jac = Tensor::zeros(&[p, q]);
    for j in 0..q {
        for i in 0..p {
            jac.set(i, j, (out.at(2 * j, i) - out.at(2 * j + 1, i)) / (2.0 * h));
        }
    }
    jac.check_finite("finite-difference jacobian")?;
    Ok(jac)
}

/// `(σ_max, σ_min)` of `m`; see [`crate::linalg::spectral_extremes`].
pub fn spectral_extremes(m: &Tensor, tol: f64) -> Result<(f64, f64)> {
    crate::linalg::spectral_extremes(m, tol)
}

/// Radius of the centered ball with prior mass `1 − ζ`.
pub fn r_zeta(latent_dim: usize, zeta: f64) -> f64 {
    crate::special::r_zeta(latent_dim, zeta)
}
