use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, dot, spd_inverse, spd_logdet, trace};
use crate::nn::RowMap;
use crate::{Tape, Tensor};

use super::{jacobian, spectral_extremes};

const GRAD_TOL: f64 = 1e-8;
const MAX_GD_STEPS: usize = 5000;
const MAX_GN_STEPS: usize = 50;
const SPECTRAL_TOL: f64 = 1e-12;

/// Gaussian approximation `N(z0, Σ)` of `p(z | x)` around its mode.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplaceResult {
    pub z0: Vec<f64>,
    pub sigma: Tensor,
    /// `KL(N(z0, Σ) ‖ N(0, I))`.
    pub kl: f64,
    pub kappa_min: f64,
    pub paper_bound: f64,
    pub corrected_bound: f64,
    /// `‖x − D(z0)‖`.
    pub residual_norm: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// False when the mode search stopped on its step budget.
    pub converged: bool,
}

struct Objective<'a> {
    decoder: &'a dyn RowMap,
    x: &'a [f64],
    sigma2: f64,
}

impl Objective<'_> {
    /// `½‖x − D(z)‖²/σ² + ½‖z‖²` and its gradient.
    fn eval(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let zv = tape.param(Tensor::new(&[1, z.len()], z.to_vec())?);
        let out = self.decoder.trace(&mut tape, zv)?;
        let xv = tape.constant(Tensor::new(&[1, self.x.len()], self.x.to_vec())?);
        let r = tape.sub(xv, out)?;
        let r2 = tape.square(r);
        let data = tape.sum(r2);
        let data = tape.scale(data, 0.5 / self.sigma2);
        let z2 = tape.square(zv);
        let prior = tape.sum(z2);
        let prior = tape.scale(prior, 0.5);
        let f = tape.add(data, prior)?;
        let value = tape.value(f).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric("laplace objective".into()));
        }
        let g = tape.backward(f)?.take(zv).into_data();
        Ok((value, g))
    }

    fn residual_norm(&self, z: &[f64]) -> Result<f64> {
        let out = self.decoder.eval(&Tensor::new(&[1, z.len()], z.to_vec())?)?;
        Ok(out.data().iter().zip(self.x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Armijo backtracking along `dir` from `z`; returns the accepted point.
fn line_search(obj: &Objective, z: &[f64], f: f64, g: &[f64], dir: &[f64], mut step: f64) -> Result<Option<(Vec<f64>, f64, Vec<f64>, f64)>> {
    let slope = dot(g, dir);
    for _ in 0..60 {
        let cand: Vec<f64> = z.iter().zip(dir).map(|(z, d)| z + step * d).collect();
        let (fc, gc) = obj.eval(&cand)?;
        if fc <= f + 1e-4 * step * slope {
            return Ok(Some((cand, fc, gc, step)));
        }
        step *= 0.5;
    }
    Ok(None)
}

/// Laplace approximation of the posterior under `p(x|z) = N(D(z), σ² I)`.
///
/// The mode is found by gradient descent with backtracking, followed by
/// Gauss–Newton refinement; `Σ = (I + JᵀJ/σ²)⁻¹` uses the Jacobian at the mode.
pub fn laplace_posterior(decoder: &dyn RowMap, x: &[f64], sigma2: f64, z_init: &[f64]) -> Result<LaplaceResult> {
    if !(sigma2 > 0.0) {
        return Err(Error::Contract(format!("sigma2 must be positive, got {sigma2}")));
    }
    if x.len() != decoder.out_dim() || z_init.len() != decoder.in_dim() {
        return Err(Error::shape("laplace_posterior", &[x.len(), z_init.len()], &[decoder.out_dim(), decoder.in_dim()]));
    }
    let c = z_init.len();
    let obj = Objective { decoder, x, sigma2 };
    let mut z = z_init.to_vec();
    let (mut f, mut g) = obj.eval(&z)?;
    let mut iterations = 0;
    let mut step = 1.0;
    while norm(&g) > GRAD_TOL && iterations < MAX_GD_STEPS {
        let dir: Vec<f64> = g.iter().map(|v| -v).collect();
        match line_search(&obj, &z, f, &g, &dir, step)? {
            Some((zn, fn_, gn, taken)) => {
                (z, f, g) = (zn, fn_, gn);
                step = taken * 2.0;
            }
            None => break,
        }
        iterations += 1;
    }
    // Gauss–Newton polish: exact Newton for affine decoders
    for _ in 0..MAX_GN_STEPS {
        if norm(&g) <= 1e-13 * (1.0 + norm(&z)) {
            break;
        }
        let h = gauss_newton_hessian(&jacobian(decoder, &z)?, sigma2)?;
        let l = cholesky(&h)?;
        let dir: Vec<f64> = cholesky_solve(&l, &g).into_iter().map(|v| -v).collect();
        // near the mode f changes below round-off, so judge the full step by ‖g‖
        let full: Vec<f64> = z.iter().zip(&dir).map(|(z, d)| z + d).collect();
        let (ff, gf) = obj.eval(&full)?;
        if norm(&gf) < norm(&g) {
            (z, f, g) = (full, ff, gf);
        } else {
            match line_search(&obj, &z, f, &g, &dir, 0.5)? {
                Some((zn, fn_, gn, _)) if norm(&gn) < norm(&g) => (z, f, g) = (zn, fn_, gn),
                _ => break,
            }
        }
        iterations += 1;
    }
    let grad_norm = norm(&g);
    let j = jacobian(decoder, &z)?;
    let sigma = spd_inverse(&gauss_newton_hessian(&j, sigma2)?)?;
    let kl = 0.5 * (trace(&sigma) + dot(&z, &z) - spd_logdet(&sigma)? - c as f64);
    let (kappa_min, paper_bound, corrected_bound) = bounds(&j, sigma2)?;
    Ok(LaplaceResult {
        residual_norm: obj.residual_norm(&z)?,
        z0: z,
        sigma,
        kl,
        kappa_min,
        paper_bound,
        corrected_bound,
        grad_norm,
        iterations,
        converged: grad_norm <= GRAD_TOL,
    })
}

/// `I + JᵀJ / σ²`.
fn gauss_newton_hessian(j: &Tensor, sigma2: f64) -> Result<Tensor> {
    let mut h = j.transpose()?.matmul(j)?.map(|v| v / sigma2);
    for i in 0..h.rows() {
        h.set(i, i, h.at(i, i) + 1.0);
    }
    Ok(h)
}

fn bounds(j: &Tensor, sigma2: f64) -> Result<(f64, f64, f64)> {
    let c = j.cols() as f64;
    // κ_min = inf ‖Jv‖ over unit v, which vanishes on a wide Jacobian's kernel
    let kappa_min = if j.rows() < j.cols() { 0.0 } else { spectral_extremes(j, SPECTRAL_TOL)?.1 };
    let t = kappa_min * kappa_min / sigma2;
    let paper = 0.5 * c * t.ln_1p();
    let corrected = 0.5 * c * (t.ln_1p() - t / (1.0 + t));
    Ok((kappa_min, paper, corrected.max(0.0)))
}

/// `(paper_bound, corrected_bound)` from `κ_min = σ_min(J)`:
/// `(C/2)·log(1+t)` and `(C/2)·[log(1+t) − t/(1+t)]` with `t = κ_min²/σ²`.
pub fn kl_lower_bound(j: &Tensor, sigma2: f64) -> Result<(f64, f64)> {
    if !(sigma2 > 0.0) {
        return Err(Error::Contract(format!("sigma2 must be positive, got {sigma2}")));
    }
    let (_, p, c) = bounds(j, sigma2)?;
    Ok((p, c))
}
