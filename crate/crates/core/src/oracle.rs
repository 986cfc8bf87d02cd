//! Closed-form linear-Gaussian ground truth and small numeric integrators.
//!
//! For `z ~ N(0, I_C)` and `x | z ~ N(Wz + b, σ² I_D)` the posterior, the
//! mutual information and every Gaussian cross-entropy are available exactly,
//! which makes the analysis and training code checkable against them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, dot, matvec, spd_inverse, spd_logdet, trace};
use crate::nn::RowMap;
use crate::optim::{Adam, AdamConfig};
use crate::{Tape, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianModel {
    w: Tensor,
    b: Tensor,
    sigma2: f64,
}

impl LinearGaussianModel {
    /// `w: [D × C]`, `b: [D]`.
    pub fn new(w: Tensor, b: Tensor, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Spec(format!("sigma2 must be positive, got {sigma2}")));
        }
        if !w.is_matrix() || b.shape() != [w.rows()] {
            return Err(Error::shape("LinearGaussianModel", w.shape(), b.shape()));
        }
        Ok(Self { w, b, sigma2 })
    }

    /// Entries of `W` and `b` uniform in `[-scale, scale]`.
    pub fn random<R: Rng>(data_dim: usize, latent_dim: usize, scale: f64, sigma2: f64, rng: &mut R) -> Result<Self> {
        let w = (0..data_dim * latent_dim).map(|_| rng.random_range(-scale..scale)).collect();
        let b = (0..data_dim).map(|_| rng.random_range(-scale..scale)).collect();
        Self::new(Tensor::new(&[data_dim, latent_dim], w)?, Tensor::from_vec(b), sigma2)
    }

    pub fn w(&self) -> &Tensor {
        &self.w
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn data_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.cols()
    }

    /// Joint draws `(z, x)` of shapes `[n × C]`, `[n × D]`.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<(Tensor, Tensor)> {
        let (d, c) = (self.data_dim(), self.latent_dim());
        let z: Vec<f64> = (0..n * c).map(|_| rng.sample(StandardNormal)).collect();
        let z = Tensor::new(&[n, c], z)?;
        let mut x = self.decode(&z)?;
        let sd = self.sigma2.sqrt();
        for v in x.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += sd * e;
        }
        debug_assert_eq!(x.cols(), d);
        Ok((z, x))
    }

    /// Row-wise `Wz + b`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut out = z.matmul(&self.w.transpose()?)?;
        let d = self.data_dim();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(self.b.data()) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// `I + WᵀW / σ²`, the posterior precision.
    pub fn posterior_precision(&self) -> Result<Tensor> {
        let mut p = self.w.transpose()?.matmul(&self.w)?.map(|v| v / self.sigma2);
        for i in 0..p.rows() {
            p.set(i, i, p.at(i, i) + 1.0);
        }
        Ok(p)
    }
}

impl RowMap for LinearGaussianModel {
    fn in_dim(&self) -> usize {
        self.latent_dim()
    }
    fn out_dim(&self) -> usize {
        self.data_dim()
    }
    fn trace(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let w = tape.constant(self.w.clone());
        let b = tape.constant(self.b.clone());
        tape.linear(input, w, b)
    }
}

/// Posterior `p(z | x) = N(mean, Σ)` for one observation `x: [D]`.
pub fn exact_posterior(model: &LinearGaussianModel, x: &[f64]) -> Result<(Vec<f64>, Tensor)> {
    if x.len() != model.data_dim() {
        return Err(Error::shape("exact_posterior", &[x.len()], &[model.data_dim()]));
    }
    let sigma = spd_inverse(&model.posterior_precision()?)?;
    let r: Vec<f64> = x.iter().zip(model.b.data()).map(|(x, b)| (x - b) / model.sigma2).collect();
    let wt_r = matvec(&model.w.transpose()?, &r)?;
    let mean = matvec(&sigma, &wt_r)?;
    Ok((mean, sigma))
}

/// `I(Z; X) = ½ log det(I + WᵀW / σ²)`.
pub fn exact_mi(model: &LinearGaussianModel) -> Result<f64> {
    Ok(0.5 * spd_logdet(&model.posterior_precision()?)?)
}

/// `KL(N(m0, s0) ‖ N(m1, s1))` for full covariances.
pub fn gaussian_kl(m0: &[f64], s0: &Tensor, m1: &[f64], s1: &Tensor) -> Result<f64> {
    let c = m0.len();
    if m1.len() != c || s0.shape() != [c, c] || s1.shape() != [c, c] {
        return Err(Error::shape("gaussian_kl", s0.shape(), s1.shape()));
    }
    let l1 = cholesky(s1)?;
    let mut tr = 0.0;
    for j in 0..c {
        let col: Vec<f64> = (0..c).map(|i| s0.at(i, j)).collect();
        tr += cholesky_solve(&l1, &col)[j];
    }
    let diff: Vec<f64> = m1.iter().zip(m0).map(|(a, b)| a - b).collect();
    let maha = dot(&diff, &cholesky_solve(&l1, &diff));
    Ok(0.5 * (tr + maha - c as f64 + spd_logdet(s1)? - spd_logdet(s0)?))
}

/// `q(z | x) = N(Ax + c, S)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianConditional {
    pub a: Tensor,
    pub c: Vec<f64>,
    pub cov: Tensor,
}

impl GaussianConditional {
    pub fn new(a: Tensor, c: Vec<f64>, cov: Tensor) -> Result<Self> {
        let k = c.len();
        if !a.is_matrix() || a.rows() != k || cov.shape() != [k, k] {
            return Err(Error::shape("GaussianConditional", a.shape(), cov.shape()));
        }
        cholesky(&cov)?;
        Ok(Self { a, c, cov })
    }

    /// The exact posterior of `model`, which is affine in `x`.
    pub fn exact_posterior_of(model: &LinearGaussianModel) -> Result<Self> {
        let sigma = spd_inverse(&model.posterior_precision()?)?;
        let a = sigma.matmul(&model.w.transpose()?)?.map(|v| v / model.sigma2);
        let c = matvec(&a, model.b.data())?.into_iter().map(|v| -v).collect();
        Self::new(a, c, sigma)
    }

    /// `q(z | x) = p(z)`, ignoring `x`.
    pub fn prior(latent_dim: usize, data_dim: usize) -> Self {
        Self {
            a: Tensor::zeros(&[latent_dim, data_dim]),
            c: vec![0.0; latent_dim],
            cov: Tensor::eye(latent_dim),
        }
    }

    pub fn mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut m = matvec(&self.a, x)?;
        for (m, c) in m.iter_mut().zip(&self.c) {
            *m += c;
        }
        Ok(m)
    }
}

/// A conditional density over latents usable by [`lr_decomposition_check`].
pub trait ConditionalDensity {
    fn log_density(&self, z: &[f64], x: &[f64]) -> Result<f64>;
    /// The Gaussian form, when there is one.
    fn as_gaussian(&self) -> Option<&GaussianConditional>;
}

impl ConditionalDensity for GaussianConditional {
    fn log_density(&self, z: &[f64], x: &[f64]) -> Result<f64> {
        let m = self.mean(x)?;
        let l = cholesky(&self.cov)?;
        let diff: Vec<f64> = z.iter().zip(&m).map(|(a, b)| a - b).collect();
        let maha = dot(&diff, &cholesky_solve(&l, &diff));
        let k = z.len() as f64;
        Ok(-0.5 * (k * LN_2PI + spd_logdet(&self.cov)? + maha))
    }

    fn as_gaussian(&self) -> Option<&GaussianConditional> {
        Some(self)
    }
}

/// Terms of `L_LR = H(Z|X) + E_x[KL(p(z|x) ‖ q(z|x))]` for one model and `q`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrDecomposition {
    pub l_lr: f64,
    pub h_z_given_x: f64,
    pub e_kl: f64,
    pub gap: f64,
    /// Monte-Carlo standard error of `gap`.
    pub gap_se: f64,
    /// `I(Z;X) − (H(Z) − L_LR)`; nonnegative up to sampling error.
    pub mi_bound_slack: f64,
    pub n_mc: usize,
    pub seed: u64,
}

/// Monte-Carlo check of the latent-reconstruction cross-entropy identity.
pub fn lr_decomposition_check(
    model: &LinearGaussianModel,
    q: &dyn ConditionalDensity,
    n_mc: usize,
    seed: u64,
) -> Result<LrDecomposition> {
    let gq = q
        .as_gaussian()
        .ok_or_else(|| Error::Contract("lr_decomposition_check needs a Gaussian q(z|x)".into()))?;
    let c = model.latent_dim();
    if gq.c.len() != c || gq.a.cols() != model.data_dim() {
        return Err(Error::shape("lr_decomposition_check", gq.a.shape(), model.w.shape()));
    }
    if n_mc < 2 {
        return Err(Error::Contract("lr_decomposition_check needs n_mc >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (z, x) = model.sample(n_mc, &mut rng)?;
    let sigma = spd_inverse(&model.posterior_precision()?)?;
    let h_z_given_x = 0.5 * (c as f64 * (LN_2PI + 1.0) + spd_logdet(&sigma)?);

    let mut ce = Vec::with_capacity(n_mc);
    let mut kl = Vec::with_capacity(n_mc);
    for i in 0..n_mc {
        ce.push(-q.log_density(z.row(i), x.row(i))?);
        let (pm, ps) = exact_posterior(model, x.row(i))?;
        kl.push(gaussian_kl(&pm, &ps, &gq.mean(x.row(i))?, &gq.cov)?);
    }
    let n = n_mc as f64;
    let l_lr = ce.iter().sum::<f64>() / n;
    let e_kl = kl.iter().sum::<f64>() / n;
    let g: Vec<f64> = ce.iter().zip(&kl).map(|(a, k)| a - h_z_given_x - k).collect();
    let gap = g.iter().sum::<f64>() / n;
    let var = g.iter().map(|v| (v - gap).powi(2)).sum::<f64>() / (n - 1.0);
    let h_z = 0.5 * c as f64 * (LN_2PI + 1.0);
    Ok(LrDecomposition {
        l_lr,
        h_z_given_x,
        e_kl,
        gap,
        gap_se: (var / n).sqrt(),
        mi_bound_slack: exact_mi(model)? - (h_z - l_lr),
        n_mc,
        seed,
    })
}

/// Riemann-sum `Σ p log(p/q) · step` over aligned grids.
pub fn grid_kl(p: &[f64], q: &[f64], step: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("grid_kl", &[p.len()], &[q.len()]));
    }
    if !(step > 0.0) {
        return Err(Error::Contract(format!("grid step must be positive, got {step}")));
    }
    let mut acc = 0.0;
    for (i, (&p, &q)) in p.iter().zip(q).enumerate() {
        if p < 0.0 || q < 0.0 || !p.is_finite() || !q.is_finite() {
            return Err(Error::Domain(format!("densities must be finite and >= 0 (grid point {i})")));
        }
        if p == 0.0 {
            continue;
        }
        if q == 0.0 {
            return Err(Error::Support(format!("q vanishes where p > 0 at grid point {i}")));
        }
        acc += p * (p / q).ln();
    }
    Ok(acc * step)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymmetricFitConfig {
    pub n: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SymmetricFitConfig {
    fn default() -> Self {
        Self {
            n: 4096,
            epochs: 40,
            batch_size: 128,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// Encoder `q(z|x) = N(Ax + c, diag e^l)` learned against a fixed decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricFit {
    pub encoder: GaussianConditional,
    /// Mean over the training `x` of `KL(q(z|x) ‖ p(z|x))`, after each epoch (index 0 is the initial encoder).
    pub kl_per_epoch: Vec<f64>,
}

fn mean_kl_to_posterior(model: &LinearGaussianModel, q: &GaussianConditional, x: &Tensor) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..x.rows() {
        let (pm, ps) = exact_posterior(model, x.row(i))?;
        acc += gaussian_kl(&q.mean(x.row(i))?, &q.cov, &pm, &ps)?;
    }
    Ok(acc / x.rows() as f64)
}

/// Trains a Gaussian encoder with the symmetric loss `DR + LR` on joint
/// draws from `model`, whose decoder stays fixed.
///
/// `DR = E_q[−log p(x|z)]` uses one reparameterized draw per row;
/// `LR = −log q(zᵢ|xᵢ)` uses the generating pair `(zᵢ, xᵢ)`.
pub fn fit_symmetric_encoder(model: &LinearGaussianModel, cfg: &SymmetricFitConfig) -> Result<SymmetricFit> {
    let (d, c) = (model.data_dim(), model.latent_dim());
    if cfg.n == 0 || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("symmetric fit needs n, batch_size, epochs >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (z_all, x_all) = model.sample(cfg.n, &mut rng)?;

    // start at the prior
    let mut params = vec![Tensor::zeros(&[c, d]), Tensor::zeros(&[c]), Tensor::zeros(&[c])];
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &params.iter().collect::<Vec<_>>(),
    );
    let current = |p: &[Tensor]| -> Result<GaussianConditional> {
        let mut cov = Tensor::zeros(&[c, c]);
        for k in 0..c {
            cov.set(k, k, p[2].data()[k].exp());
        }
        GaussianConditional::new(p[0].clone(), p[1].data().to_vec(), cov)
    };
    let mut kl_per_epoch = vec![mean_kl_to_posterior(model, &current(&params)?, &x_all)?];

    let mut order: Vec<usize> = (0..cfg.n).collect();
    for _ in 0..cfg.epochs {
        crate::data::shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = x_all.select_rows(chunk)?;
            let z = z_all.select_rows(chunk)?;
            let m = chunk.len();
            let eps: Vec<f64> = (0..m * c).map(|_| rng.sample(StandardNormal)).collect();
            let mut tape = Tape::new();
            let a = tape.param(params[0].clone());
            let cb = tape.param(params[1].clone());
            let l = tape.param(params[2].clone());
            let xv = tape.constant(x);
            let zv = tape.constant(z);
            let ev = tape.constant(Tensor::new(&[m, c], eps)?);
            let zero = tape.constant(Tensor::zeros(&[m, c]));
            let mean = tape.linear(xv, a, cb)?;
            let logvar = tape.add_row(zero, l)?;

            // DR through a reparameterized draw and the fixed decoder
            let zs = crate::nn::reparameterize_traced(&mut tape, mean, logvar, ev)?;
            let xhat = model.trace(&mut tape, zs)?;
            let dr = crate::objectives::reconstruction_nll_traced(
                &mut tape,
                xv,
                xhat,
                crate::nn::Likelihood::Gaussian { sigma2: model.sigma2 },
            )?;
            // LR as the Gaussian cross-entropy of the generating code
            let r = tape.sub(zv, mean)?;
            let r2 = tape.square(r);
            let neg = tape.scale(logvar, -1.0);
            let prec = tape.exp(neg);
            let quad = tape.mul(r2, prec)?;
            let terms = tape.add(quad, logvar)?;
            let terms = tape.add_scalar(terms, LN_2PI);
            let lr = tape.sum_cols(terms);
            let lr = tape.scale(lr, 0.5);

            let both = tape.add(dr, lr)?;
            let loss = tape.mean(both);
            tape.value(loss).check_finite("symmetric loss")?;
            let mut g = tape.backward(loss)?;
            let grads = [g.take(a), g.take(cb), g.take(l)];
            opt.step(params.iter_mut().collect(), &grads)?;
        }
        kl_per_epoch.push(mean_kl_to_posterior(model, &current(&params)?, &x_all)?);
    }
    Ok(SymmetricFit {
        encoder: current(&params)?,
        kl_per_epoch,
    })
}

/// Mean `KL(N(m₀(x), S₀) ‖ N(m₁(x), S₁))` over rows of `x`.
pub fn mean_conditional_kl(p: &GaussianConditional, q: &GaussianConditional, x: &Tensor) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..x.rows() {
        acc += gaussian_kl(&p.mean(x.row(i))?, &p.cov, &q.mean(x.row(i))?, &q.cov)?;
    }
    Ok(acc / x.rows() as f64)
}

/// `½ (tr Σ + mᵀm − log det Σ − C)`, the KL of `N(m, Σ)` to `N(0, I)`.
pub fn kl_to_prior(mean: &[f64], sigma: &Tensor) -> Result<f64> {
    let c = mean.len() as f64;
    Ok(0.5 * (trace(sigma) + dot(mean, mean) - spd_logdet(sigma)? - c))
}
