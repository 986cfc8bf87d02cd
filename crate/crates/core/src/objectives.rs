//! Loss terms of the training objective and the α warm-up schedule.
//!
//! Every term is summed over dimensions and averaged over the batch:
//! `total = β·KL + DR + α_t·LR`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{reparameterize_traced, Likelihood, Model, ModelVars};
use crate::{Tape, Tensor};

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || !a.is_matrix() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Per-row `KL(N(μ, diag e^logvar) ‖ N(0, I))`.
pub fn kl_to_standard_normal(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    check_same("kl_to_standard_normal", mu, logvar)?;
    let c = mu.cols();
    let rows = mu
        .data()
        .chunks(c)
        .zip(logvar.data().chunks(c))
        .map(|(m, l)| {
            0.5 * m
                .iter()
                .zip(l)
                .map(|(&m, &l)| m * m + l.exp() - l - 1.0)
                .sum::<f64>()
        })
        .collect();
    Ok(Tensor::from_vec(rows))
}

pub fn kl_traced(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = tape.square(mu);
    let var = tape.exp(logvar);
    let s = tape.add(m2, var)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -1.0);
    let rows = tape.sum_cols(s);
    Ok(tape.scale(rows, 0.5))
}

fn check_unit_interval(x: &Tensor) -> Result<()> {
    match x.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::Domain(format!(
            "bernoulli likelihood needs x in [0, 1], found {} at flat index {i}",
            x.data()[i]
        ))),
        None => Ok(()),
    }
}

/// Per-row `−log p(x | z)` given the raw decoder output (mean or logits).
pub fn reconstruction_nll(x: &Tensor, output: &Tensor, likelihood: Likelihood) -> Result<Tensor> {
    check_same("reconstruction_nll", x, output)?;
    let d = x.cols();
    let rows: Vec<f64> = match likelihood {
        Likelihood::Gaussian { sigma2 } => {
            let constant = 0.5 * d as f64 * (2.0 * std::f64::consts::PI * sigma2).ln();
            x.data()
                .chunks(d)
                .zip(output.data().chunks(d))
                .map(|(x, m)| {
                    let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                    0.5 * sq / sigma2 + constant
                })
                .collect()
        }
        Likelihood::Bernoulli => {
            check_unit_interval(x)?;
            x.data()
                .chunks(d)
                .zip(output.data().chunks(d))
                .map(|(x, l)| {
                    x.iter()
                        .zip(l)
                        .map(|(&x, &l)| crate::autodiff::softplus(l) - x * l)
                        .sum()
                })
                .collect()
        }
    };
    Ok(Tensor::from_vec(rows))
}

/// Traced per-row NLL; `x` must be a recorded constant of the same shape as `output`.
pub fn reconstruction_nll_traced(
    tape: &mut Tape,
    x: Var,
    output: Var,
    likelihood: Likelihood,
) -> Result<Var> {
    match likelihood {
        Likelihood::Gaussian { sigma2 } => {
            let d = tape.shape(x).get(1).copied().unwrap_or(1);
            let r = tape.sub(x, output)?;
            let sq = tape.square(r);
            let rows = tape.sum_cols(sq);
            let rows = tape.scale(rows, 0.5 / sigma2);
            let constant = 0.5 * d as f64 * (2.0 * std::f64::consts::PI * sigma2).ln();
            Ok(tape.add_scalar(rows, constant))
        }
        Likelihood::Bernoulli => {
            check_unit_interval(tape.value(x))?;
            let sp = tape.softplus(output);
            let xl = tape.mul(x, output)?;
            let e = tape.sub(sp, xl)?;
            Ok(tape.sum_cols(e))
        }
    }
}

/// Per-row `‖ẑ − z‖²`.
pub fn latent_reconstruction_loss(z: &Tensor, z_hat: &Tensor) -> Result<Tensor> {
    check_same("latent_reconstruction_loss", z, z_hat)?;
    let c = z.cols();
    let rows = z
        .data()
        .chunks(c)
        .zip(z_hat.data().chunks(c))
        .map(|(a, b)| a.iter().zip(b).map(|(a, b)| (b - a) * (b - a)).sum())
        .collect();
    Ok(Tensor::from_vec(rows))
}

pub fn latent_reconstruction_traced(tape: &mut Tape, z: Var, z_hat: Var) -> Result<Var> {
    let r = tape.sub(z_hat, z)?;
    let sq = tape.square(r);
    Ok(tape.sum_cols(sq))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    #[default]
    Linear,
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Schedule::Linear),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("linear")
    }
}

/// `α_t` for epoch `t`: linear ramp reaching `alpha_final` at `t = warmup`.
pub fn alpha_schedule(epoch: usize, warmup: usize, alpha_final: f64, schedule: Schedule) -> f64 {
    match schedule {
        Schedule::Linear => {
            let warmup = warmup.max(1);
            alpha_final * epoch.min(warmup) as f64 / warmup as f64
        }
    }
}

/// Where the LR term takes its latent codes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LatentSource {
    /// The reparameterized posterior sample also used for DR.
    #[default]
    Posterior,
    /// Fresh draws from `N(0, I)`.
    Prior,
}

impl FromStr for LatentSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(LatentSource::Posterior),
            "prior" => Ok(LatentSource::Prior),
            other => Err(Error::Config(format!("unknown lr_z_source {other:?}"))),
        }
    }
}

impl fmt::Display for LatentSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentSource::Posterior => "posterior",
            LatentSource::Prior => "prior",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub alpha_final: f64,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            alpha_final: 0.0,
            warmup_epochs: 10,
            schedule: Schedule::Linear,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.alpha_final >= 0.0 && self.alpha_final.is_finite()) {
            return Err(Error::Config(format!("alpha_T must be >= 0, got {}", self.alpha_final)));
        }
        if self.warmup_epochs == 0 {
            return Err(Error::Config("warmup epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn alpha_at(&self, epoch: usize) -> f64 {
        alpha_schedule(epoch, self.warmup_epochs, self.alpha_final, self.schedule)
    }
}

/// Batch-mean loss components and the weights applied to them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub dr: f64,
    pub kl: f64,
    pub lr: f64,
    pub total: f64,
    pub alpha_t: f64,
    pub beta: f64,
}

/// Standard-normal draws consumed by one evaluation of [`total_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    /// Reparameterization noise, `[n × C]`.
    pub eps: Tensor,
    /// Prior codes for the LR term; `None` reuses the posterior sample.
    pub lr_z: Option<Tensor>,
}

impl Noise {
    pub fn draw<R: Rng>(n: usize, c: usize, source: LatentSource, rng: &mut R) -> Self {
        let mut normal = |n: usize| {
            let v = (0..n * c).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::new(&[n, c], v).expect("positive dims")
        };
        let eps = normal(n);
        let lr_z = match source {
            LatentSource::Posterior => None,
            LatentSource::Prior => Some(normal(n)),
        };
        Self { eps, lr_z }
    }
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{name} loss term ({v})")))
    }
}

/// Records the full objective on `tape` and returns the scalar total.
pub fn trace_total_loss(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    x: &Tensor,
    weights: &LossWeights,
    epoch: usize,
    noise: &Noise,
) -> Result<(Var, LossBreakdown)> {
    if x.is_empty() || !x.is_matrix() {
        return Err(Error::Contract("total_loss needs a nonempty [n × D] batch".into()));
    }
    let alpha_t = weights.alpha_at(epoch);
    let xv = tape.constant(x.clone());
    let (mu, logvar) = model.encode_traced(tape, vars, xv)?;
    let eps = tape.constant(noise.eps.clone());
    let z = reparameterize_traced(tape, mu, logvar, eps)?;

    let out = model.decode_traced(tape, vars, z)?;
    let dr_rows = reconstruction_nll_traced(tape, xv, out, model.likelihood)?;
    let dr = tape.mean(dr_rows);
    let kl_rows = kl_traced(tape, mu, logvar)?;
    let kl = tape.mean(kl_rows);

    let lr_z = match &noise.lr_z {
        Some(p) => tape.constant(p.clone()),
        None => z,
    };
    let lr = if alpha_t > 0.0 {
        let xhat = model.decode_mean_traced(tape, vars, lr_z)?;
        let z_hat = model.encode_mu_traced(tape, vars, xhat)?;
        let rows = latent_reconstruction_traced(tape, lr_z, z_hat)?;
        Some(tape.mean(rows))
    } else {
        None
    };
    // with α_t = 0 the LR value is still reported, but off the gradient path
    let lr_value = match lr {
        Some(v) => tape.value(v).data()[0],
        None => {
            let codes = tape.value(lr_z).clone();
            let z_hat = model.encode_mu(&model.decode_mean(&codes)?)?;
            latent_reconstruction_loss(&codes, &z_hat)?.mean()
        }
    };

    let dr_value = finite("DR", tape.value(dr).data()[0])?;
    let kl_value = finite("KL", tape.value(kl).data()[0])?;
    let lr_value = finite("LR", lr_value)?;

    let weighted_kl = tape.scale(kl, weights.beta);
    let mut total = tape.add(weighted_kl, dr)?;
    if let Some(lr) = lr {
        let weighted_lr = tape.scale(lr, alpha_t);
        total = tape.add(total, weighted_lr)?;
    }
    let total_value = finite("total", tape.value(total).data()[0])?;
    Ok((
        total,
        LossBreakdown {
            dr: dr_value,
            kl: kl_value,
            lr: lr_value,
            total: total_value,
            alpha_t,
            beta: weights.beta,
        },
    ))
}

/// Objective value only.
pub fn total_loss(
    model: &Model,
    x: &Tensor,
    weights: &LossWeights,
    epoch: usize,
    noise: &Noise,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = model.register_frozen(&mut tape);
    Ok(trace_total_loss(&mut tape, model, &vars, x, weights, epoch, noise)?.1)
}

/// Objective value and its gradient for every parameter, in [`Model::params`] order.
pub fn total_loss_with_grad(
    model: &Model,
    x: &Tensor,
    weights: &LossWeights,
    epoch: usize,
    noise: &Noise,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let (total, breakdown) = trace_total_loss(&mut tape, model, &vars, x, weights, epoch, noise)?;
    let mut grads = tape.backward(total)?;
    let grads: Vec<Tensor> = vars.all().into_iter().map(|v| grads.take(v)).collect();
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("gradient of parameter tensor {i}")));
        }
    }
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::nn::{init_model, Architecture};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn kl_examples() {
        let k = kl_to_standard_normal(&rows(&[&[0.0, 0.0]]), &rows(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(k.data(), &[0.0]);
        let k = kl_to_standard_normal(&rows(&[&[1.0, 0.0]]), &rows(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(k.data(), &[0.5]);
        let k = kl_to_standard_normal(&rows(&[&[0.0]]), &rows(&[&[0.5f64.ln()]])).unwrap();
        assert!((k.data()[0] - 0.096_573_6).abs() < 1e-7);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // E_q[log q(z) − log p(z)] with z ~ N(0, 0.5)
        let var: f64 = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            let z = var.sqrt() * e;
            let log_q = -0.5 * (z * z / var + var.ln());
            let log_p = -0.5 * z * z;
            acc += log_q - log_p;
        }
        let mc = acc / n as f64;
        let exact = kl_to_standard_normal(&rows(&[&[0.0]]), &rows(&[&[var.ln()]])).unwrap().data()[0];
        assert!((mc - exact).abs() / exact < 0.01, "{mc} vs {exact}");
    }

    #[test]
    fn nll_examples() {
        let g = Likelihood::Gaussian { sigma2: 1.0 };
        let x = rows(&[&[0.3, 0.7]]);
        let v = reconstruction_nll(&x, &x, g).unwrap().data()[0];
        assert!((v - 1.837_877).abs() < 1e-6);
        let v = reconstruction_nll(&rows(&[&[2.0, 0.0]]), &rows(&[&[0.0, 0.0]]), g).unwrap().data()[0];
        assert!((v - (2.0 + (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        let v = reconstruction_nll(&x, &rows(&[&[0.0, 0.0]]), Likelihood::Bernoulli).unwrap().data()[0];
        assert!((v - 1.386_294).abs() < 1e-6);
    }

    #[test]
    fn bernoulli_rejects_out_of_range() {
        let r = reconstruction_nll(&rows(&[&[1.5]]), &rows(&[&[0.0]]), Likelihood::Bernoulli);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn bernoulli_is_stable_for_large_logits() {
        let v = reconstruction_nll(&rows(&[&[1.0, 0.0]]), &rows(&[&[800.0, -800.0]]), Likelihood::Bernoulli)
            .unwrap();
        assert!(v.data()[0].abs() < 1e-12);
    }

    #[test]
    fn lr_examples() {
        let z = rows(&[&[0.5, 0.5]]);
        assert_eq!(latent_reconstruction_loss(&z, &z).unwrap().data(), &[0.0]);
        let zh = rows(&[&[1.5, -0.5]]);
        assert_eq!(latent_reconstruction_loss(&z, &zh).unwrap().data(), &[2.0]);
    }

    #[test]
    fn lr_is_unit_gaussian_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let zh: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let log_q: f64 = z
                .iter()
                .zip(&zh)
                .map(|(a, m)| -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * (a - m).powi(2))
                .sum();
            let lr = latent_reconstruction_loss(&rows(&[&z]), &rows(&[&zh])).unwrap().data()[0];
            let want = -2.0 * log_q - 3.0 * (2.0 * std::f64::consts::PI).ln();
            assert!((lr - want).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_permutation_invariant() {
        let z = rows(&[&[0.1, 0.2, 0.3]]);
        let zh = rows(&[&[0.4, -0.2, 1.0]]);
        let zp = rows(&[&[0.3, 0.1, 0.2]]);
        let zhp = rows(&[&[1.0, 0.4, -0.2]]);
        assert_eq!(
            latent_reconstruction_loss(&z, &zh).unwrap(),
            latent_reconstruction_loss(&zp, &zhp).unwrap()
        );
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::Linear;
        assert_eq!(alpha_schedule(0, 10, 1.0, s), 0.0);
        assert_eq!(alpha_schedule(10, 10, 1.0, s), 1.0);
        assert_eq!(alpha_schedule(5, 10, 1.0, s), 0.5);
        assert_eq!(alpha_schedule(25, 10, 0.4, s), 0.4);
        let a: Vec<f64> = (0..20).map(|t| alpha_schedule(t, 7, 0.4, s)).collect();
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
    }

    fn small() -> (Model, Tensor, Noise) {
        let arch = Architecture {
            data_dim: 6,
            latent_dim: 2,
            encoder_hidden: vec![5],
            decoder_hidden: vec![4],
            activation: Activation::Tanh,
            likelihood: Likelihood::Gaussian { sigma2: 0.5 },
        };
        let model = init_model(&arch, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::new(&[4, 6], (0..24).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let noise = Noise::draw(4, 2, LatentSource::Posterior, &mut rng);
        (model, x, noise)
    }

    #[test]
    fn components_recombine() {
        let (model, x, noise) = small();
        let w = LossWeights {
            beta: 0.7,
            alpha_final: 1.3,
            warmup_epochs: 4,
            schedule: Schedule::Linear,
        };
        let b = total_loss(&model, &x, &w, 3, &noise).unwrap();
        assert!((b.total - (b.beta * b.kl + b.dr + b.alpha_t * b.lr)).abs() <= 1e-12);
        assert_eq!(b.alpha_t, 1.3 * 0.75);
    }

    #[test]
    fn alpha_zero_is_beta_vae() {
        let (model, x, noise) = small();
        let w = LossWeights {
            beta: 1.0,
            alpha_final: 0.0,
            ..LossWeights::default()
        };
        let b = total_loss(&model, &x, &w, 5, &noise).unwrap();
        assert!(b.lr > 0.0);
        assert_eq!(b.total, b.kl + b.dr);
        // plain evaluation of the negative ELBO for the same z draw
        let (mu, lv) = model.encode(&x).unwrap();
        let z = crate::nn::reparameterize(&mu, &lv, &noise.eps).unwrap();
        let dr = reconstruction_nll(&x, &model.decode(&z).unwrap(), model.likelihood).unwrap().mean();
        let kl = kl_to_standard_normal(&mu, &lv).unwrap().mean();
        assert!((b.total - (dr + kl)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut model, x, noise) = small();
        let w = LossWeights {
            beta: 1.0,
            alpha_final: 1.0,
            warmup_epochs: 1,
            schedule: Schedule::Linear,
        };
        let (_, grads) = total_loss_with_grad(&model, &x, &w, 1, &noise).unwrap();
        let h = 1e-6;
        for p in 0..grads.len() {
            for k in 0..grads[p].len() {
                let orig = model.params()[p].data()[k];
                model.params_mut()[p].data_mut()[k] = orig + h;
                let up = total_loss(&model, &x, &w, 1, &noise).unwrap().total;
                model.params_mut()[p].data_mut()[k] = orig - h;
                let down = total_loss(&model, &x, &w, 1, &noise).unwrap().total;
                model.params_mut()[p].data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let ad = grads[p].data()[k];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4);
                assert!(rel <= 1e-4, "param {p}[{k}]: ad {ad} fd {fd}");
            }
        }
    }

    #[test]
    fn prior_source_uses_given_codes() {
        let (model, x, mut noise) = small();
        noise.lr_z = Some(Tensor::zeros(&[4, 2]));
        let w = LossWeights {
            alpha_final: 1.0,
            warmup_epochs: 1,
            ..LossWeights::default()
        };
        let b = total_loss(&model, &x, &w, 1, &noise).unwrap();
        let zero = Tensor::zeros(&[4, 2]);
        let zh = model.encode_mu(&model.decode_mean(&zero).unwrap()).unwrap();
        let want = latent_reconstruction_loss(&zero, &zh).unwrap().mean();
        assert!((b.lr - want).abs() < 1e-12);
    }

    #[test]
    fn lr_gradient_skipped_when_alpha_zero() {
        let (model, x, noise) = small();
        let off = LossWeights::default();
        let (_, g0) = total_loss_with_grad(&model, &x, &off, 0, &noise).unwrap();
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let w = LossWeights {
            alpha_final: 1e-300,
            ..off
        };
        let (t, _) = trace_total_loss(&mut tape, &model, &vars, &x, &w, 5, &noise).unwrap();
        let mut g = tape.backward(t).unwrap();
        for (v, g0) in vars.all().into_iter().zip(&g0) {
            let g1 = g.take(v);
            for (a, b) in g1.data().iter().zip(g0.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_weights() {
        let w = LossWeights {
            beta: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
        let w = LossWeights {
            warmup_epochs: 0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
