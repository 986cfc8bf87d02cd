//! Posterior-collapse diagnostics: active units, sample-wise KL and mutual information.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::objectives::kl_to_standard_normal;
use crate::Tensor;

pub const DEFAULT_EPS_AU: f64 = 0.01;
/// Largest number of posteriors entering the aggregate in [`mutual_information`].
pub const MI_MAX_POINTS: usize = 2048;

/// Encoder outputs over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    mu: Tensor,
    logvar: Tensor,
}

impl PosteriorSummary {
    pub fn new(mu: Tensor, logvar: Tensor) -> Result<Self> {
        if mu.shape() != logvar.shape() || !mu.is_matrix() {
            return Err(Error::shape("PosteriorSummary", mu.shape(), logvar.shape()));
        }
        mu.check_finite("posterior means")?;
        logvar.check_finite("posterior log-variances")?;
        Ok(Self { mu, logvar })
    }

    pub fn from_model(model: &Model, x: &Tensor) -> Result<Self> {
        let (mu, logvar) = model.encode(x)?;
        Self::new(mu, logvar)
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn logvar(&self) -> &Tensor {
        &self.logvar
    }

    pub fn n(&self) -> usize {
        self.mu.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.cols()
    }
}

/// Per-channel variance of the posterior means (`n − 1` denominator).
pub fn channel_variances(summary: &PosteriorSummary) -> Result<Vec<f64>> {
    let (n, c) = (summary.n(), summary.latent_dim());
    if n < 2 {
        return Err(Error::Contract(format!("active units need n >= 2 rows, got {n}")));
    }
    let mu = summary.mu();
    Ok((0..c)
        .map(|j| {
            let mean = (0..n).map(|i| mu.at(i, j)).sum::<f64>() / n as f64;
            (0..n).map(|i| (mu.at(i, j) - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .collect())
}

/// Fraction of latent channels whose posterior-mean variance reaches `eps_au`.
pub fn active_units(summary: &PosteriorSummary, eps_au: f64) -> Result<f64> {
    let var = channel_variances(summary)?;
    let active = var.iter().filter(|&&v| v >= eps_au).count();
    Ok(active as f64 / var.len() as f64)
}

/// Mean over rows of `KL(q(z|xᵢ) ‖ N(0, I))`.
pub fn samplewise_kl(summary: &PosteriorSummary) -> Result<f64> {
    Ok(kl_to_standard_normal(summary.mu(), summary.logvar())?.mean())
}

fn mix(mut h: u64) -> u64 {
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Content hash of one posterior, so per-row streams do not depend on row order.
fn row_hash(mu: &[f64], logvar: &[f64], seed: u64) -> u64 {
    mu.iter()
        .chain(logvar)
        .fold(mix(seed ^ 0x9e37_79b9_7f4a_7c15), |h, v| mix(h ^ v.to_bits()))
}

fn log_density(z: &[f64], mu: &[f64], logvar: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    -0.5 * z
        .iter()
        .zip(mu)
        .zip(logvar)
        .map(|((z, m), l)| ln_2pi + l + (z - m) * (z - m) * (-l).exp())
        .sum::<f64>()
}

/// Monte-Carlo `I(x; z)` under the aggregate posterior of the summary rows.
///
/// Each row draws `n_mc` codes from its own posterior; the aggregate density
/// is the log-sum-exp average over all (at most [`MI_MAX_POINTS`]) rows.
pub fn mutual_information_from_summary(summary: &PosteriorSummary, n_mc: usize, seed: u64) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::Contract("mutual information needs n_mc >= 1".into()));
    }
    let c = summary.latent_dim();
    let (mu, lv) = (summary.mu(), summary.logvar());
    let mut rows: Vec<(u64, usize)> = (0..summary.n())
        .map(|i| (row_hash(mu.row(i), lv.row(i), seed), i))
        .collect();
    rows.sort_unstable();
    rows.truncate(MI_MAX_POINTS);
    let n = rows.len();
    let ln_n = (n as f64).ln();

    let mut total = 0.0;
    let mut z = vec![0.0; c];
    let mut log_q = vec![0.0; n];
    for &(h, i) in &rows {
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let (mi, li) = (mu.row(i), lv.row(i));
        for _ in 0..n_mc {
            for k in 0..c {
                let e: f64 = StandardNormal.sample(&mut rng);
                z[k] = mi[k] + (0.5 * li[k]).exp() * e;
            }
            for (slot, &(_, j)) in log_q.iter_mut().zip(&rows) {
                *slot = log_density(&z, mu.row(j), lv.row(j));
            }
            let own = log_density(&z, mi, li);
            let max = log_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + log_q.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += own - (lse - ln_n);
        }
    }
    let mi = total / (n * n_mc) as f64;
    if !mi.is_finite() {
        return Err(Error::Numeric("mutual information estimate".into()));
    }
    Ok(mi)
}

pub fn mutual_information(model: &Model, x: &Tensor, n_mc: usize, seed: u64) -> Result<f64> {
    mutual_information_from_summary(&PosteriorSummary::from_model(model, x)?, n_mc, seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub latent_dim: usize,
    pub eps_au: f64,
    pub au: f64,
    pub kl: f64,
    pub mi: f64,
    pub seed: u64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "n,C,eps_au,au,kl,mi,seed";

    pub fn from_summary(summary: &PosteriorSummary, eps_au: f64, n_mc: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            n: summary.n(),
            latent_dim: summary.latent_dim(),
            eps_au,
            au: active_units(summary, eps_au)?,
            kl: samplewise_kl(summary)?,
            mi: mutual_information_from_summary(summary, n_mc, seed)?,
            seed,
        })
    }

    pub fn evaluate(model: &Model, x: &Tensor, eps_au: f64, n_mc: usize, seed: u64) -> Result<Self> {
        Self::from_summary(&PosteriorSummary::from_model(model, x)?, eps_au, n_mc, seed)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.n, self.latent_dim, self.eps_au, self.au, self.kl, self.mi, self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn summary(mu: Vec<Vec<f64>>, logvar: Vec<Vec<f64>>) -> PosteriorSummary {
        PosteriorSummary::new(Tensor::from_rows(&mu).unwrap(), Tensor::from_rows(&logvar).unwrap()).unwrap()
    }

    fn random_summary(n: usize, c: usize, seed: u64) -> PosteriorSummary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |lo: f64, hi: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..c).map(|_| rng.random_range(lo..hi)).collect()).collect()
        };
        let mu = draw(-2.0, 2.0);
        let lv = draw(-2.0, 0.5);
        summary(mu, lv)
    }

    #[test]
    fn au_examples() {
        let s = summary(vec![vec![1.0, 2.0]; 4], vec![vec![0.0; 2]; 4]);
        assert_eq!(active_units(&s, 0.01).unwrap(), 0.0);
        let mu = (0..4).map(|i| vec![5.0, i as f64]).collect();
        let s = summary(mu, vec![vec![0.0; 2]; 4]);
        let var = channel_variances(&s).unwrap();
        assert!((var[1] - 5.0 / 3.0).abs() < 1e-12);
        assert_eq!(active_units(&s, 0.01).unwrap(), 0.5);
    }

    #[test]
    fn au_needs_two_rows() {
        let s = summary(vec![vec![0.0]], vec![vec![0.0]]);
        assert!(matches!(active_units(&s, 0.01), Err(Error::Contract(_))));
    }

    #[test]
    fn au_monotone_and_shift_invariant() {
        let s = random_summary(50, 6, 1);
        let au: Vec<f64> = [0.0, 0.1, 0.5, 1.0, 1.5, 3.0]
            .iter()
            .map(|&e| active_units(&s, e).unwrap())
            .collect();
        assert!(au.windows(2).all(|w| w[0] >= w[1]));
        let shifted = s.mu().map(|v| v + 3.25);
        let s2 = PosteriorSummary::new(shifted, s.logvar().clone()).unwrap();
        assert_eq!(active_units(&s, 1.0).unwrap(), active_units(&s2, 1.0).unwrap());
    }

    #[test]
    fn kl_examples() {
        let s = summary(vec![vec![0.0; 3]; 5], vec![vec![0.0; 3]; 5]);
        assert_eq!(samplewise_kl(&s).unwrap(), 0.0);
        let s = summary(vec![vec![1.0, 0.0, 0.0]], vec![vec![0.0; 3]]);
        assert_eq!(samplewise_kl(&s).unwrap(), 0.5);
    }

    #[test]
    fn mi_single_row_is_zero() {
        let s = summary(vec![vec![0.3, -1.0]], vec![vec![-0.5, 0.2]]);
        assert_eq!(mutual_information_from_summary(&s, 4, 0).unwrap(), 0.0);
    }

    #[test]
    fn mi_identical_posteriors_is_zero() {
        let s = summary(vec![vec![0.3, -1.0]; 40], vec![vec![-0.5, 0.2]; 40]);
        assert!(mutual_information_from_summary(&s, 2, 0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mi_bounded_by_kl() {
        for seed in 0..5 {
            let s = random_summary(200, 3, seed);
            let mi = mutual_information_from_summary(&s, 1, seed).unwrap();
            let kl = samplewise_kl(&s).unwrap();
            assert!(mi >= -0.01 && mi <= kl + 0.05, "mi {mi} kl {kl}");
            // never above log n
            assert!(mi <= (200f64).ln() + 1e-9);
        }
    }

    #[test]
    fn metrics_row_order_invariant() {
        let s = random_summary(300, 4, 7);
        let perm: Vec<usize> = (0..300).rev().collect();
        let p = PosteriorSummary::new(s.mu().select_rows(&perm).unwrap(), s.logvar().select_rows(&perm).unwrap())
            .unwrap();
        let a = MetricsReport::from_summary(&s, 0.01, 1, 3).unwrap();
        let b = MetricsReport::from_summary(&p, 0.01, 1, 3).unwrap();
        assert_eq!(a.au, b.au);
        assert!((a.kl - b.kl).abs() < 1e-12);
        assert!((a.mi - b.mi).abs() < 1e-12);
    }

    #[test]
    fn csv_row_layout() {
        let r = MetricsReport {
            n: 10,
            latent_dim: 2,
            eps_au: 0.01,
            au: 0.5,
            kl: 1.25,
            mi: 0.75,
            seed: 4,
        };
        assert_eq!(r.csv_row(), "10,2,0.01,0.5,1.25,0.75,4");
        assert_eq!(MetricsReport::CSV_HEADER.split(',').count(), 7);
    }
}
