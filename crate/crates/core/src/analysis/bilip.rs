use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{DecoderMap, Model, RoundTripMap, RowMap};
use crate::Tensor;

use super::{jacobian, r_zeta, spectral_extremes};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Prior mass left outside the probed ball of radius `R_ζ`.
    pub zeta: f64,
    /// Quantile slack: `L_f` and `η` are `(1 − ϱ/2)` quantiles.
    pub varrho: f64,
    pub ball_radius: f64,
    pub n_probe_points: usize,
    pub n_pairs_per_ball: usize,
    pub power_iter_tol: f64,
    pub seed: u64,
    /// Reconstruction-loss thresholds, recorded with the report.
    pub tau_r: Option<f64>,
    pub tau_l: Option<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            zeta: 0.05,
            varrho: 0.1,
            ball_radius: 0.1,
            n_probe_points: 64,
            n_pairs_per_ball: 8,
            power_iter_tol: 1e-10,
            seed: 0,
            tau_r: None,
            tau_l: None,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.zeta) || !unit(self.varrho) {
            return Err(Error::Config(format!(
                "zeta and varrho must lie in (0, 1), got {} and {}",
                self.zeta, self.varrho
            )));
        }
        if !(self.ball_radius > 0.0) {
            return Err(Error::Config(format!("ball radius must be positive, got {}", self.ball_radius)));
        }
        if self.n_probe_points == 0 {
            return Err(Error::Config("need at least one probe point".into()));
        }
        if !(self.power_iter_tol > 0.0) {
            return Err(Error::Config("power iteration tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Measurements at one probe point `z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeRow {
    pub z_norm: f64,
    /// `‖J_D(z)‖_σ`.
    pub a: f64,
    /// `‖J_{E∘D}(z) − I‖_σ`.
    pub b: f64,
    pub sigma_min_d: f64,
    /// Extremes of `‖D(z₁) − D(z₂)‖ / ‖z₁ − z₂‖` over pairs in `B(z, r)`; NaN without pairs.
    pub min_ratio: f64,
    pub max_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLipReport {
    pub config: ProbeConfig,
    pub r_zeta: f64,
    pub rows: Vec<ProbeRow>,
    pub l_f: f64,
    pub eta: f64,
    /// `max(L_f, 1/(1 − η))`; `None` when `η ≥ 1`.
    pub l: Option<f64>,
    pub frac_b_below_one: f64,
    pub median_a: f64,
    pub median_b: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl BiLipReport {
    pub const CSV_HEADER: &'static str = "z_norm,A,B,sigma_min_D,min_ratio,max_ratio";

    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| format!("{},{},{},{},{},{}", r.z_norm, r.a, r.b, r.sigma_min_d, r.min_ratio, r.max_ratio))
            .collect()
    }

    /// Summary in the same columns: medians of A, B and the ratio extremes.
    pub fn csv_summary(&self) -> String {
        format!("summary,{},{},,{},{}", self.median_a, self.median_b, self.min_ratio, self.max_ratio)
    }

    pub fn l_display(&self) -> String {
        self.l.map_or_else(|| "undefined".to_string(), |l| l.to_string())
    }
}

/// Nearest-rank `p`-quantile: the `⌈p·n⌉`-th smallest sample.
pub fn nearest_rank_quantile(samples: &[f64], p: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

fn sample_in_ball<R: Rng>(c: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    let dir: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u: f64 = rng.random();
    let r = radius * u.powf(1.0 / c as f64);
    dir.into_iter().map(|v| v / n * r).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Probes `decoder` and the latent round trip `round_trip ≈ E∘D` at prior
/// samples inside the `R_ζ` ball.
pub fn probe_maps(decoder: &dyn RowMap, round_trip: &dyn RowMap, cfg: &ProbeConfig) -> Result<BiLipReport> {
    cfg.validate()?;
    let c = decoder.in_dim();
    if round_trip.in_dim() != c || round_trip.out_dim() != c {
        return Err(Error::shape("bilipschitz_probe", &[round_trip.in_dim(), round_trip.out_dim()], &[c, c]));
    }
    let radius = r_zeta(c, cfg.zeta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.n_probe_points);
    while rows.len() < cfg.n_probe_points {
        let z: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        let z_norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if z_norm > radius {
            continue;
        }
        let (a, sigma_min_d) = spectral_extremes(&jacobian(decoder, &z)?, cfg.power_iter_tol)?;
        let mut dev = jacobian(round_trip, &z)?;
        for i in 0..c {
            dev.set(i, i, dev.at(i, i) - 1.0);
        }
        let (b, _) = spectral_extremes(&dev, cfg.power_iter_tol)?;

        let (mut min_ratio, mut max_ratio) = (f64::NAN, f64::NAN);
        if cfg.n_pairs_per_ball > 0 {
            let mut pts = Vec::with_capacity(2 * cfg.n_pairs_per_ball * c);
            let mut zs = Vec::with_capacity(2 * cfg.n_pairs_per_ball);
            for _ in 0..2 * cfg.n_pairs_per_ball {
                let off = sample_in_ball(c, cfg.ball_radius, &mut rng);
                let p: Vec<f64> = z.iter().zip(&off).map(|(z, o)| z + o).collect();
                pts.extend_from_slice(&p);
                zs.push(p);
            }
            let out = decoder.eval(&Tensor::new(&[zs.len(), c], pts)?)?;
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for k in 0..cfg.n_pairs_per_ball {
                let (i, j) = (2 * k, 2 * k + 1);
                let dz = distance(&zs[i], &zs[j]);
                if dz == 0.0 {
                    continue;
                }
                let ratio = distance(out.row(i), out.row(j)) / dz;
                lo = lo.min(ratio);
                hi = hi.max(ratio);
            }
            if lo.is_finite() {
                (min_ratio, max_ratio) = (lo, hi);
            }
        }
        rows.push(ProbeRow {
            z_norm,
            a,
            b,
            sigma_min_d,
            min_ratio,
            max_ratio,
        });
    }

    let a: Vec<f64> = rows.iter().map(|r| r.a).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.b).collect();
    let q = 1.0 - cfg.varrho / 2.0;
    let l_f = nearest_rank_quantile(&a, q);
    let eta = nearest_rank_quantile(&b, q);
    let l = (eta < 1.0).then(|| l_f.max(1.0 / (1.0 - eta)));
    let finite = |v: &f64| v.is_finite();
    let min_ratio = rows.iter().map(|r| r.min_ratio).filter(finite).fold(f64::NAN, f64::min);
    let max_ratio = rows.iter().map(|r| r.max_ratio).filter(finite).fold(f64::NAN, f64::max);
    Ok(BiLipReport {
        config: *cfg,
        r_zeta: radius,
        frac_b_below_one: b.iter().filter(|&&v| v < 1.0).count() as f64 / b.len() as f64,
        median_a: nearest_rank_quantile(&a, 0.5),
        median_b: nearest_rank_quantile(&b, 0.5),
        rows,
        l_f,
        eta,
        l,
        min_ratio,
        max_ratio,
    })
}

/// [`probe_maps`] with the model's decoder mean and encoder μ-path.
pub fn bilipschitz_probe(model: &Model, cfg: &ProbeConfig) -> Result<BiLipReport> {
    probe_maps(&DecoderMap(model), &RoundTripMap(model), cfg)
}
