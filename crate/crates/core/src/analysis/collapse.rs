use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{DecoderMap, Model};
use crate::objectives::kl_to_standard_normal;
use crate::Tensor;

use super::laplace_posterior;

/// `ε(x) = ε_max · exp(−γ · dist(x, X))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsFamily {
    pub eps_max: f64,
    pub gamma: f64,
}

impl EpsFamily {
    pub fn new(eps_max: f64, gamma: f64) -> Result<Self> {
        if !(eps_max > 0.0) || !(gamma >= 0.0) {
            return Err(Error::Config(format!(
                "eps family needs eps_max > 0 and gamma >= 0, got {eps_max}, {gamma}"
            )));
        }
        Ok(Self { eps_max, gamma })
    }

    pub fn at(&self, dist: f64) -> f64 {
        self.eps_max * (-self.gamma * dist).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Collapsed,
    NotCollapsed,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Collapsed => "collapsed",
            Verdict::NotCollapsed => "not_collapsed",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollapseRecord {
    pub probe_id: usize,
    /// Perturbation std-dev; 0 for dataset members.
    pub scale: f64,
    pub dist: f64,
    pub kl_q: f64,
    /// Laplace-approximate KL of the true posterior, when requested.
    pub kl_true: Option<f64>,
    pub eps_at_x: f64,
    pub within: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseProfile {
    pub records: Vec<CollapseRecord>,
    pub eps_family: EpsFamily,
    pub verdict: Verdict,
}

impl CollapseProfile {
    pub const CSV_HEADER: &'static str = "probe_id,scale,dist,kl_q,kl_true,eps_at_x,within_threshold";

    pub fn csv_rows(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{}",
                    r.probe_id,
                    r.scale,
                    r.dist,
                    r.kl_q,
                    r.kl_true.map_or(String::new(), |v| v.to_string()),
                    r.eps_at_x,
                    r.within
                )
            })
            .collect()
    }

    /// Spread (max − min) of `kl_q` over the dataset-member probes.
    pub fn data_kl_spread(&self) -> f64 {
        let on_data = self.records.iter().filter(|r| r.scale == 0.0).map(|r| r.kl_q);
        let (lo, hi) = on_data.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi - lo
    }
}

fn min_distance(x: &[f64], data: &Tensor) -> f64 {
    (0..data.rows())
        .map(|i| data.row(i).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Checks the ε(x)-collapse condition at the dataset members and at
/// Gaussian perturbations `x + s·noise` of each of them.
pub fn collapse_profile(
    model: &Model,
    data: &Tensor,
    probe_scales: &[f64],
    eps_family: EpsFamily,
    sigma2: f64,
    with_true: bool,
    seed: u64,
) -> Result<CollapseProfile> {
    if data.is_empty() || !data.is_matrix() {
        return Err(Error::Contract("collapse profile needs a nonempty dataset".into()));
    }
    if probe_scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("probe scales must be positive".into()));
    }
    let (n, d) = (data.rows(), data.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = data.data().to_vec();
    let mut scales = vec![0.0; n];
    for &s in probe_scales {
        for i in 0..n {
            probes.extend(data.row(i).iter().map(|&v| {
                let e: f64 = rng.sample(StandardNormal);
                v + s * e
            }));
            scales.push(s);
        }
    }
    let probes = Tensor::new(&[scales.len(), d], probes)?;
    let (mu, logvar) = model.encode(&probes)?;
    let kl_q = kl_to_standard_normal(&mu, &logvar)?;
    let decoder = DecoderMap(model);

    let mut records = Vec::with_capacity(scales.len());
    for (id, &scale) in scales.iter().enumerate() {
        let x = probes.row(id);
        let dist = if id < n { 0.0 } else { min_distance(x, data) };
        let kl_true = if with_true {
            Some(laplace_posterior(&decoder, x, sigma2, mu.row(id))?.kl)
        } else {
            None
        };
        let eps_at_x = eps_family.at(dist);
        let worst = kl_true.map_or(kl_q.data()[id], |t| t.max(kl_q.data()[id]));
        records.push(CollapseRecord {
            probe_id: id,
            scale,
            dist,
            kl_q: kl_q.data()[id],
            kl_true,
            eps_at_x,
            within: worst <= eps_at_x,
        });
    }
    let verdict = if records.iter().all(|r| r.within) {
        Verdict::Collapsed
    } else {
        Verdict::NotCollapsed
    };
    Ok(CollapseProfile {
        records,
        eps_family,
        verdict,
    })
}
