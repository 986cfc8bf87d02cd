use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analysis::{EpsFamily, ProbeConfig};
use crate::autodiff::Activation;
use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{Architecture, Likelihood};
use crate::objectives::{LatentSource, LossWeights, Schedule};
use crate::optim::AdamConfig;

/// Which rows of the loaded data a command works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("unknown split {other:?} (train|val|all)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::All => "all",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LikelihoodKind {
    Gaussian,
    Bernoulli,
}

impl FromStr for LikelihoodKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(LikelihoodKind::Gaussian),
            "bernoulli" => Ok(LikelihoodKind::Bernoulli),
            other => Err(Error::Config(format!("unknown likelihood {other:?} (gaussian|bernoulli)"))),
        }
    }
}

impl std::fmt::Display for LikelihoodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LikelihoodKind::Gaussian => "gaussian",
            LikelihoodKind::Bernoulli => "bernoulli",
        })
    }
}

/// Every knob of every command. Keys are the field names; see [`RunConfig::KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Compact spec text, e.g. `mixture:3:4` (kept verbatim for provenance).
    pub synthetic: Option<String>,
    pub n_synthetic: usize,
    /// Keep only the first `max_rows` loaded rows; 0 keeps all.
    pub max_rows: usize,
    pub binarize: bool,
    pub eval_split: Split,

    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub likelihood: LikelihoodKind,
    pub sigma2: f64,

    pub beta: f64,
    pub alpha_final: f64,
    /// Epochs of the α ramp; `None` ramps over the whole run.
    pub warmup: Option<usize>,
    pub schedule: Schedule,
    pub lr_z_source: LatentSource,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Extra checkpoint + eval row every `eval_every` epochs; 0 only at the end.
    pub eval_every: usize,

    pub eps_au: f64,
    pub n_mc: usize,

    pub zeta: f64,
    pub varrho: f64,
    pub ball_radius: f64,
    pub n_probe_points: usize,
    pub n_pairs_per_ball: usize,
    pub power_iter_tol: f64,
    pub tau_r: Option<f64>,
    pub tau_l: Option<f64>,
    pub eps_max: f64,
    pub eps_gamma: f64,
    pub probe_scales: Vec<f64>,
    pub probe_rows: usize,
    pub collapse_with_true: bool,

    pub inputs: Vec<usize>,
    pub noise_stddevs: Vec<f64>,
    pub samples: usize,

    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let probe = ProbeConfig::default();
        let weights = LossWeights::default();
        Self {
            images: None,
            labels: None,
            synthetic: None,
            n_synthetic: 512,
            max_rows: 0,
            binarize: false,
            eval_split: Split::Val,
            latent_dim: 32,
            encoder_hidden: vec![256, 128],
            decoder_hidden: vec![128, 256],
            activation: Activation::LeakyRelu(0.01),
            likelihood: LikelihoodKind::Gaussian,
            sigma2: 1.0,
            beta: weights.beta,
            alpha_final: weights.alpha_final,
            warmup: None,
            schedule: weights.schedule,
            lr_z_source: LatentSource::Posterior,
            epochs: 30,
            batch_size: 128,
            learning_rate: AdamConfig::default().learning_rate,
            seed: 0,
            eval_every: 0,
            eps_au: crate::metrics::DEFAULT_EPS_AU,
            n_mc: 1,
            zeta: probe.zeta,
            varrho: probe.varrho,
            ball_radius: probe.ball_radius,
            n_probe_points: probe.n_probe_points,
            n_pairs_per_ball: probe.n_pairs_per_ball,
            power_iter_tol: probe.power_iter_tol,
            tau_r: None,
            tau_l: None,
            eps_max: 1.0,
            eps_gamma: 1.0,
            probe_scales: vec![0.1, 0.5],
            probe_rows: 64,
            collapse_with_true: false,
            inputs: vec![0, 1, 2, 3],
            noise_stddevs: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            samples: 8,
            checkpoint: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "images",
        "labels",
        "synthetic",
        "n_synthetic",
        "max_rows",
        "binarize",
        "eval_split",
        "latent_dim",
        "encoder_hidden",
        "decoder_hidden",
        "activation",
        "likelihood",
        "sigma2",
        "beta",
        "alpha_T",
        "warmup",
        "schedule",
        "lr_z_source",
        "epochs",
        "batch_size",
        "learning_rate",
        "seed",
        "eval_every",
        "eps_au",
        "n_mc",
        "zeta",
        "varrho",
        "ball_radius",
        "n_probe_points",
        "n_pairs_per_ball",
        "power_iter_tol",
        "tau_r",
        "tau_l",
        "eps_max",
        "eps_gamma",
        "probe_scales",
        "probe_rows",
        "collapse_with_true",
        "inputs",
        "noise_stddevs",
        "samples",
        "checkpoint",
        "out_dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let none_path = |v: &str| (v != "none" && !v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "images" => self.images = none_path(v),
            "labels" => self.labels = none_path(v),
            "synthetic" => {
                self.synthetic = match v {
                    "" | "none" => None,
                    spec => {
                        spec.parse::<SyntheticSpec>()?;
                        Some(spec.to_string())
                    }
                }
            }
            "n_synthetic" => self.n_synthetic = parse(key, v)?,
            "max_rows" => self.max_rows = parse(key, v)?,
            "binarize" => self.binarize = parse(key, v)?,
            "eval_split" => self.eval_split = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "encoder_hidden" => self.encoder_hidden = parse_list(key, v)?,
            "decoder_hidden" => self.decoder_hidden = parse_list(key, v)?,
            "activation" => self.activation = parse(key, v)?,
            "likelihood" => self.likelihood = parse(key, v)?,
            "sigma2" => self.sigma2 = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "alpha_T" => self.alpha_final = parse(key, v)?,
            "warmup" => self.warmup = if v == "auto" { None } else { Some(parse(key, v)?) },
            "schedule" => self.schedule = parse(key, v)?,
            "lr_z_source" => self.lr_z_source = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "eps_au" => self.eps_au = parse(key, v)?,
            "n_mc" => self.n_mc = parse(key, v)?,
            "zeta" => self.zeta = parse(key, v)?,
            "varrho" => self.varrho = parse(key, v)?,
            "ball_radius" => self.ball_radius = parse(key, v)?,
            "n_probe_points" => self.n_probe_points = parse(key, v)?,
            "n_pairs_per_ball" => self.n_pairs_per_ball = parse(key, v)?,
            "power_iter_tol" => self.power_iter_tol = parse(key, v)?,
            "tau_r" => self.tau_r = parse_opt(key, v)?,
            "tau_l" => self.tau_l = parse_opt(key, v)?,
            "eps_max" => self.eps_max = parse(key, v)?,
            "eps_gamma" => self.eps_gamma = parse(key, v)?,
            "probe_scales" => self.probe_scales = parse_list(key, v)?,
            "probe_rows" => self.probe_rows = parse(key, v)?,
            "collapse_with_true" => self.collapse_with_true = parse(key, v)?,
            "inputs" => self.inputs = parse_list(key, v)?,
            "noise_stddevs" => self.noise_stddevs = parse_list(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "checkpoint" => self.checkpoint = none_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "images" => path(&self.images),
            "labels" => path(&self.labels),
            "synthetic" => opt(&self.synthetic),
            "n_synthetic" => self.n_synthetic.to_string(),
            "max_rows" => self.max_rows.to_string(),
            "binarize" => self.binarize.to_string(),
            "eval_split" => self.eval_split.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "encoder_hidden" => join(&self.encoder_hidden),
            "decoder_hidden" => join(&self.decoder_hidden),
            "activation" => self.activation.to_string(),
            "likelihood" => self.likelihood.to_string(),
            "sigma2" => self.sigma2.to_string(),
            "beta" => self.beta.to_string(),
            "alpha_T" => self.alpha_final.to_string(),
            "warmup" => self.warmup.map_or_else(|| "auto".to_string(), |w| w.to_string()),
            "schedule" => self.schedule.to_string(),
            "lr_z_source" => self.lr_z_source.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "seed" => self.seed.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eps_au" => self.eps_au.to_string(),
            "n_mc" => self.n_mc.to_string(),
            "zeta" => self.zeta.to_string(),
            "varrho" => self.varrho.to_string(),
            "ball_radius" => self.ball_radius.to_string(),
            "n_probe_points" => self.n_probe_points.to_string(),
            "n_pairs_per_ball" => self.n_pairs_per_ball.to_string(),
            "power_iter_tol" => self.power_iter_tol.to_string(),
            "tau_r" => opt(&self.tau_r),
            "tau_l" => opt(&self.tau_l),
            "eps_max" => self.eps_max.to_string(),
            "eps_gamma" => self.eps_gamma.to_string(),
            "probe_scales" => join(&self.probe_scales),
            "probe_rows" => self.probe_rows.to_string(),
            "collapse_with_true" => self.collapse_with_true.to_string(),
            "inputs" => join(&self.inputs),
            "noise_stddevs" => join(&self.noise_stddevs),
            "samples" => self.samples.to_string(),
            "checkpoint" => path(&self.checkpoint),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// All keys as `key=value` lines, in [`RunConfig::KEYS`] order.
    pub fn to_lines(&self) -> Vec<String> {
        Self::KEYS
            .iter()
            .map(|k| format!("{k}={}", self.get(k).expect("every key has a getter")))
            .collect()
    }

    pub fn likelihood(&self) -> Likelihood {
        match self.likelihood {
            LikelihoodKind::Gaussian => Likelihood::Gaussian { sigma2: self.sigma2 },
            LikelihoodKind::Bernoulli => Likelihood::Bernoulli,
        }
    }

    pub fn architecture(&self, data_dim: usize) -> Architecture {
        Architecture {
            data_dim,
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            activation: self.activation,
            likelihood: self.likelihood(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            alpha_final: self.alpha_final,
            warmup_epochs: self.warmup.unwrap_or(self.epochs.max(1)),
            schedule: self.schedule,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            zeta: self.zeta,
            varrho: self.varrho,
            ball_radius: self.ball_radius,
            n_probe_points: self.n_probe_points,
            n_pairs_per_ball: self.n_pairs_per_ball,
            power_iter_tol: self.power_iter_tol,
            seed: self.seed,
            tau_r: self.tau_r,
            tau_l: self.tau_l,
        }
    }

    pub fn eps_family(&self) -> Result<EpsFamily> {
        EpsFamily::new(self.eps_max, self.eps_gamma)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint.lrv"))
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        self.likelihood().validate()?;
        self.probe_config().validate()?;
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.eps_au > 0.0) {
            return Err(Error::Config(format!("eps_au must be positive, got {}", self.eps_au)));
        }
        if self.n_mc == 0 || self.samples == 0 {
            return Err(Error::Config("n_mc and samples must be >= 1".into()));
        }
        if self.noise_stddevs.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Config("noise_stddevs must be >= 0".into()));
        }
        if self.images.is_some() && self.synthetic.is_some() {
            return Err(Error::Config("set either images or synthetic, not both".into()));
        }
        Ok(())
    }

    /// The full dataset named by the config, before any split.
    pub fn load_data(&self) -> Result<Dataset> {
        let ds = match (&self.images, &self.synthetic) {
            (Some(images), None) => match &self.labels {
                Some(labels) => data::load_idx_with_labels(images, labels)?,
                None => data::load_idx(images)?,
            },
            (None, Some(spec)) => data::gen_synthetic(&spec.parse()?, self.n_synthetic, self.seed)?,
            (None, None) => return Err(Error::Config("no data source: set images or synthetic".into())),
            (Some(_), Some(_)) => return Err(Error::Config("set either images or synthetic, not both".into())),
        };
        let ds = if self.max_rows > 0 { ds.head(self.max_rows)? } else { ds };
        Ok(if self.binarize { ds.binarize(0.5) } else { ds })
    }

    /// `(train, val)` from the seeded 90/10 split.
    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        data::train_val_split(&self.load_data()?, self.seed)
    }

    pub fn load_eval_data(&self) -> Result<Dataset> {
        match self.eval_split {
            Split::All => self.load_data(),
            Split::Train => Ok(self.load_split()?.0),
            Split::Val => Ok(self.load_split()?.1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.set("synthetic", "mixture:3:4:2:0.5").unwrap();
        cfg.set("tau_r", "0.25").unwrap();
        cfg.set("activation", "leaky_relu(0.2)").unwrap();
        cfg.set("probe_scales", "0.1, 1").unwrap();
        let text = cfg.to_lines().join("\n");
        let mut back = RunConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_lines().len(), RunConfig::KEYS.len());
    }

    #[test]
    fn comments_and_errors() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# header\nbeta = 0.2  # weaker KL\n\nalpha_T=1\n").unwrap();
        assert_eq!((cfg.beta, cfg.alpha_final), (0.2, 1.0));
        assert!(matches!(cfg.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("epochs", "-1"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_text("epochs"), Err(Error::Config(_))));
        cfg.set("warmup", "0").unwrap();
        assert!(cfg.validate().is_err());
    }
}
