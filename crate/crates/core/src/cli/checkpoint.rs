//! `LRV1` checkpoints: magic, `key=value` header lines, a blank line, then
//! every parameter as little-endian `f64` in [`Model::params`] order.

use std::path::Path;

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::nn::{Layer, LayerSpec, Likelihood, Model};
use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"LRV1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Completed training epochs.
    pub epoch: usize,
    /// `key=value` lines of the producing run config.
    pub provenance: Vec<String>,
}

fn specs_text(layers: &[&Layer]) -> String {
    layers
        .iter()
        .map(|l| {
            let act = l.spec.activation.map_or_else(|| "none".to_string(), |a| a.to_string());
            format!("{}->{}:{act}", l.spec.in_dim, l.spec.out_dim)
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_specs(text: &str) -> Result<Vec<LayerSpec>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|item| {
            let bad = || Error::Format(format!("bad layer entry {item:?}"));
            let (dims, act) = item.split_once(':').ok_or_else(bad)?;
            let (i, o) = dims.split_once("->").ok_or_else(bad)?;
            let activation = match act {
                "none" => None,
                a => Some(a.parse::<Activation>().map_err(|_| bad())?),
            };
            Ok(LayerSpec {
                in_dim: i.parse().map_err(|_| bad())?,
                out_dim: o.parse().map_err(|_| bad())?,
                activation,
            })
        })
        .collect()
}

impl Checkpoint {
    pub fn new(model: Model, epoch: usize, provenance: Vec<String>) -> Self {
        Self {
            model,
            epoch,
            provenance,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let payload_bytes = m.num_params() * 8;
        let (likelihood, sigma2) = match m.likelihood {
            Likelihood::Gaussian { sigma2 } => ("gaussian", sigma2.to_string()),
            Likelihood::Bernoulli => ("bernoulli", "none".to_string()),
        };
        let mut header = vec![
            format!("format_version={FORMAT_VERSION}"),
            format!("data_dim={}", m.data_dim()),
            format!("latent_dim={}", m.latent_dim()),
            format!("likelihood={likelihood}"),
            format!("sigma2={sigma2}"),
            format!("encoder_trunk={}", specs_text(&m.encoder_trunk.iter().collect::<Vec<_>>())),
            format!("mu_head={}", specs_text(&[&m.mu_head])),
            format!("logvar_head={}", specs_text(&[&m.logvar_head])),
            format!("decoder={}", specs_text(&m.decoder.iter().collect::<Vec<_>>())),
            format!("epoch={}", self.epoch),
            format!("payload_bytes={payload_bytes}"),
        ];
        header.extend(self.provenance.iter().map(|l| format!("config.{l}")));

        let mut out = Vec::with_capacity(payload_bytes + 1024);
        out.extend_from_slice(MAGIC);
        out.push(b'\n');
        for line in header {
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
        out.push(b'\n');
        for p in m.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC || bytes[4] != b'\n' {
            let seen = &bytes[..bytes.len().min(4)];
            return Err(Error::Format(format!("bad checkpoint magic {seen:?}, expected \"LRV1\"")));
        }
        let rest = &bytes[5..];
        let end = rest
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Format("checkpoint header is not terminated by a blank line".into()))?;
        let header = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let payload = &rest[end + 2..];

        let mut fields = Vec::new();
        let mut provenance = Vec::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
            match k.strip_prefix("config.") {
                Some(key) => provenance.push(format!("{key}={v}")),
                None => fields.push((k, v)),
            }
        }
        let field = |key: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Format(format!("checkpoint header lacks {key}")))
        };
        let number = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint {key} is not an integer")))
        };

        let version = field("format_version")?;
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Version {
                found: version.to_string(),
                expected: FORMAT_VERSION,
            });
        }
        let declared = number("payload_bytes")?;
        if payload.len() != declared {
            return Err(Error::Length {
                what: "checkpoint payload".into(),
                expected: declared,
                actual: payload.len(),
            });
        }
        let likelihood = match field("likelihood")? {
            "gaussian" => Likelihood::Gaussian {
                sigma2: field("sigma2")?
                    .parse()
                    .map_err(|_| Error::Format("checkpoint sigma2 is not a number".into()))?,
            },
            "bernoulli" => Likelihood::Bernoulli,
            other => return Err(Error::Format(format!("unknown likelihood {other:?}"))),
        };

        let trunk = parse_specs(field("encoder_trunk")?)?;
        let heads = (parse_specs(field("mu_head")?)?, parse_specs(field("logvar_head")?)?);
        let decoder = parse_specs(field("decoder")?)?;
        let ([mu], [logvar]) = (heads.0.as_slice(), heads.1.as_slice()) else {
            return Err(Error::Format("each encoder head must be a single layer".into()));
        };
        let n_values: usize = trunk
            .iter()
            .chain([mu, logvar])
            .chain(&decoder)
            .map(|s| s.out_dim * (s.in_dim + 1))
            .sum();
        if n_values * 8 != declared {
            return Err(Error::Format(format!(
                "declared architecture holds {} bytes of parameters but payload_bytes={declared}",
                n_values * 8
            )));
        }

        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut layer = |spec: &LayerSpec| -> Result<Layer> {
            let w: Vec<f64> = values.by_ref().take(spec.out_dim * spec.in_dim).collect();
            let b: Vec<f64> = values.by_ref().take(spec.out_dim).collect();
            Layer::from_parts(Tensor::new(&[spec.out_dim, spec.in_dim], w)?, Tensor::from_vec(b), spec.activation)
        };
        let trunk = trunk.iter().map(&mut layer).collect::<Result<Vec<_>>>()?;
        let mu = layer(mu)?;
        let logvar = layer(logvar)?;
        let decoder = decoder.iter().map(&mut layer).collect::<Result<Vec<_>>>()?;
        let model = Model::from_layers(trunk, mu, logvar, decoder, likelihood)?;
        if model.data_dim() != number("data_dim")? || model.latent_dim() != number("latent_dim")? {
            return Err(Error::Format("declared data_dim/latent_dim disagree with the layers".into()));
        }
        Ok(Self {
            model,
            epoch: number("epoch")?,
            provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn checkpoint_save(model: &Model, epoch: usize, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(model.clone(), epoch, Vec::new()).save(path)
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<Model> {
    Ok(Checkpoint::load(path)?.model)
}
