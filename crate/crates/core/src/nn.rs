//! Encoder/decoder networks built from affine layers.
//!
//! Weights are stored `[out × in]` (row-major) and applied as `x · Wᵀ + b`
//! to row-batched inputs. The encoder is a trunk followed by two affine
//! heads (mean and log-variance); the decoder ends in an affine layer with
//! no activation (Gaussian mean or Bernoulli logits).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Activation, Var};
use crate::error::{Error, Result};
use crate::{Tape, Tensor};

/// Log-variance outputs are clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Likelihood {
    Gaussian { sigma2: f64 },
    Bernoulli,
}

impl Likelihood {
    pub fn validate(self) -> Result<Self> {
        match self {
            Likelihood::Gaussian { sigma2 } if !(sigma2 > 0.0 && sigma2.is_finite()) => {
                Err(Error::Spec(format!("gaussian sigma2 must be positive, got {sigma2}")))
            }
            l => Ok(l),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Option<Activation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    /// Layer from an explicit `[out × in]` weight matrix and `[out]` bias.
    pub fn from_parts(weight: Tensor, bias: Tensor, activation: Option<Activation>) -> Result<Self> {
        if !weight.is_matrix() || bias.shape() != [weight.rows()] {
            return Err(Error::shape("Layer::from_parts", weight.shape(), bias.shape()));
        }
        if let Some(a) = activation {
            a.validate()?;
        }
        Ok(Self {
            spec: LayerSpec {
                in_dim: weight.cols(),
                out_dim: weight.rows(),
                activation,
            },
            weight,
            bias,
        })
    }

    pub fn zeros(spec: LayerSpec) -> Self {
        Self {
            spec,
            weight: Tensor::zeros(&[spec.out_dim, spec.in_dim]),
            bias: Tensor::zeros(&[spec.out_dim]),
        }
    }

    fn trace(&self, tape: &mut Tape, vars: (Var, Var), x: Var) -> Result<Var> {
        let h = tape.linear(x, vars.0, vars.1)?;
        Ok(match self.spec.activation {
            Some(a) => tape.activation(h, a),
            None => h,
        })
    }
}

/// Layer sizes and activation for [`init_model`].
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub likelihood: Likelihood,
}

impl Architecture {
    /// D→256→128→(μ, logvar) encoder and C→128→256→D decoder, leaky ReLU.
    pub fn standard(data_dim: usize, latent_dim: usize) -> Self {
        Self {
            data_dim,
            latent_dim,
            encoder_hidden: vec![256, 128],
            decoder_hidden: vec![128, 256],
            activation: Activation::LeakyRelu(0.01),
            likelihood: Likelihood::Gaussian { sigma2: 1.0 },
        }
    }

    fn chain(dims: &[usize], act: Activation, last_act: bool) -> Vec<LayerSpec> {
        dims.windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                activation: if last_act || i + 2 < dims.len() {
                    Some(act)
                } else {
                    None
                },
            })
            .collect()
    }

    /// `(trunk, head, decoder)` layer specs; both heads share `head`.
    pub fn layer_specs(&self) -> Result<(Vec<LayerSpec>, LayerSpec, Vec<LayerSpec>)> {
        let all = [self.data_dim, self.latent_dim]
            .into_iter()
            .chain(self.encoder_hidden.iter().copied())
            .chain(self.decoder_hidden.iter().copied());
        for d in all {
            if d == 0 {
                return Err(Error::Spec("layer dimensions must be >= 1".into()));
            }
        }
        self.activation.validate()?;
        self.likelihood.validate()?;

        let mut enc = vec![self.data_dim];
        enc.extend(&self.encoder_hidden);
        let trunk = Self::chain(&enc, self.activation, true);
        let head = LayerSpec {
            in_dim: *enc.last().unwrap(),
            out_dim: self.latent_dim,
            activation: None,
        };
        let mut dec = vec![self.latent_dim];
        dec.extend(&self.decoder_hidden);
        dec.push(self.data_dim);
        let decoder = Self::chain(&dec, self.activation, false);
        Ok((trunk, head, decoder))
    }
}

/// Tape handles for every parameter, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    trunk: Vec<(Var, Var)>,
    mu: (Var, Var),
    logvar: (Var, Var),
    decoder: Vec<(Var, Var)>,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in self
            .trunk
            .iter()
            .chain([&self.mu, &self.logvar])
            .chain(&self.decoder)
        {
            out.push(w);
            out.push(b);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder_trunk: Vec<Layer>,
    pub mu_head: Layer,
    pub logvar_head: Layer,
    pub decoder: Vec<Layer>,
    pub likelihood: Likelihood,
}

impl Model {
    /// Assembles a model, checking that layer dimensions chain up.
    pub fn from_layers(
        encoder_trunk: Vec<Layer>,
        mu_head: Layer,
        logvar_head: Layer,
        decoder: Vec<Layer>,
        likelihood: Likelihood,
    ) -> Result<Self> {
        likelihood.validate()?;
        if decoder.is_empty() {
            return Err(Error::Spec("decoder needs at least one layer".into()));
        }
        let chained = |layers: &[Layer], start: usize| -> Result<usize> {
            layers.iter().try_fold(start, |d, l| {
                if l.spec.in_dim == d {
                    Ok(l.spec.out_dim)
                } else {
                    Err(Error::Spec(format!(
                        "layer expects input width {} but receives {d}",
                        l.spec.in_dim
                    )))
                }
            })
        };
        let data_dim = encoder_trunk
            .first()
            .map_or(mu_head.spec.in_dim, |l| l.spec.in_dim);
        let trunk_out = chained(&encoder_trunk, data_dim)?;
        if mu_head.spec.in_dim != trunk_out || logvar_head.spec.in_dim != trunk_out {
            return Err(Error::Spec("heads must consume the trunk output".into()));
        }
        if mu_head.spec.out_dim != logvar_head.spec.out_dim {
            return Err(Error::Spec("mu and logvar heads must share the latent size".into()));
        }
        if mu_head.spec.activation.is_some() || logvar_head.spec.activation.is_some() {
            return Err(Error::Spec("encoder heads are affine".into()));
        }
        let out = chained(&decoder, mu_head.spec.out_dim)?;
        if out != data_dim {
            return Err(Error::Spec(format!(
                "decoder outputs {out} values but data has {data_dim}"
            )));
        }
        if decoder.last().unwrap().spec.activation.is_some() {
            return Err(Error::Spec("final decoder layer must have no activation".into()));
        }
        Ok(Self {
            encoder_trunk,
            mu_head,
            logvar_head,
            decoder,
            likelihood,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.spec.out_dim
    }

    pub fn data_dim(&self) -> usize {
        self.decoder.last().unwrap().spec.out_dim
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder_trunk
            .iter()
            .chain([&self.mu_head, &self.logvar_head])
            .chain(&self.decoder)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.encoder_trunk
            .iter_mut()
            .chain([&mut self.mu_head, &mut self.logvar_head])
            .chain(self.decoder.iter_mut())
    }

    /// All parameters: per layer weight then bias; trunk, μ head, logvar head, decoder.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn record(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut leaf = |l: &Layer| {
            if trainable {
                (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
            } else {
                (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
            }
        };
        let trunk = self.encoder_trunk.iter().map(&mut leaf).collect();
        let mu = leaf(&self.mu_head);
        let logvar = leaf(&self.logvar_head);
        let decoder = self.decoder.iter().map(&mut leaf).collect();
        ModelVars {
            trunk,
            mu,
            logvar,
            decoder,
        }
    }

    /// Records parameters as differentiable leaves.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        self.record(tape, true)
    }

    /// Records parameters as constants (input-only differentiation).
    pub fn register_frozen(&self, tape: &mut Tape) -> ModelVars {
        self.record(tape, false)
    }

    fn check_width(&self, tape: &Tape, x: Var, want: usize, op: &'static str) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != want {
            return Err(Error::shape(op, s, &[s[0], want]));
        }
        Ok(())
    }

    fn trunk(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
        self.check_width(tape, x, self.data_dim(), "encode")?;
        let mut h = x;
        for (l, &v) in self.encoder_trunk.iter().zip(&vars.trunk) {
            h = l.trace(tape, v, h)?;
        }
        Ok(h)
    }

    /// Mean path `E_μ(x)` only.
    pub fn encode_mu_traced(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
        let h = self.trunk(tape, vars, x)?;
        self.mu_head.trace(tape, vars.mu, h)
    }

    /// `(μ, clamped log σ²)` for each input row.
    pub fn encode_traced(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<(Var, Var)> {
        let h = self.trunk(tape, vars, x)?;
        let mu = self.mu_head.trace(tape, vars.mu, h)?;
        let raw = self.logvar_head.trace(tape, vars.logvar, h)?;
        let logvar = tape.clamp(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        Ok((mu, logvar))
    }

    /// Raw decoder output: Gaussian mean or Bernoulli logits.
    pub fn decode_traced(&self, tape: &mut Tape, vars: &ModelVars, z: Var) -> Result<Var> {
        self.check_width(tape, z, self.latent_dim(), "decode")?;
        let mut h = z;
        for (l, &v) in self.decoder.iter().zip(&vars.decoder) {
            h = l.trace(tape, v, h)?;
        }
        Ok(h)
    }

    /// Mean of `p(x|z)`: identity on Gaussian output, sigmoid on logits.
    pub fn decode_mean_traced(&self, tape: &mut Tape, vars: &ModelVars, z: Var) -> Result<Var> {
        let out = self.decode_traced(tape, vars, z)?;
        Ok(match self.likelihood {
            Likelihood::Gaussian { .. } => out,
            Likelihood::Bernoulli => tape.activation(out, Activation::Sigmoid),
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let xv = tape.constant(as_matrix(x)?);
        let (mu, logvar) = self.encode_traced(&mut tape, &vars, xv)?;
        Ok((tape.value(mu).clone(), tape.value(logvar).clone()))
    }

    pub fn encode_mu(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let xv = tape.constant(as_matrix(x)?);
        let mu = self.encode_mu_traced(&mut tape, &vars, xv)?;
        Ok(tape.value(mu).clone())
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let zv = tape.constant(as_matrix(z)?);
        let out = self.decode_traced(&mut tape, &vars, zv)?;
        Ok(tape.value(out).clone())
    }

    pub fn decode_mean(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let zv = tape.constant(as_matrix(z)?);
        let out = self.decode_mean_traced(&mut tape, &vars, zv)?;
        Ok(tape.value(out).clone())
    }
}

/// Views a 1-D tensor as a single row.
pub(crate) fn as_matrix(x: &Tensor) -> Result<Tensor> {
    if x.is_matrix() {
        Ok(x.clone())
    } else {
        x.clone().reshape(&[1, x.len()])
    }
}

/// Draws weights `N(0, 2/fan_in)` for (leaky) ReLU layers and `N(0, 1/fan_in)`
/// otherwise; biases start at zero.
pub fn init_model(arch: &Architecture, seed: u64) -> Result<Model> {
    let (trunk, head, decoder) = arch.layer_specs()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = |spec: LayerSpec| -> Layer {
        let gain = match spec.activation {
            Some(a) if a.is_piecewise_linear() => 2.0,
            _ => 1.0,
        };
        let normal = Normal::new(0.0, (gain / spec.in_dim as f64).sqrt()).expect("positive std");
        let mut layer = Layer::zeros(spec);
        for w in layer.weight.data_mut() {
            *w = normal.sample(&mut rng);
        }
        layer
    };
    let trunk = trunk.into_iter().map(&mut init).collect();
    let mu = init(head);
    let logvar = init(head);
    let decoder = decoder.into_iter().map(&mut init).collect();
    Model::from_layers(trunk, mu, logvar, decoder, arch.likelihood)
}

/// `z = μ + exp(logvar / 2) ⊙ ε`, differentiable in `μ` and `logvar`.
pub fn reparameterize_traced(tape: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let noise = tape.mul(std, eps)?;
    tape.add(mu, noise)
}

pub fn reparameterize(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (m, l, e) = (
        tape.constant(mu.clone()),
        tape.constant(logvar.clone()),
        tape.constant(eps.clone()),
    );
    let z = reparameterize_traced(&mut tape, m, l, e)?;
    Ok(tape.value(z).clone())
}

/// A differentiable map applied independently to each row of a batch.
pub trait RowMap {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    /// Records the map on `tape` for a batch `input: [n × in_dim]`.
    fn trace(&self, tape: &mut Tape, input: Var) -> Result<Var>;

    fn eval(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(as_matrix(input)?);
        let out = self.trace(&mut tape, v)?;
        Ok(tape.value(out).clone())
    }
}

/// Decoder mean `D_θ(z)`.
pub struct DecoderMap<'a>(pub &'a Model);

/// Encoder mean path `E_{φ,μ}(x)`.
pub struct EncoderMeanMap<'a>(pub &'a Model);

/// Latent round trip `E_{φ,μ}(D_θ(z))`.
pub struct RoundTripMap<'a>(pub &'a Model);

impl RowMap for DecoderMap<'_> {
    fn in_dim(&self) -> usize {
        self.0.latent_dim()
    }
    fn out_dim(&self) -> usize {
        self.0.data_dim()
    }
    fn trace(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let vars = self.0.register_frozen(tape);
        self.0.decode_mean_traced(tape, &vars, input)
    }
}

impl RowMap for EncoderMeanMap<'_> {
    fn in_dim(&self) -> usize {
        self.0.data_dim()
    }
    fn out_dim(&self) -> usize {
        self.0.latent_dim()
    }
    fn trace(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let vars = self.0.register_frozen(tape);
        self.0.encode_mu_traced(tape, &vars, input)
    }
}

impl RowMap for RoundTripMap<'_> {
    fn in_dim(&self) -> usize {
        self.0.latent_dim()
    }
    fn out_dim(&self) -> usize {
        self.0.latent_dim()
    }
    fn trace(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let vars = self.0.register_frozen(tape);
        let x = self.0.decode_mean_traced(tape, &vars, input)?;
        self.0.encode_mu_traced(tape, &vars, x)
    }
}
