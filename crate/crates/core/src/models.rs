//! Encoder/decoder builders and observation likelihoods.
//!
//! Observations are always flattened to `[B, D_x]`; convolutional models
//! reshape internally. Every Normal group gets its own mean and log-std head,
//! every Concrete group one logits head.

use std::fmt;
use std::str::FromStr;

use hfvae_autograd::{BoundParams, ParamStore, Tensor, Var};
use ndarray::{Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{GroupKind, GroupPosterior, LatentLayout};
use crate::error::{config, contract, Result};

/// Probability clamp applied before taking Bernoulli logs.
pub const BERNOULLI_EPS: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    MnistMlp,
    DspritesMlp,
    /// Narrow MLP for 32×32 synthetic images.
    DeskMlp,
    /// One hidden layer of 16 tanh units, for tests and gradient checks.
    TinyMlp,
    Conv64,
    Prodlda,
    Nvdm,
}

pub const ARCHITECTURE_NAMES: [&str; 7] =
    ["mnist-mlp", "dsprites-mlp", "desk-mlp", "tiny-mlp", "conv64", "prodlda", "nvdm"];

impl FromStr for Architecture {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            config(format!("unknown architecture `{s}`; valid: {}", ARCHITECTURE_NAMES.join(", ")))
        })
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("architecture serializes");
        write!(f, "{}", v.as_str().unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodKind {
    Bernoulli,
    CategoricalBow,
}

fn default_dropout() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Shape of one observation, e.g. `[784]`, `[3, 64, 64]` or `[V]`.
    pub input_shape: Vec<usize>,
    pub layout: LatentLayout,
    pub likelihood: LikelihoodKind,
    /// Dropout rate of the topic-model architectures.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(
        architecture: Architecture,
        input_shape: Vec<usize>,
        layout: LatentLayout,
        likelihood: LikelihoodKind,
    ) -> Self {
        Self { architecture, input_shape, layout, likelihood, dropout: default_dropout() }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_dim() == 0 {
            return Err(config("input shape must be non-empty"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        match self.architecture {
            Architecture::Prodlda | Architecture::Nvdm => {
                if !self.layout.concrete_groups().is_empty() {
                    return Err(config("topic models take Normal groups only"));
                }
                if self.likelihood != LikelihoodKind::CategoricalBow {
                    return Err(config("topic models use the categorical-bow likelihood"));
                }
            }
            Architecture::Conv64 => {
                if self.input_shape.len() != 3 || self.input_shape[1] != 64 || self.input_shape[2] != 64 {
                    return Err(config(format!(
                        "conv64 expects input shape [C, 64, 64], got {:?}",
                        self.input_shape
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Relu,
    Tanh,
    Softplus,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Linear { name: String, bias: bool },
    Conv { name: String, stride: usize, padding: usize },
    ConvTranspose { name: String, stride: usize, padding: usize },
    BatchNorm { name: String },
    Act(Activation),
    Dropout(f64),
    /// Reshape to `[B, shape...]`.
    Reshape(Vec<usize>),
    Softmax,
}

/// Running-statistics updates produced by BatchNorm layers in training mode.
pub type BufferUpdates = Vec<(String, Tensor)>;

/// Mode and side channels of one forward pass.
pub struct ForwardState<'r> {
    pub train: bool,
    rng: Option<&'r mut ChaCha8Rng>,
    pub buffer_updates: BufferUpdates,
}

impl ForwardState<'static> {
    /// Deterministic evaluation: frozen BatchNorm statistics, no dropout.
    pub fn eval() -> Self {
        Self { train: false, rng: None, buffer_updates: Vec::new() }
    }
}

impl<'r> ForwardState<'r> {
    /// Training mode; `rng` drives dropout masks.
    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Self { train: true, rng: Some(rng), buffer_updates: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    fn forward<'t>(
        &self,
        p: &BoundParams<'t>,
        buffers: &ParamStore,
        mut x: Var<'t>,
        state: &mut ForwardState<'_>,
    ) -> Var<'t> {
        for layer in &self.layers {
            x = match layer {
                Layer::Linear { name, bias } => {
                    let y = x.matmul(p.get(&format!("{name}.weight")));
                    if *bias {
                        y + p.get(&format!("{name}.bias"))
                    } else {
                        y
                    }
                }
                Layer::Conv { name, stride, padding } => {
                    let y = x.conv2d(p.get(&format!("{name}.weight")), *stride, *padding);
                    y + channel_bias(p.get(&format!("{name}.bias")))
                }
                Layer::ConvTranspose { name, stride, padding } => {
                    let y = x.conv_transpose2d(p.get(&format!("{name}.weight")), *stride, *padding);
                    y + channel_bias(p.get(&format!("{name}.bias")))
                }
                Layer::BatchNorm { name } => batch_norm(name, p, buffers, x, state),
                Layer::Act(Activation::Relu) => x.relu(),
                Layer::Act(Activation::Tanh) => x.tanh(),
                Layer::Act(Activation::Softplus) => x.softplus(),
                Layer::Dropout(rate) => dropout(x, *rate, state),
                Layer::Reshape(shape) => {
                    let mut full = vec![x.shape()[0]];
                    full.extend_from_slice(shape);
                    x.reshape(&full)
                }
                Layer::Softmax => x.softmax(1),
            };
        }
        x
    }
}

fn channel_bias(b: Var<'_>) -> Var<'_> {
    let c = b.shape()[0];
    b.reshape(&[1, c, 1, 1])
}

fn dropout<'t>(x: Var<'t>, rate: f64, state: &mut ForwardState<'_>) -> Var<'t> {
    if !state.train || rate == 0.0 {
        return x;
    }
    let rng = state.rng.as_mut().expect("training forward pass needs an rng");
    let keep = 1.0 - rate;
    let shape = x.shape();
    let len: usize = shape.iter().product();
    let mask: Vec<f64> =
        (0..len).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    x * x.tape().constant(Tensor::from_shape_vec(IxDyn(&shape), mask).unwrap())
}

/// BatchNorm over the batch axis (and spatial axes for 4-D input).
fn batch_norm<'t>(
    name: &str,
    p: &BoundParams<'t>,
    buffers: &ParamStore,
    x: Var<'t>,
    state: &mut ForwardState<'_>,
) -> Var<'t> {
    let shape = x.shape();
    let c = shape[1];
    let stat_shape: Vec<usize> = if shape.len() == 4 { vec![1, c, 1, 1] } else { vec![1, c] };
    let gamma = p.get(&format!("{name}.gamma")).reshape(&stat_shape);
    let beta = p.get(&format!("{name}.beta")).reshape(&stat_shape);
    let mean_key = format!("{name}.running_mean");
    let var_key = format!("{name}.running_var");
    let tape = x.tape();
    let reduce = |v: Var<'t>| -> Var<'t> {
        if shape.len() == 4 {
            v.mean_axis(0).mean_axis(1).mean_axis(1).reshape(&stat_shape)
        } else {
            v.mean_axis(0).reshape(&stat_shape)
        }
    };
    if state.train {
        let mean = reduce(x);
        let centred = x - mean;
        let var = reduce(centred.square());
        let count = (shape.iter().product::<usize>() / c) as f64;
        let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let old_mean = buffers.get(&mean_key).expect("running mean buffer");
        let old_var = buffers.get(&var_key).expect("running var buffer");
        let batch_mean = mean.value().iter().copied().collect::<Vec<_>>();
        let batch_var = var.value().iter().copied().collect::<Vec<_>>();
        let new_mean = ndarray::Array1::from_shape_fn(c, |i| {
            (1.0 - BN_MOMENTUM) * old_mean[[i]] + BN_MOMENTUM * batch_mean[i]
        });
        let new_var = ndarray::Array1::from_shape_fn(c, |i| {
            (1.0 - BN_MOMENTUM) * old_var[[i]] + BN_MOMENTUM * batch_var[i] * unbiased
        });
        state.buffer_updates.push((mean_key, new_mean.into_dyn()));
        state.buffer_updates.push((var_key, new_var.into_dyn()));
        centred * (var + BN_EPS).powf(-0.5) * gamma + beta
    } else {
        let rm = buffers.get(&mean_key).expect("running mean buffer").clone();
        let rv = buffers.get(&var_key).expect("running var buffer").clone();
        let rm = tape.constant(rm.into_shape_with_order(IxDyn(&stat_shape)).unwrap());
        let inv = tape.constant(
            rv.mapv(|v| 1.0 / (v + BN_EPS).sqrt())
                .into_shape_with_order(IxDyn(&stat_shape))
                .unwrap(),
        );
        (x - rm) * inv * gamma + beta
    }
}

struct Builder<'a> {
    params: &'a mut ParamStore,
    buffers: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    fn linear(&mut self, name: &str, input: usize, output: usize, bias: bool) -> Layer {
        let bound = 1.0 / (input as f64).sqrt();
        let w = self.uniform(&[input, output], bound);
        self.params.insert(format!("{name}.weight"), w);
        if bias {
            let b = self.uniform(&[output], bound);
            self.params.insert(format!("{name}.bias"), b);
        }
        Layer::Linear { name: name.to_string(), bias }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize) -> Layer {
        let bound = 1.0 / ((cin * 16) as f64).sqrt();
        let w = self.uniform(&[cout, cin, 4, 4], bound);
        let b = self.uniform(&[cout], bound);
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), b);
        Layer::Conv { name: name.to_string(), stride: 2, padding: 1 }
    }

    fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize) -> Layer {
        let bound = 1.0 / ((cout * 16) as f64).sqrt();
        let w = self.uniform(&[cin, cout, 4, 4], bound);
        let b = self.uniform(&[cout], bound);
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), b);
        Layer::ConvTranspose { name: name.to_string(), stride: 2, padding: 1 }
    }

    fn batch_norm(&mut self, name: &str, features: usize) -> Layer {
        self.params.insert(format!("{name}.gamma"), Tensor::ones(IxDyn(&[features])));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(IxDyn(&[features])));
        self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(IxDyn(&[features])));
        self.buffers.insert(format!("{name}.running_var"), Tensor::ones(IxDyn(&[features])));
        Layer::BatchNorm { name: name.to_string() }
    }

    /// Fully connected stack with an activation after every layer.
    fn mlp(&mut self, prefix: &str, input: usize, widths: &[usize], act: Activation) -> (Sequential, usize) {
        let mut layers = Vec::new();
        let mut width = input;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(self.linear(&format!("{prefix}.{i}"), width, w, true));
            layers.push(Layer::Act(act));
            width = w;
        }
        (Sequential { layers }, width)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Head {
    Normal { mean: Sequential, log_std: Sequential },
    Concrete { logits: Sequential },
}

/// Maps observations to posterior parameters for every latent group.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    trunk: Sequential,
    heads: Vec<Head>,
}

/// Maps the concatenated latent vector to likelihood parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    net: Sequential,
    sigmoid_output: bool,
}

struct MlpShape {
    encoder: &'static [usize],
    branch: Option<usize>,
    encoder_act: Activation,
    decoder: &'static [usize],
    decoder_act: Activation,
}

fn mlp_shape(arch: Architecture) -> Option<MlpShape> {
    use Activation::*;
    Some(match arch {
        Architecture::MnistMlp => MlpShape {
            encoder: &[400],
            branch: Some(200),
            encoder_act: Relu,
            decoder: &[200, 400],
            decoder_act: Relu,
        },
        Architecture::DspritesMlp => MlpShape {
            encoder: &[1200, 1200],
            branch: Some(400),
            encoder_act: Relu,
            decoder: &[400, 1200, 1200],
            decoder_act: Tanh,
        },
        Architecture::DeskMlp => MlpShape {
            encoder: &[256],
            branch: Some(128),
            encoder_act: Relu,
            decoder: &[128, 256],
            decoder_act: Tanh,
        },
        Architecture::TinyMlp => MlpShape {
            encoder: &[16],
            branch: None,
            encoder_act: Tanh,
            decoder: &[16],
            decoder_act: Tanh,
        },
        _ => return None,
    })
}

/// Head for one Normal parameter: optional hidden branch, then a linear map,
/// optionally followed by BatchNorm.
fn normal_head(
    b: &mut Builder<'_>,
    prefix: &str,
    input: usize,
    dim: usize,
    branch: Option<usize>,
    branch_act: Activation,
    norm: bool,
) -> Sequential {
    let mut layers = Vec::new();
    let mut width = input;
    if let Some(h) = branch {
        layers.push(b.linear(&format!("{prefix}.0"), width, h, true));
        layers.push(Layer::Act(branch_act));
        width = h;
    }
    let last = format!("{prefix}.{}", layers.len() / 2);
    layers.push(b.linear(&last, width, dim, true));
    if norm {
        layers.push(b.batch_norm(&format!("{last}.bn"), dim));
    }
    Sequential { layers }
}

fn build_heads(
    b: &mut Builder<'_>,
    layout: &LatentLayout,
    input: usize,
    branch: Option<usize>,
    branch_act: Activation,
    norm: bool,
) -> Vec<Head> {
    layout
        .groups()
        .iter()
        .enumerate()
        .map(|(d, g)| match g.kind {
            GroupKind::Normal => Head::Normal {
                mean: normal_head(b, &format!("encoder.group{d}.mean"), input, g.dim, branch, branch_act, norm),
                log_std: normal_head(
                    b,
                    &format!("encoder.group{d}.log_std"),
                    input,
                    g.dim,
                    branch,
                    branch_act,
                    norm,
                ),
            },
            GroupKind::Concrete => Head::Concrete {
                logits: Sequential {
                    layers: vec![b.linear(&format!("encoder.group{d}.logits"), input, g.dim, true)],
                },
            },
        })
        .collect()
}

fn build(config: &ModelConfig, b: &mut Builder<'_>) -> (Encoder, Decoder) {
    let input = config.input_dim();
    let latent = config.layout.total_dim();
    let bernoulli = config.likelihood == LikelihoodKind::Bernoulli;
    if let Some(shape) = mlp_shape(config.architecture) {
        let (trunk, width) = b.mlp("encoder.trunk", input, shape.encoder, shape.encoder_act);
        let heads = build_heads(b, &config.layout, width, shape.branch, shape.encoder_act, false);
        let (mut net, width) = b.mlp("decoder", latent, shape.decoder, shape.decoder_act);
        net.layers.push(b.linear(&format!("decoder.{}", shape.decoder.len()), width, input, true));
        return (Encoder { trunk, heads }, Decoder { net, sigmoid_output: bernoulli });
    }
    match config.architecture {
        Architecture::Conv64 => {
            let channels = config.input_shape[0];
            let mut trunk = vec![Layer::Reshape(config.input_shape.clone())];
            let widths = [channels, 32, 32, 64, 64];
            for i in 0..4 {
                trunk.push(b.conv(&format!("encoder.conv{i}"), widths[i], widths[i + 1]));
                trunk.push(b.batch_norm(&format!("encoder.conv{i}.bn"), widths[i + 1]));
                trunk.push(Layer::Act(Activation::Relu));
            }
            trunk.push(Layer::Reshape(vec![64 * 4 * 4]));
            let heads = build_heads(b, &config.layout, 64 * 4 * 4, Some(256), Activation::Relu, false);

            let mut net = vec![
                b.linear("decoder.fc0", latent, 256, true),
                Layer::Act(Activation::Relu),
                b.linear("decoder.fc1", 256, 64 * 4 * 4, true),
                Layer::Act(Activation::Tanh),
                Layer::Reshape(vec![64, 4, 4]),
            ];
            let widths = [64, 64, 32, 32];
            for i in 0..3 {
                net.push(b.conv_transpose(&format!("decoder.upconv{i}"), widths[i], widths[i + 1]));
                net.push(b.batch_norm(&format!("decoder.upconv{i}.bn"), widths[i + 1]));
                net.push(Layer::Act(Activation::Relu));
            }
            net.push(b.conv_transpose("decoder.upconv3", 32, channels));
            net.push(Layer::Reshape(vec![input]));
            (
                Encoder { trunk: Sequential { layers: trunk }, heads },
                Decoder { net: Sequential { layers: net }, sigmoid_output: bernoulli },
            )
        }
        Architecture::Prodlda | Architecture::Nvdm => {
            let prodlda = config.architecture == Architecture::Prodlda;
            let trunk = vec![
                b.linear("encoder.trunk.0", input, 100, true),
                Layer::Act(Activation::Softplus),
                b.linear("encoder.trunk.1", 100, 100, true),
                Layer::Act(Activation::Softplus),
                Layer::Dropout(config.dropout),
            ];
            let heads = build_heads(b, &config.layout, 100, None, Activation::Softplus, prodlda);
            let net = if prodlda {
                vec![
                    Layer::Softmax,
                    Layer::Dropout(config.dropout),
                    b.linear("decoder.topics", latent, input, false),
                    b.batch_norm("decoder.topics.bn", input),
                ]
            } else {
                vec![b.linear("decoder.topics", latent, input, true)]
            };
            (
                Encoder { trunk: Sequential { layers: trunk }, heads },
                Decoder { net: Sequential { layers: net }, sigmoid_output: false },
            )
        }
        _ => unreachable!("MLP architectures handled above"),
    }
}

/// Encoder, decoder and their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Non-trainable state (BatchNorm running statistics).
    pub buffers: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

impl Model {
    /// Builds the architecture and initializes parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let (encoder, decoder) = {
            let mut b = Builder {
                params: &mut params,
                buffers: &mut buffers,
                rng: ChaCha8Rng::seed_from_u64(seed),
            };
            build(&config, &mut b)
        };
        Ok(Self { config, params, buffers, encoder, decoder })
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.config.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.count_prefix("encoder.")
    }

    pub fn decoder_param_count(&self) -> usize {
        self.count_prefix("decoder.")
    }

    fn count_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.len()).sum()
    }

    /// Output widths of every encoder head, read from the built parameters
    /// (mean and log-std for Normal groups, logits for Concrete groups).
    pub fn head_sizes(&self) -> Vec<usize> {
        let width = |seq: &Sequential| {
            let name = seq
                .layers
                .iter()
                .rev()
                .find_map(|l| match l {
                    Layer::Linear { name, .. } => Some(name),
                    _ => None,
                })
                .expect("head ends in a linear layer");
            self.params.get(&format!("{name}.weight")).unwrap().shape()[1]
        };
        let mut sizes = Vec::new();
        for head in &self.encoder.heads {
            match head {
                Head::Normal { mean, log_std } => sizes.extend([width(mean), width(log_std)]),
                Head::Concrete { logits } => sizes.push(width(logits)),
            }
        }
        sizes
    }

    /// Posterior parameters for a `[B, D_x]` batch.
    pub fn encode<'t>(
        &self,
        p: &BoundParams<'t>,
        x: Var<'t>,
        state: &mut ForwardState<'_>,
    ) -> Result<Vec<GroupPosterior<'t>>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim() {
            return Err(contract(format!(
                "encoder expects [B, {}] input, got {shape:?}",
                self.config.input_dim()
            )));
        }
        let h = self.encoder.trunk.forward(p, &self.buffers, x, state);
        Ok(self
            .encoder
            .heads
            .iter()
            .map(|head| match head {
                Head::Normal { mean, log_std } => GroupPosterior::Normal {
                    mean: mean.forward(p, &self.buffers, h, state),
                    log_std: log_std.forward(p, &self.buffers, h, state),
                },
                Head::Concrete { logits } => {
                    GroupPosterior::Concrete { logits: logits.forward(p, &self.buffers, h, state) }
                }
            })
            .collect())
    }

    /// Likelihood parameters for `[B, total_dim]` latents: Bernoulli
    /// probabilities, or unnormalized word logits for bag-of-words.
    pub fn decode<'t>(&self, p: &BoundParams<'t>, z: Var<'t>, state: &mut ForwardState<'_>) -> Result<Var<'t>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.layout().total_dim() {
            return Err(contract(format!(
                "decoder expects [B, {}] latents, got {shape:?}",
                self.layout().total_dim()
            )));
        }
        let out = self.decoder.net.forward(p, &self.buffers, z, state);
        Ok(if self.decoder.sigmoid_output { out.sigmoid() } else { out })
    }

    /// Per-datapoint `log p(x | z)`, `[B]`.
    pub fn log_likelihood_var<'t>(&self, x: Var<'t>, out: Var<'t>) -> Var<'t> {
        log_likelihood_var(x, out, self.config.likelihood)
    }

    pub fn apply_buffer_updates(&mut self, updates: BufferUpdates) {
        for (name, value) in updates {
            self.buffers.insert(name, value);
        }
    }
}

/// Batched log-likelihood; see [`log_likelihood`].
pub fn log_likelihood_var<'t>(x: Var<'t>, out: Var<'t>, kind: LikelihoodKind) -> Var<'t> {
    match kind {
        LikelihoodKind::Bernoulli => {
            let p = out.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS);
            (x * p.log() + (1.0 - x) * (1.0 - p).log()).sum_axis(1)
        }
        LikelihoodKind::CategoricalBow => (x * out.log_softmax(1)).sum_axis(1),
    }
}

/// `log p(x | decoder output)` for one datapoint.
///
/// Bernoulli takes probabilities (clamped to `[ε, 1-ε]`) and targets in `[0, 1]`;
/// categorical-bow takes word logits and nonnegative counts.
pub fn log_likelihood(x: &[f64], out: &[f64], kind: LikelihoodKind) -> Result<f64> {
    if x.len() != out.len() {
        return Err(contract("target and decoder output lengths differ"));
    }
    match kind {
        LikelihoodKind::Bernoulli => {
            if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(contract("Bernoulli targets must lie in [0, 1]"));
            }
            Ok(x.iter()
                .zip(out)
                .map(|(&t, &p)| {
                    let p = p.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS);
                    t * p.ln() + (1.0 - t) * (1.0 - p).ln()
                })
                .sum())
        }
        LikelihoodKind::CategoricalBow => {
            if x.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(contract("word counts must be nonnegative"));
            }
            let ls = crate::distributions::log_softmax(out);
            Ok(x.iter().zip(ls).map(|(c, l)| if *c == 0.0 { 0.0 } else { c * l }).sum())
        }
    }
}

/// Row-major `[B, D]` view of a batch of observations.
pub fn flatten_batch(x: &Tensor) -> Tensor {
    let b = x.len_of(Axis(0));
    let d = x.len() / b.max(1);
    x.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&[b, d])).unwrap()
}
