//! Model configuration, parameter initialization and the forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsule::{
    capsule_lengths, primary_capsules, routed_capsules, Activation, CapsuleError, PrimaryCapsuleConfig,
    RoutingCapsuleConfig, RoutingState,
};
use crate::loss::{
    decode_masked, margin_loss, sum_squared_error, total_loss, DecoderConfig, DenseLayer, LossConfig, LossError,
};
use crate::tensor::{conv_output_size, Scalar, Tape, Tensor, TensorError, Var};

/// Standard deviation of the routing transformation matrices at init.
pub const ROUTING_INIT_STD: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("config error at {layer}: {detail}")]
    Config { layer: String, detail: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Capsule(#[from] CapsuleError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn config_err(layer: impl Into<String>, detail: impl Into<String>) -> ModelError {
    ModelError::Config {
        layer: layer.into(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerConfig {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayerConfig {
    pub fn new(filters: usize, kernel: usize, stride: usize) -> Self {
        Self {
            filters,
            kernel,
            stride,
        }
    }
}

/// Declarative description of one network variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input: InputShape,
    pub num_classes: usize,
    /// ReLU convolutions applied before the primary capsules.
    pub conv_layers: Vec<ConvLayerConfig>,
    pub primary: PrimaryCapsuleConfig,
    /// Routed capsule layers between the primary and the class capsules.
    pub stacked_capsule_layers: Vec<RoutingCapsuleConfig>,
    /// Class capsules; `num_out_capsules` is `num_classes`, plus one with `nota`.
    pub output: RoutingCapsuleConfig,
    /// Nonlinearity of the routed layers. Primary capsules always squash.
    pub activation: Activation,
    pub loss: LossConfig,
    pub decoder: DecoderConfig,
    /// Adds a none-of-the-above capsule after the real classes.
    pub nota: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// The MNIST architecture applied to 3-channel 32×32 CIFAR-10 images.
    pub fn cifar10_baseline() -> Self {
        let input = InputShape {
            channels: 3,
            height: 32,
            width: 32,
        };
        Self {
            input,
            num_classes: 10,
            conv_layers: vec![ConvLayerConfig::new(256, 9, 1)],
            primary: PrimaryCapsuleConfig::default(),
            stacked_capsule_layers: Vec::new(),
            output: RoutingCapsuleConfig::default(),
            activation: Activation::Squash,
            loss: LossConfig::default(),
            decoder: DecoderConfig::for_image(input.pixels()),
            nota: false,
            seed: 0,
        }
    }

    pub fn mnist_baseline() -> Self {
        let input = InputShape {
            channels: 1,
            height: 28,
            width: 28,
        };
        Self {
            input,
            decoder: DecoderConfig::for_image(input.pixels()),
            ..Self::cifar10_baseline()
        }
    }

    /// Scaled-down baseline used for desk-scale runs: one 64-filter
    /// convolution and eight 8-dimensional primary capsule types.
    pub fn reduced(mut self) -> Self {
        self.conv_layers = vec![ConvLayerConfig::new(64, 9, 1)];
        self.primary.num_capsule_types = 8;
        self
    }

    /// Looks up a named variant: `baseline`, `caps64`, `conv2`,
    /// `recon0001`, `stack`, `custom-activation`, `nota`, `mnist-baseline`,
    /// `mnist-desk`, `cifar-desk`, `cifar-desk-conv2`.
    pub fn preset(name: &str) -> Option<Self> {
        let base = Self::cifar10_baseline();
        Some(match name {
            "baseline" => base,
            "caps64" => Self {
                primary: PrimaryCapsuleConfig {
                    num_capsule_types: 64,
                    ..base.primary
                },
                ..base
            },
            "conv2" => Self {
                conv_layers: vec![ConvLayerConfig::new(256, 9, 1); 2],
                ..base
            },
            "recon0001" => Self {
                loss: LossConfig {
                    reconstruction_scale: 0.0001,
                    ..base.loss
                },
                ..base
            },
            "stack" => Self {
                stacked_capsule_layers: vec![RoutingCapsuleConfig::default()],
                ..base
            },
            "custom-activation" => Self {
                activation: Activation::Custom,
                ..base
            },
            "nota" => base.with_nota(true),
            "mnist-baseline" => Self::mnist_baseline(),
            "mnist-desk" => Self::mnist_baseline().reduced(),
            "cifar-desk" => base.reduced(),
            "cifar-desk-conv2" => {
                let mut cfg = base.reduced();
                cfg.conv_layers.push(ConvLayerConfig::new(64, 9, 1));
                cfg
            }
            _ => return None,
        })
    }

    pub fn with_nota(mut self, nota: bool) -> Self {
        self.nota = nota;
        self.output.num_out_capsules = self.num_classes + usize::from(nota);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Number of output capsules including the none-of-the-above one.
    pub fn num_output_capsules(&self) -> usize {
        self.output.num_out_capsules
    }

    /// Checks the whole shape chain and returns it.
    pub fn validate(&self) -> Result<ShapeChain> {
        let InputShape {
            channels,
            height,
            width,
        } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(config_err("input", format!("empty input {channels}x{height}x{width}")));
        }
        if self.num_classes == 0 {
            return Err(config_err("num_classes", "must be positive"));
        }
        let mut feature = (channels, height, width);
        let mut conv_outputs = Vec::new();
        for (i, conv) in self.conv_layers.iter().enumerate() {
            let layer = format!("conv.{i}");
            if conv.filters == 0 {
                return Err(config_err(layer, "filters must be positive"));
            }
            let (Some(h), Some(w)) = (
                conv_output_size(feature.1, conv.kernel, conv.stride),
                conv_output_size(feature.2, conv.kernel, conv.stride),
            ) else {
                return Err(config_err(
                    layer,
                    format!(
                        "kernel {} stride {} does not fit a {}x{} input",
                        conv.kernel, conv.stride, feature.1, feature.2
                    ),
                ));
            };
            feature = (conv.filters, h, w);
            conv_outputs.push(feature);
        }

        self.primary
            .validate()
            .map_err(|e| config_err("primary", e.to_string()))?;
        let (Some(gh), Some(gw)) = (
            conv_output_size(feature.1, self.primary.kernel, self.primary.stride),
            conv_output_size(feature.2, self.primary.kernel, self.primary.stride),
        ) else {
            return Err(config_err(
                "primary",
                format!(
                    "kernel {} stride {} does not fit a {}x{} feature map",
                    self.primary.kernel, self.primary.stride, feature.1, feature.2
                ),
            ));
        };
        let primary_count = self.primary.num_capsule_types * gh * gw;

        let mut capsules = (primary_count, self.primary.capsule_dim);
        let mut routing_inputs = Vec::new();
        for (i, layer) in self.stacked_capsule_layers.iter().enumerate() {
            layer
                .validate()
                .map_err(|e| config_err(format!("stack.{i}"), e.to_string()))?;
            routing_inputs.push(capsules);
            capsules = (layer.num_out_capsules, layer.out_dim);
        }
        self.output
            .validate()
            .map_err(|e| config_err("output", e.to_string()))?;
        routing_inputs.push(capsules);

        let expected = self.num_classes + usize::from(self.nota);
        if self.output.num_out_capsules != expected {
            return Err(config_err(
                "output",
                format!(
                    "{} output capsules but {} classes{} need {expected}",
                    self.output.num_out_capsules,
                    self.num_classes,
                    if self.nota { " plus none-of-the-above" } else { "" }
                ),
            ));
        }
        if self.decoder.output_dim != self.input.pixels() {
            return Err(config_err(
                "decoder",
                format!(
                    "output_dim {} does not match {} input pixels",
                    self.decoder.output_dim,
                    self.input.pixels()
                ),
            ));
        }
        if self.decoder.hidden.contains(&0) {
            return Err(config_err("decoder", "hidden sizes must be positive"));
        }
        self.loss.validate().map_err(|e| config_err("loss", e.to_string()))?;

        Ok(ShapeChain {
            conv_outputs,
            primary_grid: (gh, gw),
            primary_count,
            routing_inputs,
            decoder_input: self.output.num_out_capsules * self.output.out_dim,
        })
    }
}

/// Intermediate shapes implied by a valid [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeChain {
    /// `(channels, height, width)` after each convolution.
    pub conv_outputs: Vec<(usize, usize, usize)>,
    pub primary_grid: (usize, usize),
    pub primary_count: usize,
    /// `(capsules, dim)` entering each routed layer, output layer last.
    pub routing_inputs: Vec<(usize, usize)>,
    pub decoder_input: usize,
}

/// Which capsule drives the reconstruction.
#[derive(Debug, Clone, Copy)]
pub enum MaskBy<'a> {
    Labels(&'a [usize]),
    Predictions,
}

/// A capsule network: its config and named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsNet<T> {
    config: ModelConfig,
    chain: ShapeChain,
    params: Vec<(String, Tensor<T>)>,
}

/// Outputs of one forward pass.
pub struct Forward<'t, T> {
    /// Class capsules `[B, M, D]`.
    pub capsules: Var<'t, T>,
    /// Capsule lengths `[B, M]`.
    pub lengths: Var<'t, T>,
    /// One state per routed layer, output layer last.
    pub routing: Vec<RoutingState<T>>,
}

/// Loss terms for a batch; each is the batch mean.
pub struct LossTerms<'t, T> {
    pub margin: Var<'t, T>,
    pub reconstruction: Var<'t, T>,
    pub total: Var<'t, T>,
    /// Decoder output `[B, pixels]`.
    pub reconstructed: Var<'t, T>,
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl<T: Scalar> CapsNet<T> {
    /// Initializes parameters deterministically from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        let chain = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();

        let mut in_ch = config.input.channels;
        for (i, conv) in config.conv_layers.iter().enumerate() {
            let fan_in = in_ch * conv.kernel * conv.kernel;
            params.push((
                format!("conv.{i}.weight"),
                Tensor::randn(
                    [conv.filters, in_ch, conv.kernel, conv.kernel],
                    he_std(fan_in),
                    &mut rng,
                ),
            ));
            params.push((format!("conv.{i}.bias"), Tensor::zeros([conv.filters])));
            in_ch = conv.filters;
        }
        let p = &config.primary;
        params.push((
            "primary.weight".into(),
            Tensor::randn(
                [p.channels(), in_ch, p.kernel, p.kernel],
                he_std(in_ch * p.kernel * p.kernel),
                &mut rng,
            ),
        ));
        params.push(("primary.bias".into(), Tensor::zeros([p.channels()])));

        let routed = config
            .stacked_capsule_layers
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("stack.{i}.weight"), c))
            .chain(std::iter::once(("output.weight".to_string(), &config.output)));
        for ((name, layer), &(nin, din)) in routed.zip(&chain.routing_inputs) {
            params.push((
                name,
                Tensor::randn(
                    [nin, layer.num_out_capsules, layer.out_dim, din],
                    ROUTING_INIT_STD,
                    &mut rng,
                ),
            ));
        }

        for (i, (fan_in, fan_out)) in config.decoder.layer_sizes(chain.decoder_input).into_iter().enumerate() {
            params.push((
                format!("decoder.{i}.weight"),
                Tensor::randn([fan_in, fan_out], he_std(fan_in), &mut rng),
            ));
            params.push((format!("decoder.{i}.bias"), Tensor::zeros([fan_out])));
        }
        Ok(Self { config, chain, params })
    }

    /// Reassembles a model from stored parameters, checking every name and shape.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let template = Self::build(ModelConfig {
            seed: 0,
            ..config.clone()
        })?;
        if template.params.len() != params.len() {
            return Err(ModelError::Integrity(format!(
                "config needs {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((want_name, want), (name, got)) in template.params.iter().zip(&params) {
            if want_name != name || want.shape() != got.shape() {
                return Err(ModelError::Integrity(format!(
                    "expected {want_name} {:?}, found {name} {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
        }
        Ok(Self {
            config,
            chain: template.chain,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shape_chain(&self) -> &ShapeChain {
        &self.chain
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    fn index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"))
    }

    /// Puts every parameter on the tape, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
        self.params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Runs convolutions, primary capsules and routing on `[B, C, H, W]` images.
    ///
    /// `frozen_couplings`, one tensor per routed layer, replaces the
    /// routing iterations; see [`routed_capsules`].
    pub fn forward<'t>(
        &self,
        vars: &[Var<'t, T>],
        images: Var<'t, T>,
        frozen_couplings: Option<&[Tensor<T>]>,
    ) -> Result<Forward<'t, T>> {
        let shape = images.shape();
        let InputShape {
            channels,
            height,
            width,
        } = self.config.input;
        if shape.len() != 4 || shape[1..] != [channels, height, width] {
            return Err(ModelError::Tensor(TensorError::Dimension {
                op: "forward",
                detail: format!("images {shape:?} do not match input {channels}x{height}x{width}"),
            }));
        }
        let mut h = images;
        for (i, conv) in self.config.conv_layers.iter().enumerate() {
            let w = vars[self.index(&format!("conv.{i}.weight"))];
            let b = vars[self.index(&format!("conv.{i}.bias"))];
            h = h.conv2d(w, Some(b), conv.stride)?.relu()?;
        }
        let mut caps = primary_capsules(
            h,
            &self.config.primary,
            vars[self.index("primary.weight")],
            Some(vars[self.index("primary.bias")]),
        )?;

        let mut routing = Vec::new();
        let layers = self
            .config
            .stacked_capsule_layers
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("stack.{i}.weight"), c))
            .chain(std::iter::once(("output.weight".to_string(), &self.config.output)));
        for (k, (name, layer)) in layers.enumerate() {
            let frozen = frozen_couplings.map(|f| &f[k]);
            let (v, state) = routed_capsules(caps, layer, vars[self.index(&name)], self.config.activation, frozen)?;
            caps = v;
            routing.push(state);
        }
        let lengths = capsule_lengths(caps)?;
        Ok(Forward {
            capsules: caps,
            lengths,
            routing,
        })
    }

    fn decoder_layers<'t>(&self, vars: &[Var<'t, T>]) -> Vec<DenseLayer<'t, T>> {
        (0..self.config.decoder.hidden.len() + 1)
            .map(|i| DenseLayer {
                weight: vars[self.index(&format!("decoder.{i}.weight"))],
                bias: vars[self.index(&format!("decoder.{i}.bias"))],
            })
            .collect()
    }

    /// Decoder output `[B, pixels]` from the capsule chosen by `mask`.
    pub fn reconstruct<'t>(&self, vars: &[Var<'t, T>], fwd: &Forward<'t, T>, mask: MaskBy<'_>) -> Result<Var<'t, T>> {
        let predicted;
        let targets = match mask {
            MaskBy::Labels(l) => l,
            MaskBy::Predictions => {
                predicted = self.predict(&fwd.lengths.value());
                &predicted
            }
        };
        Ok(decode_masked(fwd.capsules, targets, &self.decoder_layers(vars))?)
    }

    /// Margin, reconstruction and total loss for a labeled batch.
    pub fn losses<'t>(
        &self,
        vars: &[Var<'t, T>],
        fwd: &Forward<'t, T>,
        images: Var<'t, T>,
        labels: &[usize],
    ) -> Result<LossTerms<'t, T>> {
        let margin = margin_loss(fwd.lengths, labels, self.config.num_classes, &self.config.loss)?;
        let reconstructed = self.reconstruct(vars, fwd, MaskBy::Labels(labels))?;
        let bsz = labels.len();
        let target = images.reshape([bsz, self.config.input.pixels()])?;
        let reconstruction = sum_squared_error(reconstructed, target)?;
        let total = total_loss(margin, reconstruction, &self.config.loss)?;
        Ok(LossTerms {
            margin,
            reconstruction,
            total,
            reconstructed,
        })
    }

    /// Argmax over the real-class capsule lengths of `[B, M]`; the
    /// none-of-the-above capsule never wins.
    pub fn predict(&self, lengths: &Tensor<T>) -> Vec<usize> {
        let m = lengths.shape()[1];
        lengths
            .data()
            .chunks(m)
            .map(|row| argmax(&row[..self.config.num_classes]))
            .collect()
    }

    /// Real-class capsule lengths `[B, num_classes]` for a batch of images.
    pub fn scores(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let fwd = self.forward(&vars, tape.constant(images.clone()), None)?;
        let lengths = fwd.lengths.value();
        let m = lengths.shape()[1];
        let k = self.config.num_classes;
        let data = lengths
            .data()
            .chunks(m)
            .flat_map(|row| row[..k].iter().copied())
            .collect();
        Ok(Tensor::from_vec([lengths.shape()[0], k], data)?)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
