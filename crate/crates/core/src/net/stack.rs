use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::tape::{Gradients, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Fully connected layer, `y = act(x·W + b)` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weight: Matrix::zeros(inputs, outputs),
            bias: Matrix::zeros(1, outputs),
            activation,
        }
    }

    /// Gaussian weights with variance `1/inputs`, zero bias.
    pub fn random(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            weight: Matrix::from_vec(inputs, outputs, data).expect("sized"),
            bias: Matrix::zeros(1, outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

/// How the encoder reads its input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Fully connected over the whole input vector.
    #[default]
    Dense,
    /// The input is `input_dim / positions` channels over `positions`
    /// (channel-major) and the same layers run at every position.
    Positionwise,
}

/// How the mapper collapses positions before the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    /// Concatenates all positions, so the head is position aware.
    Flatten,
}

impl EncoderKind {
    pub(crate) fn tag(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        [Self::Dense, Self::Positionwise].get(tag as usize).copied()
    }
}

impl Pooling {
    pub(crate) fn tag(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        [Self::Mean, Self::Flatten].get(tag as usize).copied()
    }
}

/// Layer widths of the four networks.
///
/// The encoder maps the input through `encoder_hidden` to a
/// `channels x positions` feature map; the mapper applies `mapper_hidden`
/// tanh layers at every position, pools positions and projects to
/// `embed_dim`. The discriminator has `discriminator_hidden` tanh layers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub encoder: EncoderKind,
    pub encoder_hidden: Vec<usize>,
    pub channels: usize,
    pub positions: usize,
    pub mapper_hidden: Vec<usize>,
    #[serde(default)]
    pub pooling: Pooling,
    pub embed_dim: usize,
    pub classes: usize,
    pub domains: usize,
    #[serde(default)]
    pub discriminator_hidden: Vec<usize>,
}

impl StackSpec {
    pub fn feature_width(&self) -> usize {
        self.channels * self.positions
    }

    /// Width of one encoder input row.
    fn encoder_input(&self) -> usize {
        match self.encoder {
            EncoderKind::Dense => self.input_dim,
            EncoderKind::Positionwise => self.input_dim / self.positions,
        }
    }

    /// Width of the encoder's last layer.
    fn encoder_output(&self) -> usize {
        match self.encoder {
            EncoderKind::Dense => self.feature_width(),
            EncoderKind::Positionwise => self.channels,
        }
    }

    fn head_input(&self) -> usize {
        let width = self.mapper_hidden.last().copied().unwrap_or(self.channels);
        match self.pooling {
            Pooling::Mean => width,
            Pooling::Flatten => width * self.positions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("channels", self.channels),
            ("positions", self.positions),
            ("embed_dim", self.embed_dim),
            ("classes", self.classes),
            ("domains", self.domains),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let hidden = self.encoder_hidden.iter().chain(&self.mapper_hidden).chain(&self.discriminator_hidden);
        if hidden.copied().any(|w| w == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.encoder == EncoderKind::Positionwise && !self.input_dim.is_multiple_of(self.positions) {
            return Err(Error::Config(format!(
                "positionwise encoder: positions {} must divide input_dim {}",
                self.positions, self.input_dim
            )));
        }
        Ok(())
    }
}

fn chain(widths: impl IntoIterator<Item = usize>, activation: Activation, last: Activation, rng: &mut impl Rng) -> Vec<Dense> {
    let widths: Vec<usize> = widths.into_iter().collect();
    (1..widths.len())
        .map(|i| {
            let act = if i + 1 == widths.len() { last } else { activation };
            Dense::random(widths[i - 1], widths[i], act, rng)
        })
        .collect()
}

/// Encoder E, mapper M, classifier C and domain discriminator D.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkStack {
    spec: StackSpec,
    encoder: Vec<Dense>,
    mapper: Vec<Dense>,
    head: Dense,
    classifier: Dense,
    discriminator: Vec<Dense>,
}

impl NetworkStack {
    pub fn new(spec: StackSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let tanh = Activation::Tanh;
        let encoder = chain(
            std::iter::once(spec.encoder_input())
                .chain(spec.encoder_hidden.iter().copied())
                .chain([spec.encoder_output()]),
            tanh,
            tanh,
            rng,
        );
        let mapper = chain(
            std::iter::once(spec.channels).chain(spec.mapper_hidden.iter().copied()),
            tanh,
            tanh,
            rng,
        );
        let head = Dense::random(spec.head_input(), spec.embed_dim, Activation::Identity, rng);
        let classifier = Dense::random(spec.embed_dim, spec.classes, Activation::Identity, rng);
        let discriminator = chain(
            std::iter::once(spec.embed_dim)
                .chain(spec.discriminator_hidden.iter().copied())
                .chain([spec.domains]),
            tanh,
            Activation::Identity,
            rng,
        );
        Ok(Self {
            spec,
            encoder,
            mapper,
            head,
            classifier,
            discriminator,
        })
    }

    /// Assembles a stack from explicit layers, checking that every width
    /// chains and agrees with `spec`.
    pub fn from_layers(
        spec: StackSpec,
        encoder: Vec<Dense>,
        mapper: Vec<Dense>,
        head: Dense,
        classifier: Dense,
        discriminator: Vec<Dense>,
    ) -> Result<Self> {
        spec.validate()?;
        let check = |what: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(Error::Config(format!("{what}: width {got}, expected {want}")));
            }
            Ok(())
        };
        let check_chain = |what: &str, layers: &[Dense], widths: Vec<usize>| -> Result<()> {
            check(&format!("{what} depth"), layers.len(), widths.len() - 1)?;
            for (i, layer) in layers.iter().enumerate() {
                check(&format!("{what} layer {i} input"), layer.inputs(), widths[i])?;
                check(&format!("{what} layer {i} output"), layer.outputs(), widths[i + 1])?;
            }
            Ok(())
        };
        let mut widths = vec![spec.encoder_input()];
        widths.extend(&spec.encoder_hidden);
        widths.push(spec.encoder_output());
        check_chain("encoder", &encoder, widths)?;
        let mut widths = vec![spec.channels];
        widths.extend(&spec.mapper_hidden);
        check_chain("mapper", &mapper, widths)?;
        check_chain("head", std::slice::from_ref(&head), vec![spec.head_input(), spec.embed_dim])?;
        check_chain("classifier", std::slice::from_ref(&classifier), vec![spec.embed_dim, spec.classes])?;
        let mut widths = vec![spec.embed_dim];
        widths.extend(&spec.discriminator_hidden);
        widths.push(spec.domains);
        check_chain("discriminator", &discriminator, widths)?;
        Ok(Self {
            spec,
            encoder,
            mapper,
            head,
            classifier,
            discriminator,
        })
    }

    pub fn spec(&self) -> &StackSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &[Dense] {
        &self.encoder
    }

    pub fn mapper(&self) -> &[Dense] {
        &self.mapper
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn classifier(&self) -> &Dense {
        &self.classifier
    }

    pub fn discriminator(&self) -> &[Dense] {
        &self.discriminator
    }

    pub fn discriminator_mut(&mut self) -> &mut [Dense] {
        &mut self.discriminator
    }

    /// Layers grouped by network, in checkpoint order.
    pub(crate) fn networks(&self) -> [(&'static str, Vec<&Dense>); 4] {
        let mut mapper: Vec<&Dense> = self.mapper.iter().collect();
        mapper.push(&self.head);
        [
            ("encoder", self.encoder.iter().collect()),
            ("mapper", mapper),
            ("classifier", vec![&self.classifier]),
            ("discriminator", self.discriminator.iter().collect()),
        ]
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder
            .iter()
            .chain(&self.mapper)
            .chain([&self.head, &self.classifier])
            .chain(&self.discriminator)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder
            .iter_mut()
            .chain(self.mapper.iter_mut())
            .chain([&mut self.head, &mut self.classifier])
            .chain(self.discriminator.iter_mut())
    }

    /// All parameters, weight then bias per layer.
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.as_slice().len()).sum()
    }

    /// Records every parameter on the tape as a leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> BoundStack<'a> {
        let mut bind_layer = |l: &Dense| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()));
        let encoder = self.encoder.iter().map(&mut bind_layer).collect();
        let mapper = self.mapper.iter().map(&mut bind_layer).collect();
        let head = bind_layer(&self.head);
        let classifier = bind_layer(&self.classifier);
        let discriminator = self.discriminator.iter().map(&mut bind_layer).collect();
        BoundStack {
            stack: self,
            encoder,
            mapper,
            head,
            classifier,
            discriminator,
        }
    }

    /// `M(E(x))` without keeping the tape.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let f = net.encode(&mut tape, xv)?;
        let z = net.map(&mut tape, f)?;
        Ok(tape.value(z).clone())
    }

    /// Encoder output `[b x C·S]` without keeping the tape.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let f = net.encode(&mut tape, xv)?;
        Ok(tape.value(f).clone())
    }

    /// Mapper output for a batch of feature rows `[b x C·S]`.
    pub fn map_features(&self, features: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape);
        let f = tape.leaf(features.clone());
        let z = net.map(&mut tape, f)?;
        Ok(tape.value(z).clone())
    }
}

type LayerVars = (Var, Var);

/// A [`NetworkStack`] whose parameters are leaves on a particular tape.
pub struct BoundStack<'a> {
    stack: &'a NetworkStack,
    encoder: Vec<LayerVars>,
    mapper: Vec<LayerVars>,
    head: LayerVars,
    classifier: LayerVars,
    discriminator: Vec<LayerVars>,
}

impl BoundStack<'_> {
    fn dense(tape: &mut Tape, x: Var, (w, b): LayerVars, activation: Activation) -> Result<Var> {
        let h = tape.matmul(x, w)?;
        let h = tape.add_bias(h, b)?;
        Ok(match activation {
            Activation::Identity => h,
            Activation::Tanh => tape.tanh(h),
        })
    }

    fn layers(tape: &mut Tape, mut h: Var, vars: &[LayerVars], layers: &[Dense]) -> Result<Var> {
        for (v, layer) in vars.iter().zip(layers) {
            h = Self::dense(tape, h, *v, layer.activation)?;
        }
        Ok(h)
    }

    /// `[b x input_dim] -> [b x C·S]`.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let spec = &self.stack.spec;
        let width = tape.value(x).cols();
        if width != spec.input_dim {
            return Err(Error::shape("encode", spec.input_dim, width));
        }
        match spec.encoder {
            EncoderKind::Dense => Self::layers(tape, x, &self.encoder, &self.stack.encoder),
            EncoderKind::Positionwise => {
                let rows = tape.to_position_rows(x, spec.input_dim / spec.positions, spec.positions)?;
                let h = Self::layers(tape, rows, &self.encoder, &self.stack.encoder)?;
                tape.from_position_rows(h, spec.positions)
            }
        }
    }

    /// `[b x C·S] -> [b x embed_dim]`.
    pub fn map(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let spec = &self.stack.spec;
        let rows = tape.to_position_rows(features, spec.channels, spec.positions)?;
        let h = Self::layers(tape, rows, &self.mapper, &self.stack.mapper)?;
        let pooled = match spec.pooling {
            Pooling::Mean => tape.mean_pool(h, spec.positions)?,
            Pooling::Flatten => tape.from_position_rows(h, spec.positions)?,
        };
        Self::dense(tape, pooled, self.head, self.stack.head.activation)
    }

    pub fn classify(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        Self::dense(tape, z, self.classifier, self.stack.classifier.activation)
    }

    pub fn discriminate(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        Self::layers(tape, z, &self.discriminator, &self.stack.discriminator)
    }

    /// Parameter gradients in [`NetworkStack::params`] order; parameters
    /// that did not reach the loss get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Matrix> {
        self.encoder
            .iter()
            .chain(&self.mapper)
            .chain([&self.head, &self.classifier])
            .chain(&self.discriminator)
            .zip(self.stack.layers())
            .flat_map(|(&(w, b), layer)| {
                [
                    grads.get(w).cloned().unwrap_or_else(|| {
                        Matrix::zeros(layer.weight.rows(), layer.weight.cols())
                    }),
                    grads
                        .get(b)
                        .cloned()
                        .unwrap_or_else(|| Matrix::zeros(1, layer.bias.cols())),
                ]
            })
            .collect()
    }
}
