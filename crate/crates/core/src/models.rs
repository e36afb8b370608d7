//! The five networks: generator `F`, appearance decoder `F_a⁻¹`, motion
//! decoder `F_m⁻¹`, classifier `𝒞` and discriminator `𝒟`.
//!
//! Encoder-decoders follow the 9-block ResNet translation generator
//! (7×7 stem, two stride-2 downsamplings, residual blocks, two stride-2
//! transposed convolutions) with a 7×7 tanh head. Encoders stack five 4×4
//! stride-2 convolutions of widths `w, 2w, 4w, 8w, 16w`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Activation, Checkpoint, Graph, Parameter, Tensor, Var};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Width/depth/resolution of the networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    /// Width of the first layer; 32 in the reference architecture.
    pub base_width: usize,
    /// Residual blocks in each encoder-decoder; 9 in the reference.
    pub n_res_blocks: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ArchConfig {
    /// The reference configuration at 224×224.
    pub fn reference(input_channels: usize) -> Self {
        Self { base_width: 32, n_res_blocks: 9, input_channels, output_channels: 3, height: 224, width: 224 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.n_res_blocks == 0 {
            return Err(Error::Config("base_width and n_res_blocks must be positive".into()));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "spatial extents {}x{} must be positive multiples of 4",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn store(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for (k, v) in [
            ("base_width", self.base_width),
            ("n_res_blocks", self.n_res_blocks),
            ("input_channels", self.input_channels),
            ("output_channels", self.output_channels),
            ("height", self.height),
            ("width", self.width),
        ] {
            ckpt.insert_scalar(format!("meta.{prefix}.{k}"), v as f32);
        }
    }

    pub fn load(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let get = |k: &str| ckpt.scalar(&format!("meta.{prefix}.{k}")).map(|v| v as usize);
        Ok(Self {
            base_width: get("base_width")?,
            n_res_blocks: get("n_res_blocks")?,
            input_channels: get("input_channels")?,
            output_channels: get("output_channels")?,
            height: get("height")?,
            width: get("width")?,
        })
    }
}

/// How a forward pass binds parameters into the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    /// Parameters receive gradients.
    Train,
    /// Parameters are constants.
    Frozen,
}

fn bind<'p>(g: &mut Graph<'p>, p: &'p Parameter, mode: Bind) -> Var {
    match mode {
        Bind::Train => g.param(p),
        Bind::Frozen => g.frozen(p),
    }
}

/// Collection of named parameters.
pub trait Network {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.numel()).sum()
    }

    fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.zero_grad());
    }
}

fn normal_init(name: String, shape: &[usize], rng: &mut impl Rng) -> Parameter {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Parameter::new(name, Tensor::new(shape, data).expect("shape matches"))
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub pad: usize,
    /// Reflection instead of zero padding.
    pub reflect: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, reflect: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: normal_init(format!("{name}.weight"), &[cout, cin, k, k], rng),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad,
            reflect,
        }
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var, mode: Bind) -> Result<Var> {
        let (w, b) = (bind(g, &self.weight, mode), bind(g, &self.bias, mode));
        if self.reflect && self.pad > 0 {
            let padded = g.reflect_pad(x, self.pad)?;
            g.conv2d(padded, w, Some(b), self.stride, 0)
        } else {
            g.conv2d(x, w, Some(b), self.stride, self.pad)
        }
    }

    fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// 4×4, stride-2, pad-1 transposed convolution (doubles the extents).
#[derive(Debug, Clone)]
pub struct UpConv {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl UpConv {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: normal_init(format!("{name}.weight"), &[cin, cout, 4, 4], rng),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var, mode: Bind) -> Result<Var> {
        let (w, b) = (bind(g, &self.weight, mode), bind(g, &self.bias, mode));
        g.conv_transpose2d(x, w, Some(b), 2, 1)
    }
}

#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl InstanceNorm {
    fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var, mode: Bind) -> Result<Var> {
        let (gamma, beta) = (bind(g, &self.gamma, mode), bind(g, &self.beta, mode));
        g.instance_norm(x, gamma, beta, INSTANCE_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv_a: Conv,
    pub norm_a: InstanceNorm,
    pub conv_b: Conv,
    pub norm_b: InstanceNorm,
}

impl ResBlock {
    fn new(name: &str, ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv_a: Conv::new(&format!("{name}.conv_a"), ch, ch, 3, 1, 1, false, rng),
            norm_a: InstanceNorm::new(&format!("{name}.norm_a"), ch),
            conv_b: Conv::new(&format!("{name}.conv_b"), ch, ch, 3, 1, 1, false, rng),
            norm_b: InstanceNorm::new(&format!("{name}.norm_b"), ch),
        }
    }

    /// `x + block(x)`.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var, mode: Bind) -> Result<Var> {
        let h = self.conv_a.forward(g, x, mode)?;
        let h = self.norm_a.forward(g, h, mode)?;
        let h = g.activation(h, Activation::Relu)?;
        let h = self.conv_b.forward(g, h, mode)?;
        let h = self.norm_b.forward(g, h, mode)?;
        g.add(x, h)
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.conv_a.params().to_vec();
        v.extend([&self.norm_a.gamma, &self.norm_a.beta]);
        v.extend(self.conv_b.params());
        v.extend([&self.norm_b.gamma, &self.norm_b.beta]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = self.conv_a.params_mut().into_iter().collect();
        v.extend([&mut self.norm_a.gamma, &mut self.norm_a.beta]);
        v.extend(self.conv_b.params_mut());
        v.extend([&mut self.norm_b.gamma, &mut self.norm_b.beta]);
        v
    }
}

/// Shape-preserving encoder-decoder used for `F`, `F_a⁻¹` and `F_m⁻¹`.
#[derive(Debug, Clone)]
pub struct EncoderDecoder {
    pub name: String,
    pub config: ArchConfig,
    pub stem: Conv,
    pub stem_norm: InstanceNorm,
    pub down1: Conv,
    pub down1_norm: InstanceNorm,
    pub down2: Conv,
    pub down2_norm: InstanceNorm,
    pub blocks: Vec<ResBlock>,
    pub up1: UpConv,
    pub up1_norm: InstanceNorm,
    pub up2: UpConv,
    pub up2_norm: InstanceNorm,
    /// 7×7 projection to `output_channels`, followed by tanh; no normalization.
    pub head: Conv,
}

impl EncoderDecoder {
    pub fn new(name: &str, config: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = config.base_width;
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            name: name.to_string(),
            config,
            stem: Conv::new(&n("conv1"), config.input_channels, w, 7, 1, 3, true, rng),
            stem_norm: InstanceNorm::new(&n("conv1.norm"), w),
            down1: Conv::new(&n("conv2"), w, 2 * w, 4, 2, 1, false, rng),
            down1_norm: InstanceNorm::new(&n("conv2.norm"), 2 * w),
            down2: Conv::new(&n("conv3"), 2 * w, 4 * w, 4, 2, 1, false, rng),
            down2_norm: InstanceNorm::new(&n("conv3.norm"), 4 * w),
            blocks: (0..config.n_res_blocks).map(|i| ResBlock::new(&n(&format!("res{i}")), 4 * w, rng)).collect(),
            up1: UpConv::new(&n("up1"), 4 * w, 2 * w, rng),
            up1_norm: InstanceNorm::new(&n("up1.norm"), 2 * w),
            up2: UpConv::new(&n("up2"), 2 * w, w, rng),
            up2_norm: InstanceNorm::new(&n("up2.norm"), w),
            head: Conv::new(&n("head"), w, config.output_channels, 7, 1, 3, false, rng),
        })
    }

    fn check_input(&self, g: &Graph<'_>, x: Var) -> Result<()> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("{}: extents {h}x{w} are not divisible by 4", self.name)));
        }
        if c != self.config.input_channels {
            return Err(Error::Dimension(format!(
                "{}: expected {} input channels, got {c}",
                self.name, self.config.input_channels
            )));
        }
        Ok(())
    }

    /// Everything up to (not including) the output head: `[N, w, H, W]`.
    pub fn features<'p>(&'p self, g: &mut Graph<'p>, x: Var, mode: Bind) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = x;
        for (conv, norm) in [(&self.stem, &self.stem_norm), (&self.down1, &self.down1_norm), (&self.down2, &self.down2_norm)] {
            h = conv.forward(g, h, mode)?;
            h = norm.forward(g, h, mode)?;
            h = g.activation(h, Activation::Relu)?;
        }
        for block in &self.blocks {
            h = block.forward(g, h, mode)?;
        }
        for (up, norm) in [(&self.up1, &self.up1_norm), (&self.up2, &self.up2_norm)] {
            h = up.forward(g, h, mode)?;
            h = norm.forward(g, h, mode)?;
            h = g.activation(h, Activation::Relu)?;
        }
        Ok(h)
    }

    /// `[N, Cin, H, W] -> [N, Cout, H, W]` with values in (−1, 1).
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var, mode: Bind) -> Result<Var> {
        let h = self.features(g, x, mode)?;
        let h = self.head.forward(g, h, mode)?;
        g.activation(h, Activation::Tanh)
    }
}

impl Network for EncoderDecoder {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = Vec::new();
        v.extend(self.stem.params());
        v.extend([&self.stem_norm.gamma, &self.stem_norm.beta]);
        v.extend(self.down1.params());
        v.extend([&self.down1_norm.gamma, &self.down1_norm.beta]);
        v.extend(self.down2.params());
        v.extend([&self.down2_norm.gamma, &self.down2_norm.beta]);
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend([&self.up1.weight, &self.up1.bias, &self.up1_norm.gamma, &self.up1_norm.beta]);
        v.extend([&self.up2.weight, &self.up2.bias, &self.up2_norm.gamma, &self.up2_norm.beta]);
        v.extend(self.head.params());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = Vec::new();
        v.extend(self.stem.params_mut());
        v.extend([&mut self.stem_norm.gamma, &mut self.stem_norm.beta]);
        v.extend(self.down1.params_mut());
        v.extend([&mut self.down1_norm.gamma, &mut self.down1_norm.beta]);
        v.extend(self.down2.params_mut());
        v.extend([&mut self.down2_norm.gamma, &mut self.down2_norm.beta]);
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend([&mut self.up1.weight, &mut self.up1.bias, &mut self.up1_norm.gamma, &mut self.up1_norm.beta]);
        v.extend([&mut self.up2.weight, &mut self.up2.bias, &mut self.up2_norm.gamma, &mut self.up2_norm.beta]);
        v.extend(self.head.params_mut());
        v
    }
}

/// What sits on top of an [`Encoder`]'s convolution stack.
#[derive(Debug, Clone)]
pub enum EncoderHead {
    /// Global average pooling and an affine map to `K` logits.
    Classifier { weight: Parameter, bias: Parameter },
    /// 1×1 convolution to a one-channel score map.
    Discriminator(Conv),
}

/// Five 4×4 stride-2 convolutions with leaky-ReLU(0.2).
///
/// Instance normalization follows layers 1–4 of the classifier and layers
/// 2–4 of the discriminator. The fifth layer is left unnormalized: at toy
/// resolution its map is 1×1, where instance statistics are undefined.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub name: String,
    pub convs: Vec<Conv>,
    pub norms: Vec<Option<InstanceNorm>>,
    pub head: EncoderHead,
}

pub const ENCODER_DEPTH: usize = 5;

impl Encoder {
    pub fn classifier(name: &str, base_width: usize, in_channels: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("a classifier needs at least 2 classes, got {classes}")));
        }
        let (convs, norms) = Self::stack(name, base_width, in_channels, true, rng)?;
        let feat = base_width << (ENCODER_DEPTH - 1);
        let head = EncoderHead::Classifier {
            weight: normal_init(format!("{name}.fc.weight"), &[classes, feat], rng),
            bias: Parameter::new(format!("{name}.fc.bias"), Tensor::zeros(&[classes])),
        };
        Ok(Self { name: name.to_string(), convs, norms, head })
    }

    pub fn discriminator(name: &str, base_width: usize, in_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let (convs, norms) = Self::stack(name, base_width, in_channels, false, rng)?;
        let feat = base_width << (ENCODER_DEPTH - 1);
        let head = EncoderHead::Discriminator(Conv::new(&format!("{name}.score"), feat, 1, 1, 1, 0, false, rng));
        Ok(Self { name: name.to_string(), convs, norms, head })
    }

    #[allow(clippy::type_complexity)]
    fn stack(
        name: &str,
        base_width: usize,
        in_channels: usize,
        norm_first: bool,
        rng: &mut impl Rng,
    ) -> Result<(Vec<Conv>, Vec<Option<InstanceNorm>>)> {
        if base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = in_channels;
        for i in 0..ENCODER_DEPTH {
            let cout = base_width << i;
            let lname = format!("{name}.conv{}", i + 1);
            convs.push(Conv::new(&lname, cin, cout, 4, 2, 1, false, rng));
            let normed = i < ENCODER_DEPTH - 1 && (i > 0 || norm_first);
            norms.push(normed.then(|| InstanceNorm::new(&format!("{lname}.norm"), cout)));
            cin = cout;
        }
        Ok((convs, norms))
    }

    /// Output of the convolution stack: `[N, 16w, H/32, W/32]`.
    pub fn features<'p>(&'p self, g: &mut Graph<'p>, x: Var, mode: Bind) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let div = 1 << ENCODER_DEPTH;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!("{}: extents {h}x{w} are not divisible by {div}", self.name)));
        }
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(g, h, mode)?;
            if let Some(norm) = norm {
                h = norm.forward(g, h, mode)?;
            }
            h = g.activation(h, Activation::LeakyRelu)?;
        }
        Ok(h)
    }

    /// Logits `[N, K]` for a classifier, score map `[N, 1, H/32, W/32]` for a
    /// discriminator.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var, mode: Bind) -> Result<Var> {
        let h = self.features(g, x, mode)?;
        match &self.head {
            EncoderHead::Classifier { weight, bias } => {
                let pooled = g.mean_spatial(h)?;
                let (w, b) = (bind(g, weight, mode), bind(g, bias, mode));
                g.linear(pooled, w, b)
            }
            EncoderHead::Discriminator(conv) => conv.forward(g, h, mode),
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match &self.head {
            EncoderHead::Classifier { bias, .. } => Some(bias.value.numel()),
            EncoderHead::Discriminator(_) => None,
        }
    }
}

impl Network for Encoder {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            v.extend(c.params());
            if let Some(n) = n {
                v.extend([&n.gamma, &n.beta]);
            }
        }
        match &self.head {
            EncoderHead::Classifier { weight, bias } => v.extend([weight, bias]),
            EncoderHead::Discriminator(c) => v.extend(c.params()),
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = Vec::new();
        for (c, n) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            v.extend(c.params_mut());
            if let Some(n) = n {
                v.extend([&mut n.gamma, &mut n.beta]);
            }
        }
        match &mut self.head {
            EncoderHead::Classifier { weight, bias } => v.extend([weight, bias]),
            EncoderHead::Discriminator(c) => v.extend(c.params_mut()),
        }
        v
    }
}

/// Channels of the motion decoder head for clips of `frames` frames with
/// `channels` colour channels: `(T−1)(2+C)`.
pub fn motion_channels(frames: usize, channels: usize) -> usize {
    (frames - 1) * (2 + channels)
}

/// The full set of jointly trained networks.
#[derive(Debug, Clone)]
pub struct IfsModels {
    pub generator: EncoderDecoder,
    pub appearance: EncoderDecoder,
    pub motion: EncoderDecoder,
    pub classifier: Encoder,
    pub discriminator: Encoder,
}

impl IfsModels {
    /// `generator_config` carries the generator's input channels and the
    /// synthetic frame's channel count `C`; the decoders derive theirs.
    pub fn new(generator_config: ArchConfig, frames: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if frames < 2 {
            return Err(Error::Config(format!("clips need at least 2 frames, got {frames}")));
        }
        let c = generator_config.output_channels;
        let appearance_cfg = ArchConfig { input_channels: c, output_channels: c, ..generator_config };
        let motion_cfg = ArchConfig { input_channels: c, output_channels: motion_channels(frames, c), ..generator_config };
        Ok(Self {
            generator: EncoderDecoder::new("F", generator_config, rng)?,
            appearance: EncoderDecoder::new("Fa", appearance_cfg, rng)?,
            motion: EncoderDecoder::new("Fm", motion_cfg, rng)?,
            classifier: Encoder::classifier("C", generator_config.base_width, c, classes, rng)?,
            discriminator: Encoder::discriminator("D", generator_config.base_width, c, rng)?,
        })
    }

    pub fn networks(&self) -> [&dyn Network; 5] {
        [&self.generator, &self.appearance, &self.motion, &self.classifier, &self.discriminator]
    }

    pub fn all_parameters(&self) -> Vec<&Parameter> {
        self.networks().iter().flat_map(|n| n.parameters()).collect()
    }

    pub fn all_parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.generator.parameters_mut();
        v.extend(self.appearance.parameters_mut());
        v.extend(self.motion.parameters_mut());
        v.extend(self.classifier.parameters_mut());
        v.extend(self.discriminator.parameters_mut());
        v
    }

    pub fn zero_grad(&self) {
        self.networks().iter().for_each(|n| n.zero_grad());
    }
}
