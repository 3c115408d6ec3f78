//! Declarative layer stacks for the seven sub-networks and the arithmetic that
//! can be done on them without allocating parameters: output shapes,
//! receptive fields and parameter counts.
//!
//! Channel widths default to the reference configuration. [`Width`] scales
//! every hidden width down uniformly for desk-scale training while keeping
//! the layer structure, kernel sizes, strides and dilations intact.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    Batch,
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Tanh,
}

/// Zero padding applied before and after each spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Padding {
    pub before: usize,
    pub after: usize,
}

impl Padding {
    pub const fn symmetric(p: usize) -> Self {
        Self { before: p, after: p }
    }

    pub const fn total(self) -> usize {
        self.before + self.after
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution that preserves spatial size for odd kernels.
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: Padding::symmetric(kernel / 2),
            dilation: 1,
            bias: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn effective_kernel(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn output_size(&self, input: usize) -> Option<usize> {
        let padded = input + self.padding.total();
        let k = self.effective_kernel();
        if padded < k {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + if self.bias { self.out_ch } else { 0 }
    }
}

/// Transposed convolution; `padding` is removed symmetrically from the full
/// output and `output_padding` extends the trailing edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeconvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub bias: bool,
}

impl DeconvSpec {
    /// Kernel 3, stride 2, padding 1, output padding 1: exact 2x upsampling.
    pub fn double(in_ch: usize, out_ch: usize) -> Self {
        Self { in_ch, out_ch, kernel: 3, stride: 2, padding: 1, output_padding: 1, bias: false }
    }

    pub fn output_size(&self, input: usize) -> Option<usize> {
        let full = (input - 1) * self.stride + self.kernel + self.output_padding;
        full.checked_sub(2 * self.padding).filter(|&s| s > 0)
    }

    pub fn param_count(&self) -> usize {
        self.in_ch * self.out_ch * self.kernel * self.kernel + if self.bias { self.out_ch } else { 0 }
    }
}

/// Two 3x3 convolutions with normalization, an identity skip (or a 1x1
/// projection plus normalization when the width changes) and an optional
/// ReLU after the sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub dilation: usize,
    pub norm: NormKind,
    pub post_relu: bool,
}

impl ResidualSpec {
    pub fn first_conv(&self) -> ConvSpec {
        ConvSpec {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: 3,
            stride: 1,
            padding: Padding::symmetric(self.dilation),
            dilation: self.dilation,
            bias: false,
        }
    }

    pub fn second_conv(&self) -> ConvSpec {
        ConvSpec { in_ch: self.out_ch, ..self.first_conv() }
    }

    pub fn projection(&self) -> Option<ConvSpec> {
        (self.in_ch != self.out_ch).then(|| ConvSpec::same(self.in_ch, self.out_ch, 1))
    }

    pub fn param_count(&self) -> usize {
        let norm = |c: usize| norm_params(self.norm, c);
        let mut n = self.first_conv().param_count() + norm(self.out_ch);
        n += self.second_conv().param_count() + norm(self.out_ch);
        if let Some(p) = self.projection() {
            n += p.param_count() + norm(self.out_ch);
        }
        n
    }
}

/// Batch norm carries a learned scale and shift; instance norm is not affine.
fn norm_params(kind: NormKind, channels: usize) -> usize {
    match kind {
        NormKind::Batch => 2 * channels,
        NormKind::Instance => 0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    Deconv(DeconvSpec),
    Norm { kind: NormKind, channels: usize },
    Act(Activation),
    MaxPool { kernel: usize, stride: usize },
    Residual(ResidualSpec),
    /// Parameter-free bilinear resize by an integer factor.
    Upsample { factor: usize },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::Deconv(_) => "deconv",
            LayerSpec::Norm { .. } => "norm",
            LayerSpec::Act(_) => "activation",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Residual(_) => "residual",
            LayerSpec::Upsample { .. } => "upsample",
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.param_count(),
            LayerSpec::Deconv(d) => d.param_count(),
            LayerSpec::Norm { kind, channels } => norm_params(*kind, *channels),
            LayerSpec::Residual(r) => r.param_count(),
            LayerSpec::Act(_) | LayerSpec::MaxPool { .. } | LayerSpec::Upsample { .. } => 0,
        }
    }

    /// Channel count this layer expects, if it constrains it.
    fn expects_channels(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv(c) => Some(c.in_ch),
            LayerSpec::Deconv(d) => Some(d.in_ch),
            LayerSpec::Norm { channels, .. } => Some(*channels),
            LayerSpec::Residual(r) => Some(r.in_ch),
            _ => None,
        }
    }

    fn apply(&self, index: usize, shape: Shape) -> Result<Shape> {
        if let Some(expected) = self.expects_channels() {
            if expected != shape.channels {
                return Err(Error::shape(
                    index,
                    format!("{} expects {} channels, got {}", self.kind_name(), expected, shape.channels),
                ));
            }
        }
        let too_small = || Error::shape(index, format!("{} input {}x{} is too small", self.kind_name(), shape.height, shape.width));
        match self {
            LayerSpec::Conv(c) => Ok(Shape {
                channels: c.out_ch,
                height: c.output_size(shape.height).ok_or_else(too_small)?,
                width: c.output_size(shape.width).ok_or_else(too_small)?,
            }),
            LayerSpec::Deconv(d) => Ok(Shape {
                channels: d.out_ch,
                height: d.output_size(shape.height).ok_or_else(too_small)?,
                width: d.output_size(shape.width).ok_or_else(too_small)?,
            }),
            LayerSpec::Norm { .. } | LayerSpec::Act(_) => Ok(shape),
            LayerSpec::MaxPool { kernel, stride } => {
                if !shape.height.is_multiple_of(*stride) || !shape.width.is_multiple_of(*stride) {
                    return Err(Error::shape(
                        index,
                        format!("maxpool stride {stride} does not divide {}x{}", shape.height, shape.width),
                    ));
                }
                if shape.height < *kernel || shape.width < *kernel {
                    return Err(too_small());
                }
                Ok(Shape { channels: shape.channels, height: shape.height / stride, width: shape.width / stride })
            }
            LayerSpec::Residual(r) => {
                let conv = r.first_conv();
                let h = conv.output_size(shape.height).ok_or_else(too_small)?;
                let w = conv.output_size(shape.width).ok_or_else(too_small)?;
                debug_assert_eq!((h, w), (shape.height, shape.width));
                Ok(Shape { channels: r.out_ch, height: h, width: w })
            }
            LayerSpec::Upsample { factor } => Ok(Shape {
                channels: shape.channels,
                height: shape.height * factor,
                width: shape.width * factor,
            }),
        }
    }
}

/// Channels x height x width of one feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn identity(name: &str, channels: usize) -> Self {
        Self { name: name.into(), in_channels: channels, layers: Vec::new() }
    }

    /// Checks channel bookkeeping between consecutive layers.
    pub fn validate(&self) -> Result<()> {
        let mut channels = self.in_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(expected) = layer.expects_channels() {
                if expected != channels {
                    return Err(Error::shape(
                        i,
                        format!("{} expects {} channels, previous layer yields {}", layer.kind_name(), expected, channels),
                    ));
                }
            }
            match layer {
                LayerSpec::Conv(c) if c.kernel == 0 || c.stride == 0 || c.dilation == 0 => {
                    return Err(Error::shape(i, "conv kernel, stride and dilation must be positive"));
                }
                LayerSpec::Deconv(d) if d.kernel == 0 || d.stride == 0 || d.output_padding >= d.stride => {
                    return Err(Error::shape(i, "deconv needs positive kernel/stride and output_padding < stride"));
                }
                LayerSpec::MaxPool { kernel, stride } if *kernel == 0 || *stride == 0 => {
                    return Err(Error::shape(i, "maxpool kernel and stride must be positive"));
                }
                LayerSpec::Upsample { factor } if *factor == 0 => {
                    return Err(Error::shape(i, "upsample factor must be positive"));
                }
                _ => {}
            }
            channels = match layer {
                LayerSpec::Conv(c) => c.out_ch,
                LayerSpec::Deconv(d) => d.out_ch,
                LayerSpec::Residual(r) => r.out_ch,
                _ => channels,
            };
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.layers.iter().fold(self.in_channels, |c, layer| match layer {
            LayerSpec::Conv(s) => s.out_ch,
            LayerSpec::Deconv(s) => s.out_ch,
            LayerSpec::Residual(s) => s.out_ch,
            _ => c,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Stable textual fingerprint used to tie checkpoints to architectures.
    pub fn fingerprint(&self) -> String {
        format!("{}:{}:{:?}", self.name, self.in_channels, self.layers)
    }
}

/// Exact forward output shape, without building the network.
pub fn predict_output_shape(spec: &NetworkSpec, input: Shape) -> Result<Shape> {
    if input.channels != spec.in_channels {
        return Err(Error::shape(
            0,
            format!("network `{}` takes {} channels, got {}", spec.name, spec.in_channels, input.channels),
        ));
    }
    if input.height == 0 || input.width == 0 {
        return Err(Error::shape(0, "input spatial size must be positive"));
    }
    spec.layers.iter().enumerate().try_fold(input, |shape, (i, layer)| layer.apply(i, shape))
}

/// Side length of the input window seen by one output unit.
///
/// Supports convolutions, max-pooling, residual blocks (through their
/// deepest path) and pointwise layers.
pub fn receptive_field(spec: &NetworkSpec) -> Result<usize> {
    let mut field = 1usize;
    let mut jump = 1usize;
    let mut grow = |k: usize, s: usize| {
        field += (k - 1) * jump;
        jump *= s;
    };
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv(c) => grow(c.effective_kernel(), c.stride),
            LayerSpec::MaxPool { kernel, stride } => grow(*kernel, *stride),
            LayerSpec::Residual(r) => {
                grow(r.first_conv().effective_kernel(), 1);
                grow(r.second_conv().effective_kernel(), 1);
            }
            LayerSpec::Norm { .. } | LayerSpec::Act(_) => {}
            LayerSpec::Deconv(_) | LayerSpec::Upsample { .. } => {
                return Err(Error::shape(i, format!("receptive field undefined for {}", layer.kind_name())));
            }
        }
    }
    Ok(field)
}

/// Inputs smaller than the receptive field are valid but every output unit
/// then sees padding; returns a human-readable warning in that case.
pub fn coverage_warning(spec: &NetworkSpec, input: Shape) -> Option<String> {
    let rf = receptive_field(spec).ok()?;
    (input.height < rf || input.width < rf).then(|| {
        format!(
            "`{}` input {}x{} is smaller than its {}x{} receptive field",
            spec.name, input.height, input.width, rf, rf
        )
    })
}

/// Uniform down-scaling of hidden channel widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Width {
    pub divisor: usize,
    pub min: usize,
}

impl Width {
    pub const FULL: Width = Width { divisor: 1, min: 1 };

    pub const fn scaled(divisor: usize, min: usize) -> Self {
        Self { divisor, min }
    }

    pub fn ch(self, reference: usize) -> usize {
        let scaled = reference / self.divisor.max(1);
        scaled.max(self.min).max(1)
    }
}

impl Default for Width {
    fn default() -> Self {
        Self::FULL
    }
}

fn conv_norm_act(layers: &mut Vec<LayerSpec>, conv: ConvSpec, norm: NormKind, act: Activation) {
    let out = conv.out_ch;
    layers.push(LayerSpec::Conv(conv));
    layers.push(LayerSpec::Norm { kind: norm, channels: out });
    layers.push(LayerSpec::Act(act));
}

fn check_channels(name: &'static str, value: usize, min: usize) -> Result<()> {
    if value < min {
        return Err(Error::config(name, format!("must be at least {min}, got {value}")));
    }
    Ok(())
}

/// Source-to-target generator: three convolutions, nine residual blocks, two
/// deconvolutions and a tanh-bounded output convolution.
pub fn build_generator_t(in_channels: usize) -> Result<NetworkSpec> {
    generator_spec(in_channels, Width::FULL)
}

pub fn generator_spec(in_channels: usize, width: Width) -> Result<NetworkSpec> {
    check_channels("in_channels", in_channels, 1)?;
    let (c1, c2, c3) = (width.ch(64), width.ch(128), width.ch(256));
    let mut layers = Vec::new();
    let inorm = NormKind::Instance;
    conv_norm_act(&mut layers, ConvSpec::same(in_channels, c1, 7), inorm, Activation::Relu);
    conv_norm_act(&mut layers, ConvSpec::same(c1, c2, 3).with_stride(2), inorm, Activation::Relu);
    conv_norm_act(&mut layers, ConvSpec::same(c2, c3, 3).with_stride(2), inorm, Activation::Relu);
    for _ in 0..9 {
        layers.push(LayerSpec::Residual(ResidualSpec { in_ch: c3, out_ch: c3, dilation: 1, norm: inorm, post_relu: false }));
    }
    for (cin, cout) in [(c3, c2), (c2, c1)] {
        layers.push(LayerSpec::Deconv(DeconvSpec::double(cin, cout)));
        layers.push(LayerSpec::Norm { kind: inorm, channels: cout });
        layers.push(LayerSpec::Act(Activation::Relu));
    }
    layers.push(LayerSpec::Conv(ConvSpec::same(c1, in_channels, 7).with_bias(true)));
    layers.push(LayerSpec::Act(Activation::Tanh));
    Ok(NetworkSpec { name: "G_t".into(), in_channels, layers })
}

/// Shared encoder:
/// `C16, R16, M, R32, M, 2xR64, M, 2xR128, 4xR256, 2xR512, 2xD512, 2xC512`.
pub fn build_encoder() -> NetworkSpec {
    encoder_spec(1, Width::FULL)
}

pub fn encoder_spec(in_channels: usize, width: Width) -> NetworkSpec {
    let bn = NormKind::Batch;
    let mut layers = Vec::new();
    let mut ch = width.ch(16);
    conv_norm_act(&mut layers, ConvSpec::same(in_channels, ch, 3), bn, Activation::Relu);
    let res = |layers: &mut Vec<LayerSpec>, ch: &mut usize, out: usize, dilation: usize| {
        layers.push(LayerSpec::Residual(ResidualSpec { in_ch: *ch, out_ch: out, dilation, norm: bn, post_relu: true }));
        *ch = out;
    };
    let pool = LayerSpec::MaxPool { kernel: 2, stride: 2 };
    res(&mut layers, &mut ch, width.ch(16), 1);
    layers.push(pool.clone());
    res(&mut layers, &mut ch, width.ch(32), 1);
    layers.push(pool.clone());
    for _ in 0..2 {
        res(&mut layers, &mut ch, width.ch(64), 1);
    }
    layers.push(pool);
    for _ in 0..2 {
        res(&mut layers, &mut ch, width.ch(128), 1);
    }
    for _ in 0..4 {
        res(&mut layers, &mut ch, width.ch(256), 1);
    }
    for _ in 0..2 {
        res(&mut layers, &mut ch, width.ch(512), 1);
    }
    for _ in 0..2 {
        res(&mut layers, &mut ch, width.ch(512), 2);
    }
    for _ in 0..2 {
        conv_norm_act(&mut layers, ConvSpec::same(ch, width.ch(512), 3), bn, Activation::Relu);
        ch = width.ch(512);
    }
    NetworkSpec { name: "E".into(), in_channels, layers }
}

/// Checks that an input survives the encoder's three stride-2 poolings.
pub fn check_encoder_input(input: Shape) -> Result<()> {
    if !input.height.is_multiple_of(8) || !input.width.is_multiple_of(8) || input.height == 0 || input.width == 0 {
        return Err(Error::shape(
            0,
            format!("encoder input {}x{} must be a positive multiple of 8", input.height, input.width),
        ));
    }
    Ok(())
}

/// Decoder completing the target-to-source generator `U(E(.))`: one
/// convolution, four residual blocks, three 2x deconvolutions and a
/// tanh-bounded output convolution.
pub fn build_decoder_u(out_channels: usize) -> Result<NetworkSpec> {
    decoder_spec(out_channels, Width::FULL)
}

pub fn decoder_spec(out_channels: usize, width: Width) -> Result<NetworkSpec> {
    check_channels("out_channels", out_channels, 1)?;
    let inorm = NormKind::Instance;
    let feat = width.ch(512);
    let base = width.ch(128);
    let mut layers = Vec::new();
    conv_norm_act(&mut layers, ConvSpec::same(feat, base, 3), inorm, Activation::Relu);
    for _ in 0..4 {
        layers.push(LayerSpec::Residual(ResidualSpec { in_ch: base, out_ch: base, dilation: 1, norm: inorm, post_relu: false }));
    }
    let ups = [(base, width.ch(64)), (width.ch(64), width.ch(64)), (width.ch(64), width.ch(32))];
    for (cin, cout) in ups {
        layers.push(LayerSpec::Deconv(DeconvSpec::double(cin, cout)));
        layers.push(LayerSpec::Norm { kind: inorm, channels: cout });
        layers.push(LayerSpec::Act(Activation::Relu));
    }
    layers.push(LayerSpec::Conv(ConvSpec::same(width.ch(32), out_channels, 7).with_bias(true)));
    layers.push(LayerSpec::Act(Activation::Tanh));
    Ok(NetworkSpec { name: "U".into(), in_channels: feat, layers })
}

/// Pixel classifier: 1x1 convolution to `classes` logits and a bilinear
/// resize back to the input resolution.
pub fn build_classifier_c(classes: usize) -> Result<NetworkSpec> {
    classifier_spec(classes, Width::FULL)
}

pub fn classifier_spec(classes: usize, width: Width) -> Result<NetworkSpec> {
    check_channels("classes", classes, 2)?;
    let feat = width.ch(512);
    Ok(NetworkSpec {
        name: "C".into(),
        in_channels: feat,
        layers: alloc::vec![
            LayerSpec::Conv(ConvSpec::same(feat, classes, 1).with_bias(true)),
            LayerSpec::Upsample { factor: 8 },
        ],
    })
}

/// PatchGAN discriminator: five 4x4 convolutions with strides
/// `{2, 2, 2, 1, 1}` and widths `{64, 128, 256, 512, 1}`, instance norm and
/// leaky ReLU (0.2) after the first four. The output is a raw score map.
///
/// Stride-2 layers pad one pixel on each side; stride-1 layers pad one before
/// and two after so the map keeps its size.
pub fn build_patch_discriminator(in_channels: usize) -> Result<NetworkSpec> {
    patch_discriminator_spec(in_channels, Width::FULL)
}

pub fn patch_discriminator_spec(in_channels: usize, width: Width) -> Result<NetworkSpec> {
    check_channels("in_channels", in_channels, 1)?;
    let widths = [width.ch(64), width.ch(128), width.ch(256), width.ch(512)];
    let strides = [2, 2, 2, 1];
    let mut layers = Vec::new();
    let mut cin = in_channels;
    for (&cout, &stride) in widths.iter().zip(&strides) {
        let padding = if stride == 2 { Padding::symmetric(1) } else { Padding { before: 1, after: 2 } };
        let conv = ConvSpec { in_ch: cin, out_ch: cout, kernel: 4, stride, padding, dilation: 1, bias: false };
        conv_norm_act(&mut layers, conv, NormKind::Instance, Activation::LeakyRelu(0.2));
        cin = cout;
    }
    layers.push(LayerSpec::Conv(ConvSpec {
        in_ch: cin,
        out_ch: 1,
        kernel: 4,
        stride: 1,
        padding: Padding { before: 1, after: 2 },
        dilation: 1,
        bias: true,
    }));
    Ok(NetworkSpec { name: "D".into(), in_channels, layers })
}
