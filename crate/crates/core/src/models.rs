//! The three networks: U-Net generator, patch discriminator over
//! (condition, image) pairs, and the auto-encoder discriminator.
//!
//! All forward passes are pure functions of `(parameters, input)`. Batch
//! normalization always uses the statistics of the batch it sees, so
//! single-image inference is self-contained.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm2d, Conv2d, ConvGeometry, ConvTranspose2d, Layer, Linear, ParamLayout, ParameterSet,
    Sequential, Trace,
};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

const DOWN: ConvGeometry = ConvGeometry::new(4, 2, 1);
const PATCH_FLAT: ConvGeometry = ConvGeometry::new(4, 1, 1);
const SAME3: ConvGeometry = ConvGeometry::new(3, 1, 1);

fn check_input<T: Real>(context: &'static str, x: &Tensor<T>, channels: usize, size: usize) -> Result<()> {
    let [_, c, h, w] = x.shape();
    if c != channels || h != size || w != size {
        return Err(Error::shape(context, format!("Nx{channels}x{size}x{size}"), format!("{:?}", x.shape())));
    }
    Ok(())
}

/// U-Net generator description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Encoder levels; each halves the resolution.
    pub depth: usize,
}

impl GeneratorSpec {
    /// 64 base channels capped at 512, encoding down to a 1×1 bottleneck.
    pub fn for_image_size(image_size: usize) -> Self {
        Self {
            image_size,
            in_channels: 3,
            out_channels: 3,
            base_channels: 64,
            max_channels: 512,
            depth: full_depth(image_size),
        }
    }

    pub fn with_widths(mut self, base: usize, max: usize) -> Self {
        self.base_channels = base;
        self.max_channels = max;
        self
    }

    /// Channels produced by encoder level `i`.
    pub fn level_channels(&self, i: usize) -> usize {
        (self.base_channels << i.min(20)).min(self.max_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::InvalidArgument(format!("invalid generator spec {self:?}")));
        }
        if self.image_size % (1 << self.depth) != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} is not divisible by 2^{}",
                self.image_size, self.depth
            )));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Generator> {
        self.validate()?;
        let mut layout = ParamLayout::default();
        let d = self.depth;
        let mut down = Vec::with_capacity(d);
        for i in 0..d {
            let cin = if i == 0 { self.in_channels } else { self.level_channels(i - 1) };
            let cout = self.level_channels(i);
            let conv = Layer::Conv(Conv2d::register(&mut layout, &format!("g.down{i}.conv"), cin, cout, DOWN));
            let layers = if i == 0 {
                vec![conv]
            } else if i == d - 1 {
                vec![Layer::LeakyRelu(LEAKY_SLOPE), conv]
            } else {
                let bn = BatchNorm2d::register(&mut layout, &format!("g.down{i}.bn"), cout);
                vec![Layer::LeakyRelu(LEAKY_SLOPE), conv, Layer::BatchNorm(bn)]
            };
            down.push(Sequential::new(layers));
        }
        let mut up: Vec<Sequential> = Vec::with_capacity(d);
        for i in (0..d).rev() {
            // Level i consumes d_i (innermost) or cat(u_{i+1}, d_i).
            let cin = if i == d - 1 { self.level_channels(i) } else { 2 * self.level_channels(i) };
            let layers = if i == 0 {
                let t = ConvTranspose2d::register(&mut layout, "g.up0.deconv", cin, self.out_channels, DOWN);
                vec![Layer::Relu, Layer::ConvTranspose(t), Layer::Tanh]
            } else {
                let cout = self.level_channels(i - 1);
                let t = ConvTranspose2d::register(&mut layout, &format!("g.up{i}.deconv"), cin, cout, DOWN);
                let bn = BatchNorm2d::register(&mut layout, &format!("g.up{i}.bn"), cout);
                vec![Layer::Relu, Layer::ConvTranspose(t), Layer::BatchNorm(bn)]
            };
            up.push(Sequential::new(layers));
        }
        up.reverse();
        Ok(Generator {
            spec: self.clone(),
            layout,
            down,
            up,
        })
    }
}

/// Number of halvings from `size` down to 1 (or to an odd size).
pub fn full_depth(size: usize) -> usize {
    let mut d = 0;
    let mut s = size;
    while s > 1 && s % 2 == 0 {
        s /= 2;
        d += 1;
    }
    d
}

#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    layout: ParamLayout,
    down: Vec<Sequential>,
    up: Vec<Sequential>,
}

/// Activations of one generator pass, needed for its backward pass.
#[derive(Debug, Clone)]
pub struct GeneratorTrace<T> {
    down: Vec<Trace<T>>,
    up: Vec<Trace<T>>,
}

impl<T: Real> GeneratorTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.up[0].output()
    }
}

impl Generator {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_parameters<T: Real>(&self, seed: u64) -> ParameterSet<T> {
        ParameterSet::init(&self.layout, seed)
    }

    pub fn forward<T: Real>(&self, p: &ParameterSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_traced(p, x)?.output().clone())
    }

    /// Forward pass where skip `i` (joining encoder level `i` to the
    /// decoder) is replaced by zeros when `skips[i]` is false.
    pub fn forward_with_skips<T: Real>(
        &self,
        p: &ParameterSet<T>,
        x: &Tensor<T>,
        skips: &[bool],
    ) -> Result<Tensor<T>> {
        Ok(self.run(p, x, Some(skips))?.output().clone())
    }

    pub fn forward_traced<T: Real>(&self, p: &ParameterSet<T>, x: &Tensor<T>) -> Result<GeneratorTrace<T>> {
        self.run(p, x, None)
    }

    fn run<T: Real>(
        &self,
        p: &ParameterSet<T>,
        x: &Tensor<T>,
        skips: Option<&[bool]>,
    ) -> Result<GeneratorTrace<T>> {
        check_input("generator input", x, self.spec.in_channels, self.spec.image_size)?;
        let d = self.spec.depth;
        let mut down: Vec<Trace<T>> = Vec::with_capacity(d);
        for (i, seq) in self.down.iter().enumerate() {
            let input = if i == 0 { x.clone() } else { down[i - 1].output().clone() };
            down.push(seq.forward_traced(p, input));
        }
        let mut up: Vec<Option<Trace<T>>> = vec![None; d];
        for i in (0..d).rev() {
            let input = if i == d - 1 {
                down[i].output().clone()
            } else {
                let upper = up[i + 1].as_ref().unwrap().output();
                let enabled = skips.is_none_or(|s| s.get(i).copied().unwrap_or(true));
                if enabled {
                    Tensor::concat_channels(upper, down[i].output())
                } else {
                    Tensor::concat_channels(upper, &Tensor::zeros(down[i].output().shape()))
                }
            };
            up[i] = Some(self.up[i].forward_traced(p, input));
        }
        Ok(GeneratorTrace {
            down,
            up: up.into_iter().map(Option::unwrap).collect(),
        })
    }

    /// Accumulate parameter gradients for output gradient `dy`.
    pub fn backward<T: Real>(
        &self,
        p: &ParameterSet<T>,
        trace: &GeneratorTrace<T>,
        dy: Tensor<T>,
        grads: &mut ParameterSet<T>,
    ) {
        let d = self.spec.depth;
        // Gradient flowing into each encoder output through its skip.
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; d];
        let mut grad = dy;
        for i in 0..d {
            let dx = self.up[i]
                .backward(p, &trace.up[i], grad, Some(&mut *grads), true)
                .expect("input gradient requested");
            if i == d - 1 {
                skip_grads[i] = Some(dx);
                break;
            }
            let upper_channels = trace.up[i + 1].output().channels();
            let (d_upper, d_skip) = dx.split_channels(upper_channels);
            skip_grads[i] = Some(d_skip);
            grad = d_upper;
        }
        let mut carry: Option<Tensor<T>> = None;
        for i in (0..d).rev() {
            let mut g = skip_grads[i].take().expect("every level has a gradient");
            if let Some(c) = carry.take() {
                g.add_assign(&c);
            }
            carry = self.down[i].backward(p, &trace.down[i], g, Some(&mut *grads), i > 0);
        }
    }
}

/// Patch discriminator description: `strided_layers` stride-2 convolutions,
/// one stride-1 convolution, and a 1-channel stride-1 head, all 4×4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchDiscriminatorSpec {
    pub image_size: usize,
    pub input_channels: usize,
    pub base_channels: usize,
    pub max_multiplier: usize,
    pub strided_layers: usize,
}

impl PatchDiscriminatorSpec {
    /// The 70×70 configuration: three strided layers, 64 base channels.
    /// Inputs too small for that stack drop strided layers until it fits.
    pub fn for_image_size(image_size: usize) -> Self {
        let mut spec = Self {
            image_size,
            input_channels: 6,
            base_channels: 64,
            max_multiplier: 8,
            strided_layers: 3,
        };
        while spec.strided_layers > 0 && spec.output_size().is_none() {
            spec.strided_layers -= 1;
        }
        spec
    }

    pub fn with_base(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    fn schedule(&self) -> Vec<(usize, ConvGeometry)> {
        let mut s: Vec<(usize, ConvGeometry)> = Vec::new();
        let width = |n: usize| self.base_channels * (1usize << n.min(20)).min(self.max_multiplier);
        for n in 0..self.strided_layers {
            s.push((width(n), DOWN));
        }
        s.push((width(self.strided_layers), PATCH_FLAT));
        s.push((1, PATCH_FLAT));
        s
    }

    /// Side length of the score map, or `None` if the stack does not fit.
    pub fn output_size(&self) -> Option<usize> {
        self.schedule()
            .iter()
            .try_fold(self.image_size, |s, (_, g)| g.conv_out(s).filter(|&o| o > 0))
    }

    /// Input pixels seen by one output score.
    pub fn receptive_field(&self) -> usize {
        self.schedule()
            .iter()
            .rev()
            .fold(1, |rf, (_, g)| (rf - 1) * g.stride + g.kernel)
    }

    pub fn build(&self) -> Result<PatchDiscriminator> {
        if self.base_channels == 0 || self.input_channels == 0 || self.max_multiplier == 0 {
            return Err(Error::InvalidArgument(format!("invalid patch discriminator spec {self:?}")));
        }
        let out = self.output_size().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{} strided layers do not fit a {}px input",
                self.strided_layers, self.image_size
            ))
        })?;
        let mut layout = ParamLayout::default();
        let mut layers = Vec::new();
        let schedule = self.schedule();
        let mut cin = self.input_channels;
        for (i, &(cout, g)) in schedule.iter().enumerate() {
            let conv = Conv2d::register(&mut layout, &format!("d1.conv{i}"), cin, cout, g);
            layers.push(Layer::Conv(conv));
            if i + 1 == schedule.len() {
                layers.push(Layer::Sigmoid);
            } else {
                if i > 0 {
                    let bn = BatchNorm2d::register(&mut layout, &format!("d1.bn{i}"), cout);
                    layers.push(Layer::BatchNorm(bn));
                }
                layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
            }
            cin = cout;
        }
        Ok(PatchDiscriminator {
            spec: self.clone(),
            layout,
            net: Sequential::new(layers),
            output_size: out,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    spec: PatchDiscriminatorSpec,
    layout: ParamLayout,
    net: Sequential,
    output_size: usize,
}

impl PatchDiscriminator {
    pub fn spec(&self) -> &PatchDiscriminatorSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn output_size(&self) -> usize {
        self.output_size
    }

    pub fn init_parameters<T: Real>(&self, seed: u64) -> ParameterSet<T> {
        ParameterSet::init(&self.layout, seed)
    }

    fn joined<T: Real>(&self, condition: &Tensor<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let half = self.spec.input_channels / 2;
        check_input("patch discriminator condition", condition, half, self.spec.image_size)?;
        check_input("patch discriminator image", image, self.spec.input_channels - half, self.spec.image_size)?;
        if condition.batch() != image.batch() {
            return Err(Error::shape("patch discriminator batch", condition.batch(), image.batch()));
        }
        Ok(Tensor::concat_channels(condition, image))
    }

    /// Per-patch probabilities `[n, 1, s, s]` that `image` is a real
    /// rendering of `condition`.
    pub fn forward<T: Real>(&self, p: &ParameterSet<T>, condition: &Tensor<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.net.forward(p, &self.joined(condition, image)?))
    }

    pub fn forward_traced<T: Real>(
        &self,
        p: &ParameterSet<T>,
        condition: &Tensor<T>,
        image: &Tensor<T>,
    ) -> Result<Trace<T>> {
        Ok(self.net.forward_traced(p, self.joined(condition, image)?))
    }

    /// Backpropagate score gradients. Returns the gradient with respect to
    /// the judged image (not the condition) when `need_image_grad` is set.
    pub fn backward<T: Real>(
        &self,
        p: &ParameterSet<T>,
        trace: &Trace<T>,
        dscores: Tensor<T>,
        grads: Option<&mut ParameterSet<T>>,
        need_image_grad: bool,
    ) -> Option<Tensor<T>> {
        let dx = self.net.backward(p, trace, dscores, grads, need_image_grad)?;
        Some(dx.split_channels(self.spec.input_channels / 2).1)
    }
}

/// Auto-encoder discriminator: strided encoder to an `embedding_dim`
/// vector, decoder of nearest-neighbor upsampling and 3×3 convolutions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoEncoderSpec {
    pub image_size: usize,
    pub channels: usize,
    pub base_channels: usize,
    /// Number of 2× downsamplings (and upsamplings).
    pub levels: usize,
    pub embedding_dim: usize,
}

impl AutoEncoderSpec {
    /// Encodes down to an 8×8 map (or 1×1 for tiny inputs), 64-dim embedding.
    pub fn for_image_size(image_size: usize) -> Self {
        let levels = full_depth(image_size).saturating_sub(3);
        Self {
            image_size,
            channels: 3,
            base_channels: 64,
            levels,
            embedding_dim: 64,
        }
    }

    pub fn with_widths(mut self, base: usize, embedding_dim: usize) -> Self {
        self.base_channels = base;
        self.embedding_dim = embedding_dim;
        self
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.levels
    }

    pub fn build(&self) -> Result<AutoEncoder> {
        if self.base_channels == 0 || self.embedding_dim == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument(format!("invalid auto-encoder spec {self:?}")));
        }
        if self.levels >= usize::BITS as usize || self.image_size % (1 << self.levels) != 0 || self.bottleneck_size() == 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} does not support {} downsamplings",
                self.image_size, self.levels
            )));
        }
        let b = self.base_channels;
        let s = self.bottleneck_size();
        let mut layout = ParamLayout::default();
        let mut enc = vec![
            Layer::Conv(Conv2d::register(&mut layout, "d2.enc.in", self.channels, b, SAME3)),
            Layer::Elu,
        ];
        for l in 0..self.levels {
            let conv = Conv2d::register(&mut layout, &format!("d2.enc.down{l}"), b * (l + 1), b * (l + 2), DOWN);
            enc.extend([Layer::Conv(conv), Layer::Elu]);
        }
        let flat = b * (self.levels + 1) * s * s;
        enc.push(Layer::Linear(Linear::register(&mut layout, "d2.enc.fc", flat, self.embedding_dim)));

        let mut dec = vec![
            Layer::Linear(Linear::register(&mut layout, "d2.dec.fc", self.embedding_dim, b * s * s)),
            Layer::Reshape([b, s, s]),
            Layer::Elu,
        ];
        for l in 0..self.levels {
            let conv = Conv2d::register(&mut layout, &format!("d2.dec.up{l}"), b, b, SAME3);
            dec.extend([Layer::Upsample2x, Layer::Conv(conv), Layer::Elu]);
        }
        dec.push(Layer::Conv(Conv2d::register(&mut layout, "d2.dec.out", b, self.channels, SAME3)));
        dec.push(Layer::Tanh);
        Ok(AutoEncoder {
            spec: self.clone(),
            layout,
            encoder: Sequential::new(enc),
            decoder: Sequential::new(dec),
        })
    }
}

#[derive(Debug, Clone)]
pub struct AutoEncoder {
    spec: AutoEncoderSpec,
    layout: ParamLayout,
    encoder: Sequential,
    decoder: Sequential,
}

#[derive(Debug, Clone)]
pub struct AutoEncoderTrace<T> {
    encoder: Trace<T>,
    decoder: Trace<T>,
}

impl<T: Real> AutoEncoderTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.decoder.output()
    }

    pub fn embedding(&self) -> &Tensor<T> {
        self.encoder.output()
    }
}

impl AutoEncoder {
    pub fn spec(&self) -> &AutoEncoderSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_parameters<T: Real>(&self, seed: u64) -> ParameterSet<T> {
        ParameterSet::init(&self.layout, seed)
    }

    /// `[n, embedding_dim, 1, 1]` codes.
    pub fn encode<T: Real>(&self, p: &ParameterSet<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        check_input("auto-encoder input", v, self.spec.channels, self.spec.image_size)?;
        Ok(self.encoder.forward(p, v))
    }

    pub fn forward<T: Real>(&self, p: &ParameterSet<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        let code = self.encode(p, v)?;
        Ok(self.decoder.forward(p, &code))
    }

    pub fn forward_traced<T: Real>(&self, p: &ParameterSet<T>, v: &Tensor<T>) -> Result<AutoEncoderTrace<T>> {
        check_input("auto-encoder input", v, self.spec.channels, self.spec.image_size)?;
        let encoder = self.encoder.forward_traced(p, v.clone());
        let decoder = self.decoder.forward_traced(p, encoder.output().clone());
        Ok(AutoEncoderTrace { encoder, decoder })
    }

    /// Backpropagate a reconstruction gradient; returns the input gradient
    /// when requested.
    pub fn backward<T: Real>(
        &self,
        p: &ParameterSet<T>,
        trace: &AutoEncoderTrace<T>,
        dy: Tensor<T>,
        mut grads: Option<&mut ParameterSet<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let dcode = self
            .decoder
            .backward(p, &trace.decoder, dy, grads.as_deref_mut(), true)
            .expect("code gradient requested");
        self.encoder.backward(p, &trace.encoder, dcode, grads, need_input_grad)
    }
}

/// Specs of all three networks; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpecs {
    pub generator: GeneratorSpec,
    pub patch: PatchDiscriminatorSpec,
    pub autoencoder: AutoEncoderSpec,
}

impl NetworkSpecs {
    /// Default architecture for a square input size.
    pub fn for_image_size(image_size: usize) -> Self {
        Self {
            generator: GeneratorSpec::for_image_size(image_size),
            patch: PatchDiscriminatorSpec::for_image_size(image_size),
            autoencoder: AutoEncoderSpec::for_image_size(image_size),
        }
    }

    pub fn image_size(&self) -> usize {
        self.generator.image_size
    }

    pub fn build(&self) -> Result<Networks> {
        let sizes = [self.generator.image_size, self.patch.image_size, self.autoencoder.image_size];
        if sizes.iter().any(|&s| s != sizes[0]) {
            return Err(Error::InvalidArgument(format!("network image sizes disagree: {sizes:?}")));
        }
        Ok(Networks {
            generator: self.generator.build()?,
            patch: self.patch.build()?,
            autoencoder: self.autoencoder.build()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Networks {
    pub generator: Generator,
    pub patch: PatchDiscriminator,
    pub autoencoder: AutoEncoder,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_geometry_at_256() {
        let spec = PatchDiscriminatorSpec::for_image_size(256);
        assert_eq!(spec.output_size(), Some(30));
        assert_eq!(spec.receptive_field(), 70);
        assert_eq!(PatchDiscriminatorSpec::for_image_size(64).output_size(), Some(6));
    }

    #[test]
    fn patch_stack_shrinks_for_tiny_inputs() {
        let spec = PatchDiscriminatorSpec::for_image_size(8);
        assert_eq!(spec.strided_layers, 1);
        assert_eq!(spec.build().unwrap().output_size(), 2);
        let spec = PatchDiscriminatorSpec { strided_layers: 3, ..spec };
        assert!(spec.build().is_err());
        assert!(PatchDiscriminatorSpec::for_image_size(2).build().is_err());
    }

    #[test]
    fn generator_depth_reaches_one_pixel() {
        assert_eq!(GeneratorSpec::for_image_size(256).depth, 8);
        assert_eq!(GeneratorSpec::for_image_size(64).depth, 6);
        let bad = GeneratorSpec { depth: 9, ..GeneratorSpec::for_image_size(256) };
        assert!(bad.build().is_err());
    }

    #[test]
    fn generator_channel_schedule() {
        let g = GeneratorSpec::for_image_size(256);
        let widths: Vec<usize> = (0..8).map(|i| g.level_channels(i)).collect();
        assert_eq!(widths, vec![64, 128, 256, 512, 512, 512, 512, 512]);
    }

    #[test]
    fn autoencoder_bottleneck() {
        let s = AutoEncoderSpec::for_image_size(256);
        assert_eq!((s.levels, s.bottleneck_size()), (5, 8));
        let s = AutoEncoderSpec::for_image_size(8);
        assert_eq!((s.levels, s.bottleneck_size()), (0, 8));
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let g = GeneratorSpec::for_image_size(16).with_widths(2, 4).build().unwrap();
        let p = g.init_parameters::<f32>(0);
        assert!(g.forward(&p, &Tensor::zeros([1, 3, 8, 8])).is_err());
        assert!(g.forward(&p, &Tensor::zeros([1, 1, 16, 16])).is_err());
    }
}
