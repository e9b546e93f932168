use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::dataset::prepare_image;
use crate::error::{Error, Result};
use crate::glyph::{normalize, GlyphImage, ValueRange};
use crate::models::{Generator, GeneratorSpec};
use crate::nn::ParameterSet;

/// A trained generator, detached from the discriminators and optimizer.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    generator: Generator,
    params: ParameterSet<f32>,
}

impl Synthesizer {
    pub fn new(spec: &GeneratorSpec, params: ParameterSet<f32>) -> Result<Self> {
        let generator = spec.build()?;
        if params.layout() != generator.layout() {
            return Err(Error::InvalidArgument("generator parameters do not match the spec".into()));
        }
        Ok(Self { generator, params })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<f32>) -> Result<Self> {
        Self::new(&ckpt.specs.generator, ckpt.params.generator.clone())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Side length of generated images.
    pub fn image_size(&self) -> usize {
        self.generator.spec().image_size
    }

    /// Translate one glyph. The input is resized to the model size; the
    /// output is in the byte range, rounded to whole values so it matches
    /// what a PNG export stores.
    pub fn generate(&self, source: &GlyphImage) -> Result<GlyphImage> {
        let x = prepare_image::<f32>(source, self.image_size())?;
        let y = self.generator.forward(&self.params, &x)?;
        let byte = normalize(&GlyphImage::from_tensor(&y, 0, ValueRange::Symmetric), ValueRange::Byte);
        let (h, w, c) = byte.dims();
        let rounded = byte.pixels().iter().map(|v| v.round()).collect();
        GlyphImage::new(h, w, c, ValueRange::Byte, rounded)
    }
}
