//! `GlyphImage`, the raster type passed between every stage of the pipeline.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Channel count of every pipeline image.
pub const CHANNELS: usize = 3;

/// Declared value range of a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// `[0, 255]`
    Byte,
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Symmetric,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Byte => (0.0, 255.0),
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ValueRange::Byte => "byte",
            ValueRange::Unit => "unit",
            ValueRange::Symmetric => "symmetric",
        }
    }
}

impl fmt::Display for ValueRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ValueRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "byte" => Ok(ValueRange::Byte),
            "unit" => Ok(ValueRange::Unit),
            "symmetric" => Ok(ValueRange::Symmetric),
            other => Err(Error::InvalidArgument(format!("unknown value range {other:?}"))),
        }
    }
}

/// An `H×W×C` raster stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphImage {
    height: usize,
    width: usize,
    channels: usize,
    range: ValueRange,
    pixels: Vec<f32>,
}

impl GlyphImage {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        range: ValueRange,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("GlyphImage::new", "non-zero dimensions", format!("{height}x{width}x{channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape(
                "GlyphImage::new",
                height * width * channels,
                pixels.len(),
            ));
        }
        let (lo, hi) = range.bounds();
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= lo && **v <= hi))
        {
            return Err(Error::OutOfRange {
                value,
                index,
                range: range.name(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            range,
            pixels,
        })
    }

    /// Image of a single repeated value.
    pub fn filled(height: usize, width: usize, range: ValueRange, value: f32) -> Result<Self> {
        Self::new(height, width, CHANNELS, range, vec![value; height * width * CHANNELS])
    }

    /// Build from values that may stray outside `range` through rounding;
    /// they are clamped.
    pub(crate) fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        range: ValueRange,
        mut pixels: Vec<f32>,
    ) -> Self {
        let (lo, hi) = range.bounds();
        for v in &mut pixels {
            *v = if v.is_nan() { lo } else { v.clamp(lo, hi) };
        }
        Self {
            height,
            width,
            channels,
            range,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * self.width + col) * self.channels + channel]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Columns `[col0, col0 + width)`, copied without modification.
    pub fn crop_columns(&self, col0: usize, width: usize) -> Result<Self> {
        if width == 0 || col0 + width > self.width {
            return Err(Error::shape("crop_columns", format!("columns within 0..{}", self.width), format!("{col0}..{}", col0 + width)));
        }
        let c = self.channels;
        let mut pixels = Vec::with_capacity(self.height * width * c);
        for r in 0..self.height {
            let start = (r * self.width + col0) * c;
            pixels.extend_from_slice(&self.pixels[start..start + width * c]);
        }
        Ok(Self {
            height: self.height,
            width,
            channels: c,
            range: self.range,
            pixels,
        })
    }

    /// Rows `[row0, row0 + height)`.
    pub fn crop_rows(&self, row0: usize, height: usize) -> Result<Self> {
        if height == 0 || row0 + height > self.height {
            return Err(Error::shape("crop_rows", format!("rows within 0..{}", self.height), format!("{row0}..{}", row0 + height)));
        }
        let stride = self.width * self.channels;
        Ok(Self {
            height,
            width: self.width,
            channels: self.channels,
            range: self.range,
            pixels: self.pixels[row0 * stride..(row0 + height) * stride].to_vec(),
        })
    }

    /// Place `left` and `right` side by side.
    pub fn hconcat(left: &Self, right: &Self) -> Result<Self> {
        if left.height != right.height || left.channels != right.channels || left.range != right.range {
            return Err(Error::shape(
                "hconcat",
                format!("{}x?x{} ({})", left.height, left.channels, left.range),
                format!("{}x?x{} ({})", right.height, right.channels, right.range),
            ));
        }
        let c = left.channels;
        let width = left.width + right.width;
        let mut pixels = Vec::with_capacity(left.height * width * c);
        for r in 0..left.height {
            pixels.extend_from_slice(&left.pixels[r * left.width * c..(r + 1) * left.width * c]);
            pixels.extend_from_slice(&right.pixels[r * right.width * c..(r + 1) * right.width * c]);
        }
        Ok(Self {
            height: left.height,
            width,
            channels: c,
            range: left.range,
            pixels,
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            channels: CHANNELS,
            range: ValueRange::Byte,
            pixels: img.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Round to 8-bit RGB. Other ranges are normalized to byte first.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels != CHANNELS {
            return Err(Error::shape("to_rgb8", "3 channels", self.channels));
        }
        let byte = normalize(self, ValueRange::Byte);
        let raw = byte.pixels.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        Ok(RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer sized from dims"))
    }

    /// Decode a PNG; grayscale (with or without alpha) is replicated to RGB.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// `[1, C, H, W]` tensor holding the raw values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (h, w, c) = self.dims();
        let mut data = vec![T::zero(); h * w * c];
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    data[(ch * h + r) * w + col] = T::of(self.pixels[(r * w + col) * c + ch] as f64);
                }
            }
        }
        Tensor::from_vec([1, c, h, w], data)
    }

    /// Extract batch item `index` of `t`, clamping values into `range`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize, range: ValueRange) -> Self {
        let [_, c, h, w] = t.shape();
        let item = t.item(index);
        let mut pixels = vec![0.0f32; h * w * c];
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    pixels[(r * w + col) * c + ch] = item[(ch * h + r) * w + col].as_f64() as f32;
                }
            }
        }
        Self::from_clamped(h, w, c, range, pixels)
    }
}

/// Affine map of `img` onto `target`. Results are clamped into the target
/// range so rounding never violates the range invariant.
pub fn normalize(img: &GlyphImage, target: ValueRange) -> GlyphImage {
    if img.range == target {
        return img.clone();
    }
    let (slo, shi) = img.range.bounds();
    let (tlo, thi) = target.bounds();
    let (slo, shi, tlo, thi) = (slo as f64, shi as f64, tlo as f64, thi as f64);
    let scale = (thi - tlo) / (shi - slo);
    let pixels = img
        .pixels
        .iter()
        .map(|&v| ((v as f64 - slo) * scale + tlo) as f32)
        .collect();
    GlyphImage::from_clamped(img.height, img.width, img.channels, target, pixels)
}

/// Bilinear resampling with half-pixel centers: output pixel `i` samples the
/// source at `(i + 0.5) * in / out - 0.5`, clamped to the border. Every output
/// value is a convex combination of input values.
pub fn resize_bilinear(img: &GlyphImage, out_h: usize, out_w: usize) -> Result<GlyphImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    let (h, w, c) = img.dims();
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let taps = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(input - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = taps(out_h, h);
    let cols = taps(out_w, w);
    let px = |r: usize, col: usize, ch: usize| img.pixels[(r * w + col) * c + ch] as f64;
    let mut pixels = Vec::with_capacity(out_h * out_w * c);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            for ch in 0..c {
                let top = px(r0, c0, ch) * (1.0 - fx) + px(r0, c1, ch) * fx;
                let bottom = px(r1, c0, ch) * (1.0 - fx) + px(r1, c1, ch) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Ok(GlyphImage::from_clamped(out_h, out_w, c, img.range, pixels))
}
