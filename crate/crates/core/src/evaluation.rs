//! Style similarity scoring, damage masks and generated-set export.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::glyph::{normalize, resize_bilinear, GlyphImage, ValueRange};
use crate::inference::Synthesizer;

/// Byte-scale difference above which a pixel counts as damaged.
pub const DAMAGE_THRESHOLD: u8 = 253;

fn check_dims(context: &'static str, a: &GlyphImage, b: &GlyphImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(context, format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    Ok(())
}

/// Mean squared per-element difference, computed in the unit range over all
/// `H * W * C` values.
pub fn style_similarity_error(x_gen: &GlyphImage, y_real: &GlyphImage) -> Result<f64> {
    check_dims("style_similarity_error", x_gen, y_real)?;
    let a = normalize(x_gen, ValueRange::Unit);
    let b = normalize(y_real, ValueRange::Unit);
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSimilarityReport {
    pub per_image: Vec<(String, f64)>,
    pub mean_error: f64,
}

impl StyleSimilarityReport {
    /// The mean of an empty report is 0.
    pub fn from_rows(per_image: Vec<(String, f64)>) -> Self {
        let mean_error = if per_image.is_empty() {
            0.0
        } else {
            per_image.iter().map(|(_, e)| e).sum::<f64>() / per_image.len() as f64
        };
        Self { per_image, mean_error }
    }

    /// `id,error` rows followed by a `mean,<value>` summary line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "error"])?;
        for (id, e) in &self.per_image {
            w.write_record([id.as_str(), &format!("{e:e}")])?;
        }
        w.write_record(["mean", &format!("{:e}", self.mean_error)])?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        let mut mean = None;
        for rec in r.records() {
            let rec = rec?;
            let value: f64 = rec
                .get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("bad report row {rec:?}")))?;
            let id = rec.get(0).unwrap_or_default().to_string();
            if id == "mean" {
                mean = Some(value);
            } else {
                rows.push((id, value));
            }
        }
        let mean_error = mean.ok_or_else(|| Error::InvalidArgument(format!("{}: no mean line", path.display())))?;
        Ok(Self {
            per_image: rows,
            mean_error,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DamageMask {
    height: usize,
    width: usize,
    mask: Vec<bool>,
    marked_count: usize,
}

impl DamageMask {
    pub fn from_cells(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::shape("DamageMask", height * width, mask.len()));
        }
        let marked_count = mask.iter().filter(|&&m| m).count();
        Ok(Self {
            height,
            width,
            mask,
            marked_count,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn marked_count(&self) -> usize {
        self.marked_count
    }

    pub fn threshold(&self) -> u8 {
        DAMAGE_THRESHOLD
    }
}

/// Pixels where the generated glyph disagrees with the polarity-reversed
/// incomplete glyph by more than [`DAMAGE_THRESHOLD`]. The incomplete image
/// is expected light-on-black and is reversed per channel; the per-pixel
/// decision uses the largest channel difference.
pub fn damage_mask(generated: &GlyphImage, incomplete: &GlyphImage) -> Result<DamageMask> {
    check_dims("damage_mask", generated, incomplete)?;
    let g = normalize(generated, ValueRange::Byte);
    let inc = normalize(incomplete, ValueRange::Byte);
    let (h, w, c) = g.dims();
    let threshold = DAMAGE_THRESHOLD as f64;
    let mask = g
        .pixels()
        .chunks_exact(c)
        .zip(inc.pixels().chunks_exact(c))
        .map(|(gp, ip)| {
            let diff = gp
                .iter()
                .zip(ip)
                .map(|(&a, &b)| (a as f64 - (255.0 - b as f64)).abs())
                .fold(0.0, f64::max);
            diff > threshold
        })
        .collect();
    DamageMask::from_cells(h, w, mask)
}

/// `generated` in the byte range with every marked pixel painted pure blue.
pub fn render_mask_overlay(generated: &GlyphImage, mask: &DamageMask) -> Result<GlyphImage> {
    let (h, w, c) = generated.dims();
    if (h, w) != (mask.height, mask.width) {
        return Err(Error::shape(
            "render_mask_overlay",
            format!("{h}x{w}"),
            format!("{}x{}", mask.height, mask.width),
        ));
    }
    if c != 3 {
        return Err(Error::shape("render_mask_overlay", "3 channels", c));
    }
    let mut pixels = normalize(generated, ValueRange::Byte).pixels().to_vec();
    for (px, _) in pixels.chunks_exact_mut(3).zip(&mask.mask).filter(|(_, &m)| m) {
        px.copy_from_slice(&[0.0, 0.0, 255.0]);
    }
    GlyphImage::new(h, w, c, ValueRange::Byte, pixels)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // Fail early on a read-only directory rather than after the first render.
    let probe = dir.join(".write_probe");
    File::create(&probe)
        .and_then(|mut f| f.write_all(b""))
        .map_err(|e| Error::io(dir, e))?;
    let _ = std::fs::remove_file(probe);
    Ok(())
}

/// Generate every sample of `manifest` into `<out_dir>/<id>.png`.
pub fn export_generated_set(synth: &Synthesizer, manifest: &DatasetManifest, out_dir: &Path) -> Result<usize> {
    Ok(evaluate_manifest(synth, manifest, Some(out_dir))?.per_image.len())
}

/// Score generated glyphs against their targets (resized to the model
/// size), optionally exporting each generated glyph as a PNG.
pub fn evaluate_manifest(
    synth: &Synthesizer,
    manifest: &DatasetManifest,
    export_dir: Option<&Path>,
) -> Result<StyleSimilarityReport> {
    if let Some(dir) = export_dir {
        ensure_dir(dir)?;
    }
    let size = synth.image_size();
    let mut rows = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        let pair = manifest.load_pair(i)?;
        let generated = synth.generate(&pair.source)?;
        if let Some(dir) = export_dir {
            generated.save_png(&dir.join(format!("{}.png", pair.id)))?;
        }
        let target = resize_bilinear(&pair.target, size, size)?;
        rows.push((pair.id, style_similarity_error(&generated, &target)?));
    }
    Ok(StyleSimilarityReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn byte(h: usize, w: usize, px: Vec<f32>) -> GlyphImage {
        GlyphImage::new(h, w, 3, ValueRange::Byte, px).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let ones = GlyphImage::filled(4, 4, ValueRange::Unit, 1.0).unwrap();
        let zeros = GlyphImage::filled(4, 4, ValueRange::Unit, 0.0).unwrap();
        assert_eq!(style_similarity_error(&ones, &ones).unwrap(), 0.0);
        assert_eq!(style_similarity_error(&ones, &zeros).unwrap(), 1.0);
        let other = GlyphImage::filled(4, 5, ValueRange::Unit, 0.0).unwrap();
        assert!(style_similarity_error(&ones, &other).is_err());
    }

    #[test]
    fn similarity_is_range_independent() {
        let a = GlyphImage::filled(2, 2, ValueRange::Byte, 255.0).unwrap();
        let b = GlyphImage::filled(2, 2, ValueRange::Symmetric, -1.0).unwrap();
        assert_eq!(style_similarity_error(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn mask_threshold_examples() {
        // Background agrees, a stroke over background is marked, 253 is not.
        let generated = byte(1, 3, vec![255.0, 255.0, 255.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
        let incomplete = byte(1, 3, vec![0.0; 9]);
        let m = damage_mask(&generated, &incomplete).unwrap();
        assert_eq!(m.cells(), &[false, true, false]);
        assert_eq!(m.marked_count(), 1);
        assert_eq!(m.threshold(), 253);
    }

    #[test]
    fn mask_uses_largest_channel_difference() {
        let generated = byte(1, 1, vec![255.0, 255.0, 0.0]);
        let incomplete = byte(1, 1, vec![0.0, 0.0, 0.0]);
        assert!(damage_mask(&generated, &incomplete).unwrap().get(0, 0));
    }

    #[test]
    fn overlay_examples() {
        let g = byte(2, 2, (0..12).map(|v| v as f32 * 10.0).collect());
        let empty = DamageMask::from_cells(2, 2, vec![false; 4]).unwrap();
        assert_eq!(render_mask_overlay(&g, &empty).unwrap(), g);
        let full = DamageMask::from_cells(2, 2, vec![true; 4]).unwrap();
        let blue = render_mask_overlay(&g, &full).unwrap();
        assert!(blue.pixels().chunks(3).all(|p| p == [0.0, 0.0, 255.0]));
        let bad = DamageMask::from_cells(1, 4, vec![true; 4]).unwrap();
        assert!(render_mask_overlay(&g, &bad).is_err());
    }

    #[test]
    fn report_mean_and_csv_round_trip() {
        let r = StyleSimilarityReport::from_rows(vec![("a".into(), 0.1), ("b".into(), 0.3)]);
        assert!((r.mean_error - 0.2).abs() < 1e-15);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.csv");
        r.write_csv(&p).unwrap();
        assert_eq!(StyleSimilarityReport::read_csv(&p).unwrap(), r);
        assert_eq!(StyleSimilarityReport::from_rows(vec![]).mean_error, 0.0);
    }
}
