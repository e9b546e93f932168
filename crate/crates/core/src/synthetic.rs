//! Small procedurally generated glyph datasets for tests and benchmarks.

use std::path::Path;

use crate::dataset::{PairedSample, Split};
use crate::error::{Error, Result};
use crate::glyph::{GlyphImage, ValueRange, CHANNELS};

fn raster(size: usize, ink: impl Fn(usize, usize) -> bool, fg: f32, bg: f32) -> GlyphImage {
    let mut px = vec![bg; size * size * CHANNELS];
    for r in 0..size {
        for c in 0..size {
            if ink(r, c) {
                px[(r * size + c) * CHANNELS..][..CHANNELS].fill(fg);
            }
        }
    }
    GlyphImage::new(size, size, CHANNELS, ValueRange::Unit, px).expect("values in unit range")
}

/// Centre and half-extent of toy glyph `i` at `size`.
fn layout(i: usize, size: usize) -> (i64, i64, i64) {
    let q = (size / 4) as i64;
    let span = (size / 2).max(1) as i64;
    let cx = q + ((i * 7) as i64 % span);
    let cy = q + ((i * 13) as i64 % span);
    (cx, cy, (size as i64 / 6).max(1))
}

fn in_box(i: usize, size: usize, r: usize, c: usize) -> bool {
    let (cx, cy, half) = layout(i, size);
    (r as i64 - cy).abs() < half && (c as i64 - cx).abs() < half
}

/// Standard glyph: a hatched square. Rubbing glyph: the same square, solid.
/// Both are dark on white.
pub fn toy_pair(i: usize, size: usize) -> PairedSample {
    let source = raster(size, |r, c| in_box(i, size, r, c) && (r + c + i) % 4 < 2, 0.0, 1.0);
    let target = raster(size, |r, c| in_box(i, size, r, c), 0.0, 1.0);
    PairedSample {
        id: format!("toy{i:03}"),
        source,
        target,
    }
}

/// The rubbing glyph of pair `i` as an incomplete character: light on
/// black, with the right half of the square missing.
pub fn toy_incomplete(i: usize, size: usize) -> GlyphImage {
    let (cx, _, _) = layout(i, size);
    raster(size, |r, c| in_box(i, size, r, c) && (c as i64) < cx, 1.0, 0.0)
}

/// Write a dataset tree under `root`: `train/` and `test/` with joined
/// source-left pairs, `incomplete/` with single glyphs plus `labels.csv`
/// (all labelled `A`).
pub fn write_toy_dataset(root: &Path, train: usize, test: usize, incomplete: usize, size: usize) -> Result<()> {
    for (split, count, offset) in [(Split::Train, train, 0), (Split::Test, test, train)] {
        let dir = root.join(split.dir_name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in offset..offset + count {
            let p = toy_pair(i, size);
            GlyphImage::hconcat(&p.source, &p.target)?.save_png(&dir.join(format!("{}.png", p.id)))?;
        }
    }
    let dir = root.join(Split::Incomplete.dir_name());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut labels = String::from("id,label\n");
    for i in 0..incomplete {
        let id = format!("inc{i:03}");
        toy_incomplete(i, size).save_png(&dir.join(format!("{id}.png")))?;
        labels.push_str(&format!("{id},A\n"));
    }
    let path = dir.join("labels.csv");
    std::fs::write(&path, labels).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_differ_only_inside_the_glyph() {
        let p = toy_pair(3, 32);
        let diff = p.source.pixels().iter().zip(p.target.pixels()).filter(|(a, b)| a != b).count();
        assert!(diff > 0);
        assert!(p.target.pixels().iter().any(|&v| v == 0.0));
    }
}
