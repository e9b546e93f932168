//! Restoring incomplete characters from a human-supplied label.

use std::path::{Path, PathBuf};

use ab_glyph::{point, Font, FontVec, PxScale};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{damage_mask, render_mask_overlay, DamageMask};
use crate::glyph::{normalize, resize_bilinear, GlyphImage, ValueRange, CHANNELS};
use crate::inference::Synthesizer;

/// Fraction of the square occupied by the longer side of a rendered glyph.
pub const GLYPH_FILL: f32 = 0.8;

/// Rasterize `ch` as a black glyph centered on white, scaled so its larger
/// extent covers [`GLYPH_FILL`] of a `size × size` square. Output is in the
/// unit range.
pub fn render_reference_glyph(ch: char, font_file: &Path, size: usize) -> Result<GlyphImage> {
    if size == 0 {
        return Err(Error::InvalidArgument("glyph size must be positive".into()));
    }
    let bytes = std::fs::read(font_file).map_err(|e| {
        Error::Render(format!(
            "cannot read font {}: {e}; pass a reference glyph image instead of a codepoint",
            font_file.display()
        ))
    })?;
    let font = FontVec::try_from_vec(bytes)
        .map_err(|e| Error::Render(format!("{}: {e}", font_file.display())))?;
    let id = font.glyph_id(ch);
    if id.0 == 0 {
        return Err(Error::Render(format!(
            "{} has no glyph for {} ({ch})",
            font_file.display(),
            codepoint_tag(ch)
        )));
    }
    let mut pixels = vec![1.0f32; size * size * CHANNELS];
    let probe_scale = 1000.0;
    let Some(probe) = font.outline_glyph(id.with_scale_and_position(PxScale::from(probe_scale), point(0.0, 0.0)))
    else {
        // Present but without ink, e.g. a space.
        return GlyphImage::new(size, size, CHANNELS, ValueRange::Unit, pixels);
    };
    let b = probe.px_bounds();
    let extent = b.width().max(b.height()).max(1.0);
    let scale = probe_scale * GLYPH_FILL * size as f32 / extent;
    let outlined = font
        .outline_glyph(id.with_scale_and_position(PxScale::from(scale), point(0.0, 0.0)))
        .ok_or_else(|| Error::Render(format!("{} vanished when rescaled", codepoint_tag(ch))))?;
    let b = outlined.px_bounds();
    let off_x = ((size as f32 - b.width()) / 2.0).round() as i64;
    let off_y = ((size as f32 - b.height()) / 2.0).round() as i64;
    outlined.draw(|x, y, coverage| {
        let (col, row) = (x as i64 + off_x, y as i64 + off_y);
        if (0..size as i64).contains(&col) && (0..size as i64).contains(&row) {
            let base = (row as usize * size + col as usize) * CHANNELS;
            let v = 1.0 - coverage.clamp(0.0, 1.0);
            for c in &mut pixels[base..base + CHANNELS] {
                *c = c.min(v);
            }
        }
    });
    GlyphImage::new(size, size, CHANNELS, ValueRange::Unit, pixels)
}

fn codepoint_tag(ch: char) -> String {
    format!("U+{:04X}", ch as u32)
}

/// Where the standard-font source glyph comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GlyphLabel {
    /// Rendered from the configured font file.
    Codepoint(char),
    /// A pre-rendered reference image.
    ReferenceImage(PathBuf),
}

impl GlyphLabel {
    /// `U+XXXX` or a single character is a codepoint; anything else is a
    /// path, resolved against `base_dir` when relative.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::InvalidArgument("empty label".into()));
        }
        if let Some(hex) = text.strip_prefix("U+").or_else(|| text.strip_prefix("u+")) {
            let ch = u32::from_str_radix(hex, 16)
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| Error::InvalidArgument(format!("bad codepoint {text}")))?;
            return Ok(Self::Codepoint(ch));
        }
        let mut chars = text.chars();
        if let (Some(ch), None) = (chars.next(), chars.next()) {
            return Ok(Self::Codepoint(ch));
        }
        Ok(Self::ReferenceImage(base_dir.join(text)))
    }

    /// The source glyph at `size`.
    pub fn resolve(&self, font_file: Option<&Path>, size: usize) -> Result<GlyphImage> {
        match self {
            Self::Codepoint(ch) => {
                let font = font_file.ok_or_else(|| {
                    Error::Render(format!(
                        "{} needs a font file; configure one or pass a reference glyph image",
                        codepoint_tag(*ch)
                    ))
                })?;
                render_reference_glyph(*ch, font, size)
            }
            Self::ReferenceImage(path) => GlyphImage::load_png(path),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RestorationRequest {
    pub id: String,
    pub incomplete: GlyphImage,
    pub label: GlyphLabel,
}

#[derive(Debug, Clone)]
pub struct RestorationResult {
    pub id: String,
    pub restored: GlyphImage,
    pub overlay: GlyphImage,
    pub mask: DamageMask,
}

/// Render the reference glyph, translate it, and compare against the
/// incomplete character upscaled to the model size.
pub fn restore_character(
    synth: &Synthesizer,
    request: &RestorationRequest,
    font_file: Option<&Path>,
) -> Result<RestorationResult> {
    let size = synth.image_size();
    let (h, w, _) = request.incomplete.dims();
    let reference = request.label.resolve(font_file, h.max(w))?;
    let restored = synth.generate(&reference)?;
    let incomplete = normalize(&resize_bilinear(&request.incomplete, size, size)?, ValueRange::Byte);
    let mask = damage_mask(&restored, &incomplete)?;
    let overlay = render_mask_overlay(&restored, &mask)?;
    Ok(RestorationResult {
        id: request.id.clone(),
        restored,
        overlay,
        mask,
    })
}

/// One row of a request list; paths are relative to the list's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestEntry {
    pub id: String,
    pub incomplete: String,
    pub label: String,
}

/// Read a request list: `.json` holds an array of entries, anything else is
/// CSV with an `id,incomplete,label` header.
pub fn read_request_list(path: &Path) -> Result<Vec<RequestEntry>> {
    let is_json = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return Ok(serde_json::from_str(&text)?);
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

impl RequestEntry {
    pub fn load(&self, base_dir: &Path) -> Result<RestorationRequest> {
        Ok(RestorationRequest {
            id: self.id.clone(),
            incomplete: GlyphImage::load_png(&base_dir.join(&self.incomplete))?,
            label: GlyphLabel::parse(&self.label, base_dir)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestoreFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestoredEntry {
    pub id: String,
    pub restored: PathBuf,
    pub overlay: PathBuf,
    pub marked_pixels: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestoreSummary {
    pub requested: usize,
    pub restored: Vec<RestoredEntry>,
    pub failures: Vec<RestoreFailure>,
}

impl RestoreSummary {
    pub fn succeeded(&self) -> usize {
        self.restored.len()
    }

    pub fn all_failed(&self) -> bool {
        self.requested > 0 && self.restored.is_empty()
    }
}

/// Restore every entry, writing `<id>_restored.png`, `<id>_overlay.png` and
/// `summary.json` to `out_dir`. Per-request errors are collected in the
/// summary; only output-directory problems abort the batch.
pub fn restore_batch(
    synth: &Synthesizer,
    entries: &[RequestEntry],
    base_dir: &Path,
    font_file: Option<&Path>,
    out_dir: &Path,
) -> Result<RestoreSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = RestoreSummary {
        requested: entries.len(),
        ..Default::default()
    };
    for entry in entries {
        let outcome = entry
            .load(base_dir)
            .and_then(|req| restore_character(synth, &req, font_file))
            .and_then(|res| {
                let restored = out_dir.join(format!("{}_restored.png", res.id));
                let overlay = out_dir.join(format!("{}_overlay.png", res.id));
                res.restored.save_png(&restored)?;
                res.overlay.save_png(&overlay)?;
                Ok(RestoredEntry {
                    id: res.id,
                    restored,
                    overlay,
                    marked_pixels: res.mask.marked_count(),
                })
            });
        match outcome {
            Ok(done) => summary.restored.push(done),
            Err(e) => {
                log::warn!("restore {}: {e}", entry.id);
                summary.failures.push(RestoreFailure {
                    id: entry.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let path = out_dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
