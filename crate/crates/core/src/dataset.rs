//! Paired glyph dataset: joined-image splitting, split manifests and
//! deterministic batch ordering.
//!
//! Expected layout under the dataset root:
//!
//! ```text
//! train/        joined pairs, side by side (W = 2H) or stacked (H = 2W)
//! test/         same format as train/
//! incomplete/   single damaged glyphs, optional labels.csv (id,label)
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyph::{normalize, resize_bilinear, GlyphImage, ValueRange};
use crate::tensor::{Real, Tensor};

/// Which half of a joined image holds the standard-font source glyph.
/// For stacked (tall) images "left" reads as "top".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLayout {
    #[default]
    SourceLeft,
    SourceRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Incomplete,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Incomplete];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Incomplete => "incomplete",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// An aligned (standard font, rubbing font) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub source: GlyphImage,
    pub target: GlyphImage,
}

/// Split a side-by-side joined image (width exactly twice the height) into
/// its two square halves. Pixels are copied untouched.
pub fn split_pair(joined: &GlyphImage, layout: PairLayout, id: &str) -> Result<PairedSample> {
    let (h, w, _) = joined.dims();
    if w != 2 * h {
        return Err(Error::shape("split_pair", format!("width = 2 x height ({h}x{})", 2 * h), format!("{h}x{w}")));
    }
    let left = joined.crop_columns(0, h)?;
    let right = joined.crop_columns(h, h)?;
    Ok(order(left, right, layout, id))
}

/// Like [`split_pair`] but also accepts stacked pairs (height twice the
/// width), picking the orientation from the aspect ratio.
pub fn split_joined(joined: &GlyphImage, layout: PairLayout, id: &str) -> Result<PairedSample> {
    let (h, w, _) = joined.dims();
    if w == 2 * h {
        split_pair(joined, layout, id)
    } else if h == 2 * w {
        let top = joined.crop_rows(0, w)?;
        let bottom = joined.crop_rows(w, w)?;
        Ok(order(top, bottom, layout, id))
    } else {
        Err(Error::shape("split_joined", "2:1 or 1:2 aspect ratio", format!("{h}x{w}")))
    }
}

fn order(first: GlyphImage, second: GlyphImage, layout: PairLayout, id: &str) -> PairedSample {
    let (source, target) = match layout {
        PairLayout::SourceLeft => (first, second),
        PairLayout::SourceRight => (second, first),
    };
    PairedSample {
        id: id.to_string(),
        source,
        target,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    /// Human-supplied character label; only carried by the incomplete split
    /// (possibly empty).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub pair_layout: PairLayout,
    pub entries: Vec<ManifestEntry>,
    /// Files present in the split directory that were not PNG images.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// Check the unique-id invariant and the incomplete-split label rule.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(e.id.as_str(), &e.path) {
                return Err(Error::Dataset(format!(
                    "duplicate id {:?} in {} manifest ({} and {})",
                    e.id,
                    self.split,
                    prev.display(),
                    e.path.display()
                )));
            }
            if self.split == Split::Incomplete && e.label.is_none() {
                return Err(Error::Dataset(format!("incomplete entry {:?} lacks a label field", e.id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Decode entry `index` as a joined pair.
    pub fn load_pair(&self, index: usize) -> Result<PairedSample> {
        let e = &self.entries[index];
        let joined = GlyphImage::load_png(&e.path)?;
        split_joined(&joined, self.pair_layout, &e.id)
    }

    pub fn load_all_pairs(&self) -> Result<Vec<PairedSample>> {
        (0..self.len()).map(|i| self.load_pair(i)).collect()
    }

    /// Decode every entry and report the ones that fail. Train and test
    /// entries must also split into a pair; incomplete entries are single
    /// glyphs.
    pub fn malformed(&self) -> Vec<(PathBuf, Error)> {
        let mut bad = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            let outcome = match self.split {
                Split::Incomplete => GlyphImage::load_png(&e.path).map(drop),
                _ => self.load_pair(i).map(drop),
            };
            if let Err(err) = outcome {
                bad.push((e.path.clone(), err));
            }
        }
        bad
    }
}

/// Manifests for the three splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifests {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub incomplete: DatasetManifest,
}

impl DatasetManifests {
    pub fn get(&self, split: Split) -> &DatasetManifest {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
            Split::Incomplete => &self.incomplete,
        }
    }

    pub fn counts_line(&self) -> String {
        format!(
            "train={} test={} incomplete={}",
            self.train.len(),
            self.test.len(),
            self.incomplete.len()
        )
    }
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn read_labels(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join("labels.csv");
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let mut reader = csv::Reader::from_path(&path)?;
    let mut labels = BTreeMap::new();
    for row in reader.deserialize::<(String, String)>() {
        let (id, label) = row?;
        labels.insert(id, label);
    }
    Ok(labels)
}

/// Enumerate one split directory. Entries are sorted by id; non-PNG files
/// are skipped with a warning.
pub fn load_split(root: &Path, split: Split, pair_layout: PairLayout) -> Result<DatasetManifest> {
    let dir = root.join(split.dir_name());
    if !dir.is_dir() {
        return Err(Error::Dataset(format!(
            "missing {split} split directory {}",
            dir.display()
        )));
    }
    let labels = if split == Split::Incomplete {
        read_labels(&dir)?
    } else {
        BTreeMap::new()
    };
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let listing = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    for item in listing {
        let path = item.map_err(|e| Error::io(&dir, e))?.path();
        if path.is_dir() || path.file_name().is_some_and(|n| n == "labels.csv") {
            continue;
        }
        if !is_png(&path) {
            log::warn!("skipping non-image file {}", path.display());
            skipped.push(path);
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("non UTF-8 file name {}", path.display())))?
            .to_string();
        let label = (split == Split::Incomplete).then(|| labels.get(&id).cloned().unwrap_or_default());
        entries.push(ManifestEntry { id, path, label });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id).then_with(|| a.path.cmp(&b.path)));
    skipped.sort();
    let manifest = DatasetManifest {
        split,
        pair_layout,
        entries,
        skipped,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Load the train, test and incomplete manifests. An empty train split is
/// an error since nothing could be trained from it.
pub fn load_manifest(root: &Path, pair_layout: PairLayout) -> Result<DatasetManifests> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    let train = load_split(root, Split::Train, pair_layout)?;
    if train.is_empty() {
        return Err(Error::Dataset(format!(
            "train split under {} holds no images; training is impossible",
            root.display()
        )));
    }
    Ok(DatasetManifests {
        train,
        test: load_split(root, Split::Test, pair_layout)?,
        incomplete: load_split(root, Split::Incomplete, pair_layout)?,
    })
}

/// Resize to `size×size` and map to the symmetric range as a `[1, 3, size, size]` tensor.
pub fn prepare_image<T: Real>(img: &GlyphImage, size: usize) -> Result<Tensor<T>> {
    let resized = resize_bilinear(img, size, size)?;
    Ok(normalize(&resized, ValueRange::Symmetric).to_tensor())
}

/// Network-ready `(x, y)` batch tensors for a list of samples.
pub fn prepare_batch<T: Real>(samples: &[&PairedSample], size: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut xs = Vec::with_capacity(samples.len());
    let mut ys = Vec::with_capacity(samples.len());
    for s in samples {
        xs.push(prepare_image(&s.source, size)?);
        ys.push(prepare_image(&s.target, size)?);
    }
    Ok((Tensor::stack(&xs), Tensor::stack(&ys)))
}

/// Deterministic batching over `len` samples. The order of epoch `e` is a
/// pure function of `(seed, e)`, so any global batch can be addressed
/// directly, which is what makes resumed training line up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl BatchPlan {
    pub fn new(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        Ok(Self {
            len,
            batch_size,
            seed,
            shuffle,
        })
    }

    /// Batches per epoch, counting the final short batch.
    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
        }
        order
    }

    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Sample indices of the `step`-th batch counted from the first epoch.
    pub fn batch_at(&self, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        if per == 0 {
            return Vec::new();
        }
        let order = self.epoch_order(step / per);
        let b = (step % per) as usize * self.batch_size;
        order[b..(b + self.batch_size).min(self.len)].to_vec()
    }
}

/// One epoch of decoded sample batches, in the order given by a [`BatchPlan`].
pub struct BatchIter<'a> {
    manifest: &'a DatasetManifest,
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Vec<PairedSample>>;

    fn next(&mut self) -> Option<Self::Item> {
        let batch = self.batches.next()?;
        Some(batch.into_iter().map(|i| self.manifest.load_pair(i)).collect())
    }
}

pub fn batch_iter(
    manifest: &DatasetManifest,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
) -> Result<BatchIter<'_>> {
    let plan = BatchPlan::new(manifest.len(), batch_size, seed, shuffle)?;
    Ok(BatchIter {
        manifest,
        batches: plan.epoch_batches(epoch).into_iter(),
    })
}
