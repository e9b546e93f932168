use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rubbing_core::dataset::PairLayout;
use rubbing_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Contents of a `--config` file. Relative paths are resolved against the
/// directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    pub pair_layout: PairLayout,
    /// Font used to render codepoint labels during restoration.
    pub font_file: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            pair_layout: PairLayout::default(),
            font_file: None,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfigFile {
    /// Parse TOML, or JSON when the file ends in `.json`.
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let cfg: Self = if json {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text)?
        };
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = Self::parse(&text, json).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.dataset_root = base.join(&cfg.dataset_root);
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.font_file = cfg.font_file.map(|f| base.join(f));
        Ok(cfg)
    }

    /// The file at `path`, or defaults relative to the working directory.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        log::info!("effective configuration:\n{}", cfg.to_toml()?);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn manifest_dir(&self) -> PathBuf {
        self.output_dir.join("manifests")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn log_path(&self) -> PathBuf {
        self.output_dir.join("train_log.csv")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output_dir.join("eval")
    }

    pub fn restore_dir(&self) -> PathBuf {
        self.output_dir.join("restored")
    }
}

/// Apply `--image-size` and friends, re-validating afterwards.
pub fn apply_overrides(
    cfg: &mut TrainConfig,
    iterations: Option<u64>,
    seed: Option<u64>,
    image_size: Option<usize>,
) -> Result<()> {
    if let Some(n) = iterations {
        cfg.max_iterations = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = image_size {
        cfg.image_size = s;
    }
    if let Err(e) = cfg.validate() {
        bail!("invalid training configuration: {e}");
    }
    Ok(())
}
