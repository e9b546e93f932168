use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use rubbing_core::checkpoint::{latest_checkpoint, Checkpoint};
use rubbing_core::dataset::{load_manifest, load_split, DatasetManifest, Split};
use rubbing_core::evaluation::evaluate_manifest;
use rubbing_core::inference::Synthesizer;
use rubbing_core::restoration::{read_request_list, restore_batch, RequestEntry};
use rubbing_core::training::{train_loop, LoopOutputs, Trainer};

use crate::config::{apply_overrides, RunConfigFile};
use crate::Common;

/// Exit status of `restore` when every request failed.
const ALL_FAILED: u8 = 2;

fn run_config(common: &Common) -> Result<RunConfigFile> {
    let mut cfg = RunConfigFile::load_or_default(common.config.as_deref())?;
    if let Some(d) = &common.dataset_root {
        cfg.dataset_root = d.clone();
    }
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    Ok(cfg)
}

/// The prepared manifest for `split`, or a fresh scan of the dataset root.
fn manifest(cfg: &RunConfigFile, split: Split) -> Result<DatasetManifest> {
    let path = cfg.manifest_dir().join(format!("{split}.json"));
    if path.is_file() {
        return Ok(DatasetManifest::read_json(&path)?);
    }
    log::info!("{} not found, scanning {}", path.display(), cfg.dataset_root.display());
    Ok(load_split(&cfg.dataset_root, split, cfg.pair_layout)?)
}

fn checkpoint_path(cfg: &RunConfigFile, given: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = given {
        if !p.is_file() {
            bail!("checkpoint {} does not exist", p.display());
        }
        return Ok(p.to_path_buf());
    }
    let dir = cfg.checkpoint_dir();
    latest_checkpoint(&dir)?.with_context(|| format!("no checkpoint in {}; pass --checkpoint", dir.display()))
}

pub fn prepare(common: &Common) -> Result<ExitCode> {
    let cfg = run_config(common)?;
    let manifests = load_manifest(&cfg.dataset_root, cfg.pair_layout)?;
    let mut malformed = 0;
    for split in Split::ALL {
        for (path, err) in manifests.get(split).malformed() {
            eprintln!("malformed image {}: {err}", path.display());
            malformed += 1;
        }
    }
    if malformed > 0 {
        bail!("{malformed} malformed image(s) under {}", cfg.dataset_root.display());
    }
    let dir = cfg.manifest_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for split in Split::ALL {
        manifests.get(split).write_json(&dir.join(format!("{split}.json")))?;
    }
    println!("{}", manifests.counts_line());
    Ok(ExitCode::SUCCESS)
}

pub fn train(
    common: &Common,
    iterations: Option<u64>,
    seed: Option<u64>,
    image_size: Option<usize>,
    resume: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = run_config(common)?;
    let train_manifest = manifest(&cfg, Split::Train)?;
    if train_manifest.is_empty() {
        bail!("train manifest is empty");
    }
    let samples = train_manifest.load_all_pairs()?;

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::<f32>::load(path)?;
            let mut trainer = Trainer::from_checkpoint(ckpt)?;
            if image_size.is_some_and(|s| s != trainer.config.image_size) {
                bail!("--image-size conflicts with the checkpoint's {}", trainer.config.image_size);
            }
            if seed.is_some_and(|s| s != trainer.config.seed) {
                bail!("--seed conflicts with the checkpoint's {}", trainer.config.seed);
            }
            let target = iterations.unwrap_or(cfg.train.max_iterations);
            apply_overrides(&mut trainer.config, Some(target), None, None)?;
            log::info!("resuming {} at iteration {}", path.display(), trainer.iteration);
            trainer
        }
        None => {
            let mut tc = cfg.train.clone();
            apply_overrides(&mut tc, iterations, seed, image_size)?;
            Trainer::new(tc)?
        }
    };

    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let outputs = LoopOutputs {
        log_path: Some(cfg.log_path()),
        checkpoint_dir: Some(cfg.checkpoint_dir()),
        append_log: resume.is_some(),
    };
    let records = train_loop(&mut trainer, &samples, &outputs)?;
    let final_path = LoopOutputs::checkpoint_path(&cfg.checkpoint_dir(), trainer.iteration);
    trainer.to_checkpoint().save(&final_path)?;
    if let Some(last) = records.last() {
        log::info!(
            "iteration {}: l1={:.4} k={:.5} M={:.4}",
            last.iteration,
            last.l1,
            last.k,
            last.convergence_measure
        );
    }
    println!(
        "trained {} iteration(s), now at {}; checkpoint {}",
        records.len(),
        trainer.iteration,
        final_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(common: &Common, checkpoint: Option<&Path>) -> Result<ExitCode> {
    let cfg = run_config(common)?;
    let path = checkpoint_path(&cfg, checkpoint)?;
    let synth = Synthesizer::load(&path)?;
    let test = manifest(&cfg, Split::Test)?;
    let dir = cfg.eval_dir();
    let report = evaluate_manifest(&synth, &test, Some(&dir.join("generated")))?;
    let report_path = dir.join("report.csv");
    report.write_csv(&report_path)?;
    println!(
        "evaluated {} image(s), mean style similarity error {:.6e}; report {}",
        report.per_image.len(),
        report.mean_error,
        report_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn restore(
    common: &Common,
    checkpoint: Option<&Path>,
    requests: Option<&Path>,
    font: Option<&Path>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = run_config(common)?;
    let path = checkpoint_path(&cfg, checkpoint)?;
    let synth = Synthesizer::load(&path)?;
    let (entries, base) = match requests {
        Some(list) => (
            read_request_list(list).with_context(|| format!("reading {}", list.display()))?,
            list.parent().unwrap_or(Path::new("")).to_path_buf(),
        ),
        None => {
            let inc = manifest(&cfg, Split::Incomplete)?;
            let entries = inc
                .entries
                .iter()
                .map(|e| RequestEntry {
                    id: e.id.clone(),
                    incomplete: e.path.to_string_lossy().into_owned(),
                    label: e.label.clone().unwrap_or_default(),
                })
                .collect();
            (entries, PathBuf::new())
        }
    };
    let font = font.map(Path::to_path_buf).or(cfg.font_file.clone());
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.restore_dir());
    let summary = restore_batch(&synth, &entries, &base, font.as_deref(), &out)?;
    for f in &summary.failures {
        eprintln!("failed {}: {}", f.id, f.reason);
    }
    println!("{} restored, {} failed", summary.succeeded(), summary.failures.len());
    if summary.all_failed() {
        return Ok(ExitCode::from(ALL_FAILED));
    }
    Ok(ExitCode::SUCCESS)
}
