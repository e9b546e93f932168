//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rubbing_core::checkpoint::Checkpoint;
use rubbing_core::dataset::{prepare_batch, split_pair, PairLayout, PairedSample};
use rubbing_core::evaluation::{damage_mask, style_similarity_error};
use rubbing_core::glyph::{normalize, GlyphImage, ValueRange};
use rubbing_core::losses::{l1_loss, mean_abs_diff, update_k, EquilibriumState};
use rubbing_core::models::{AutoEncoderSpec, GeneratorSpec, NetworkSpecs, PatchDiscriminatorSpec};
use rubbing_core::synthetic::{toy_pair, write_toy_dataset};
use rubbing_core::tensor::Tensor;
use rubbing_core::training::{
    generator_objective_gradient, train_loop, LoopOutputs, ModelWidths, TrainConfig, Trainer,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn small_widths() -> ModelWidths {
    ModelWidths {
        generator_base: 16,
        generator_max: 128,
        patch_base: 16,
        autoencoder_base: 16,
        embedding_dim: 32,
    }
}

fn shape_suite() -> Outcome {
    let start = Instant::now();
    let full = NetworkSpecs::for_image_size(256);
    let reduced = NetworkSpecs {
        generator: GeneratorSpec::for_image_size(64).with_widths(16, 128),
        patch: PatchDiscriminatorSpec::for_image_size(64).with_base(16),
        autoencoder: AutoEncoderSpec::for_image_size(64).with_widths(16, 32),
    };
    let mut notes = Vec::new();
    for (specs, patch) in [(full, 30), (reduced, 6)] {
        let s = specs.image_size();
        let nets = specs.build().map_err(|e| e.to_string())?;
        let g = nets.generator.init_parameters::<f32>(1);
        let d1 = nets.patch.init_parameters::<f32>(2);
        let d2 = nets.autoencoder.init_parameters::<f32>(3);
        let x = Tensor::<f32>::full([1, 3, s, s], 0.5);
        let y = nets.generator.forward(&g, &x).map_err(|e| e.to_string())?;
        ensure(y.shape() == [1, 3, s, s], format!("generator output {:?}", y.shape()))?;
        let first = &d1.layout().entries()[0];
        ensure(first.shape[1] == 6, format!("D1 first layer takes {} channels", first.shape[1]))?;
        let scores = nets.patch.forward(&d1, &x, &y).map_err(|e| e.to_string())?;
        ensure(scores.shape() == [1, 1, patch, patch], format!("patch map {:?}", scores.shape()))?;
        ensure(
            scores.data().iter().all(|&p| (0.0..=1.0).contains(&p)),
            "patch scores outside [0, 1]",
        )?;
        let rec = nets.autoencoder.forward(&d2, &y).map_err(|e| e.to_string())?;
        ensure(rec.shape() == [1, 3, s, s], format!("auto-encoder output {:?}", rec.shape()))?;
        notes.push(format!("{s}px: patch map {patch}x{patch}"));
    }
    let rf = PatchDiscriminatorSpec::for_image_size(256).receptive_field();
    ensure(rf == 70, format!("receptive field {rf}"))?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("{}, receptive field 70, {:.1?}", notes.join(", "), start.elapsed()))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig {
        image_size: 8,
        widths: ModelWidths {
            generator_base: 2,
            generator_max: 2,
            patch_base: 2,
            autoencoder_base: 2,
            embedding_dim: 4,
        },
        ..TrainConfig::default()
    };
    let trainer = Trainer::<f64>::new(cfg.clone()).map_err(|e| e.to_string())?;
    let n_params = trainer.params.generator.num_scalars();
    ensure(n_params <= 1000, format!("{n_params} generator parameters"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut rand_tensor = || Tensor::from_vec([2, 3, 8, 8], (0..384).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (x, y) = (rand_tensor(), rand_tensor());
    let nets = &trainer.nets;
    let value = |p: &_| generator_objective_gradient(nets, p, &x, &y, &cfg.weights).map(|o| o.value);
    let analytic = generator_objective_gradient(nets, &trainer.params, &x, &y, &cfg.weights)
        .map_err(|e| e.to_string())?;
    let mut params = trainer.params.clone();
    let h = 1e-6;
    let (mut num, mut err) = (0.0f64, 0.0f64);
    for (i, ga) in analytic.grads.values().iter().enumerate() {
        for j in 0..ga.len() {
            let orig = params.generator.get(i)[j];
            params.generator.get_mut(i)[j] = orig + h;
            let fp = value(&params).map_err(|e| e.to_string())?;
            params.generator.get_mut(i)[j] = orig - h;
            let fm = value(&params).map_err(|e| e.to_string())?;
            params.generator.get_mut(i)[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            num += fd * fd;
            err += (fd - ga[j]).powi(2);
        }
    }
    let rel = err.sqrt() / num.sqrt();
    ensure(rel < 1e-3, format!("relative error {rel:.3e}"))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("{n_params} params, relative error {rel:.2e}, {:.1?}", start.elapsed()))
}

fn equilibrium_controller() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut state = EquilibriumState::default();
    for step in 0..10_000 {
        let lambda_k = rng.random_range(0.0..0.5);
        state = update_k(
            EquilibriumState { lambda_k, ..state },
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..2.0),
        );
        ensure((0.0..=1.0).contains(&state.k), format!("k = {} at step {step}", state.k))?;
    }
    let one = update_k(EquilibriumState::new(0.0, 0.5, 0.001).unwrap(), 0.4, 0.1);
    ensure(one.k == 0.0001, format!("k after one step = {:e}", one.k))?;
    for k in [0.0, 0.3, 1.0] {
        for l_real in [0.1, 0.4, 1.7] {
            let s = EquilibriumState::new(k, 0.5, 0.001).unwrap();
            let next = update_k(s, l_real, 0.5 * l_real);
            ensure(next.k == k, format!("k moved from {k} to {} at balance", next.k))?;
        }
    }
    Ok("k in [0,1] over 10k updates; one step gives 1e-4; balance is a fixed point".into())
}

fn random_unit(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GlyphImage {
    let px = (0..h * w * 3).map(|_| rng.random_range(0.0f32..=1.0)).collect();
    GlyphImage::new(h, w, 3, ValueRange::Unit, px).unwrap()
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let a = random_unit(&mut rng, 16, 16);
        let b = random_unit(&mut rng, 16, 16);
        let (mut sq, mut abs) = (0.0f64, 0.0f64);
        for r in 0..16 {
            for c in 0..16 {
                for ch in 0..3 {
                    let d = a.get(r, c, ch) as f64 - b.get(r, c, ch) as f64;
                    sq += d * d;
                    abs += d.abs();
                }
            }
        }
        let m = (16 * 16 * 3) as f64;
        let e1 = (style_similarity_error(&a, &b).unwrap() - sq / m).abs();
        let e2 = (l1_loss(&a, &b).unwrap() - abs / m).abs();
        worst = worst.max(e1).max(e2);
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("100 pairs, max deviation {worst:.1e}"))
}

fn damage_mask_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (h, w) = (32, 32);
    let mut boundary_cases = 0;
    for pair in 0..50 {
        let mut generated = vec![255.0f32; h * w * 3];
        let mut incomplete = vec![0.0f32; h * w * 3];
        let mut planted = vec![false; h * w];
        let (r0, c0) = (rng.random_range(2..10), rng.random_range(2..10));
        let (r1, c1) = (r0 + rng.random_range(8..20), c0 + rng.random_range(8..20));
        let (hr, hc) = (rng.random_range(r0..r1), rng.random_range(c0..c1));
        let hole = |r: usize, c: usize| (r as i64 - hr as i64).abs() <= 3 && (c as i64 - hc as i64).abs() <= 3;
        for r in r0..r1 {
            for c in c0..c1 {
                let i = r * w + c;
                let px = &mut generated[i * 3..i * 3 + 3];
                if hole(r, c) {
                    // Dark stroke over black background; one channel
                    // straddles the strict threshold.
                    let v: f32 = [0.0, 1.0, 2.0][rng.random_range(0..3)];
                    px.copy_from_slice(&[2.0, 2.0, 2.0]);
                    px[rng.random_range(0..3)] = v;
                    planted[i] = v < 2.0;
                    boundary_cases += usize::from(v == 2.0);
                } else {
                    px.fill(rng.random_range(0.0..40.0f32).round());
                    incomplete[i * 3..i * 3 + 3].fill(rng.random_range(215.0..=255.0f32).round());
                }
            }
        }
        let g = GlyphImage::new(h, w, 3, ValueRange::Byte, generated).unwrap();
        let inc = GlyphImage::new(h, w, 3, ValueRange::Byte, incomplete).unwrap();
        let mask = damage_mask(&g, &inc).map_err(|e| e.to_string())?;
        if mask.cells() != planted.as_slice() {
            let wrong = mask.cells().iter().zip(&planted).filter(|(a, b)| a != b).count();
            return Err(format!("pair {pair}: {wrong} cells differ from the planted hole"));
        }
        ensure(mask.marked_count() == planted.iter().filter(|&&m| m).count(), "marked count")?;
    }
    ensure(boundary_cases > 0, "no pixel exercised the 253 boundary")?;
    Ok(format!("50 pairs exact, {boundary_cases} boundary pixels at diff 253 left unmarked"))
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let steps = 600;
    let samples: Vec<PairedSample> = (0..8).map(|i| toy_pair(i, 64)).collect();
    let cfg = TrainConfig {
        image_size: 64,
        max_iterations: steps,
        checkpoint_interval: 0,
        seed: 3,
        widths: small_widths(),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(cfg).map_err(|e| e.to_string())?;
    let records = train_loop(&mut trainer, &samples, &LoopOutputs::default()).map_err(|e| e.to_string())?;
    let refs: Vec<&PairedSample> = samples.iter().collect();
    let (x, y) = prepare_batch::<f32>(&refs, 64).map_err(|e| e.to_string())?;
    let out = trainer.generate(&x).map_err(|e| e.to_string())?;
    // Symmetric-range differences are twice the unit-range ones.
    let l1 = mean_abs_diff(&out, &y).map_err(|e| e.to_string())? / 2.0;
    let mean = |r: &[rubbing_core::training::TrainLogRecord]| {
        r.iter().map(|r| r.convergence_measure).sum::<f64>() / r.len() as f64
    };
    let lead = mean(&records[..100]);
    let trail = mean(&records[records.len() - 100..]);
    ensure(l1 < 0.05, format!("L1 {l1:.4} after {steps} steps"))?;
    ensure(trail < lead, format!("M trailing mean {trail:.4} not below leading mean {lead:.4}"))?;
    within(start.elapsed(), Duration::from_secs(15 * 60))?;
    Ok(format!(
        "{steps} steps: L1 {l1:.4}, M {lead:.4} -> {trail:.4}, {:.1?}",
        start.elapsed()
    ))
}

fn determinism() -> Outcome {
    let samples: Vec<PairedSample> = (0..4).map(|i| toy_pair(i, 32)).collect();
    let run = || -> Result<_, String> {
        let cfg = TrainConfig {
            image_size: 32,
            max_iterations: 10,
            checkpoint_interval: 0,
            strict: true,
            widths: small_widths(),
            ..TrainConfig::default()
        };
        let mut t = Trainer::<f32>::new(cfg).map_err(|e| e.to_string())?;
        let recs = train_loop(&mut t, &samples, &LoopOutputs::default()).map_err(|e| e.to_string())?;
        let bytes = t.to_checkpoint().to_bytes().map_err(|e| e.to_string())?;
        Ok((recs, bytes))
    };
    let (ra, ca) = run()?;
    let (rb, cb) = run()?;
    let bits = |r: &[rubbing_core::training::TrainLogRecord]| -> Vec<u64> {
        r.iter()
            .flat_map(|r| [r.d1_loss, r.g_adv, r.l1, r.d2_loss, r.g_recon, r.k, r.convergence_measure])
            .map(f64::to_bits)
            .collect()
    };
    ensure(ra.len() == 10, format!("{} records", ra.len()))?;
    ensure(bits(&ra) == bits(&rb), "loss traces differ")?;
    ensure(ca == cb, "checkpoint bytes differ")?;
    Ok(format!("10-step traces and {}-byte checkpoints identical", ca.len()))
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let left = random_unit(&mut rng, 12, 12);
        let right = random_unit(&mut rng, 12, 12);
        let joined = GlyphImage::hconcat(&left, &right).unwrap();
        let p = split_pair(&joined, PairLayout::SourceLeft, "r").map_err(|e| e.to_string())?;
        ensure(p.source == left && p.target == right, "split/concat not bit-exact")?;
        let back = GlyphImage::hconcat(&p.source, &p.target).unwrap();
        ensure(back == joined, "concat of split differs")?;
    }
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let img = random_unit(&mut rng, 8, 8);
        for via in [ValueRange::Byte, ValueRange::Symmetric] {
            let back = normalize(&normalize(&img, via), ValueRange::Unit);
            for (a, b) in img.pixels().iter().zip(back.pixels()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= 1.0 / 255.0, format!("normalize drift {worst:e}"))?;

    let samples: Vec<PairedSample> = (0..3).map(|i| toy_pair(i, 16)).collect();
    let cfg = |n| TrainConfig {
        image_size: 16,
        max_iterations: n,
        checkpoint_interval: 0,
        widths: small_widths(),
        ..TrainConfig::default()
    };
    let err = |e: rubbing_core::error::Error| e.to_string();
    let mut straight = Trainer::<f32>::new(cfg(10)).map_err(err)?;
    let full = train_loop(&mut straight, &samples, &LoopOutputs::default()).map_err(err)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ckpt.rgck");
    let mut first = Trainer::<f32>::new(cfg(5)).map_err(err)?;
    let mut resumed = train_loop(&mut first, &samples, &LoopOutputs::default()).map_err(err)?;
    let saved = first.to_checkpoint();
    saved.save(&path).map_err(err)?;
    let loaded = Checkpoint::<f32>::load(&path).map_err(err)?;
    ensure(loaded == saved, "checkpoint load differs from save")?;
    let mut second = Trainer::from_checkpoint(loaded).map_err(err)?;
    second.config.max_iterations = 10;
    resumed.extend(train_loop(&mut second, &samples, &LoopOutputs::default()).map_err(err)?);
    ensure(resumed == full, "resumed log differs from uninterrupted run")?;
    ensure(second.params == straight.params, "resumed parameters differ")?;
    Ok(format!("split/concat exact, normalize drift {worst:.1e}, resume 5+5 == 10"))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rubbinggan")
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`{}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn check_pngs(dir: &Path, suffix: &str, expect: usize, size: u32) -> Result<(), String> {
    let mut found = 0;
    for entry in std::fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if !path.to_string_lossy().ends_with(suffix) {
            continue;
        }
        let img = image::open(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(
            (img.width(), img.height()) == (size, size),
            format!("{} is {}x{}", path.display(), img.width(), img.height()),
        )?;
        found += 1;
    }
    ensure(found == expect, format!("{found} files matching {suffix} in {}, expected {expect}", dir.display()))
}

fn end_to_end_cli() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    write_toy_dataset(&root.join("data"), 7, 3, 2, 32).map_err(|e| e.to_string())?;
    let font: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/DejaVuSans.ttf");
    let config = root.join("run.toml");
    std::fs::write(
        &config,
        format!(
            "dataset_root = \"data\"\noutput_dir = \"out\"\nfont_file = {:?}\n\n[train]\nimage_size = 64\nseed = 5\n\n[train.widths]\ngenerator_base = 8\ngenerator_max = 32\npatch_base = 8\nautoencoder_base = 8\nembedding_dim = 16\n",
            font.to_string_lossy()
        ),
    )
    .map_err(|e| e.to_string())?;
    let cfg = config.to_str().unwrap();
    let counts = run_cli(&["prepare", "--config", cfg])?;
    ensure(counts.trim() == "train=7 test=3 incomplete=2", format!("prepare printed {counts:?}"))?;
    run_cli(&["train", "--config", cfg, "--iterations", "5"])?;
    let log = std::fs::read_to_string(root.join("out/train_log.csv")).map_err(|e| e.to_string())?;
    ensure(log.lines().count() == 6, format!("log has {} lines", log.lines().count()))?;
    run_cli(&["eval", "--config", cfg])?;
    check_pngs(&root.join("out/eval/generated"), ".png", 3, 64)?;
    let report = std::fs::read_to_string(root.join("out/eval/report.csv")).map_err(|e| e.to_string())?;
    ensure(report.lines().count() == 5, format!("report has {} lines", report.lines().count()))?;
    let restored = run_cli(&["restore", "--config", cfg])?;
    ensure(restored.contains("2 restored, 0 failed"), format!("restore printed {restored:?}"))?;
    check_pngs(&root.join("out/restored"), "_restored.png", 2, 64)?;
    check_pngs(&root.join("out/restored"), "_overlay.png", 2, 64)?;
    within(start.elapsed(), Duration::from_secs(5 * 60))?;
    Ok(format!("prepare, train, eval, restore exit 0 in {:.1?}", start.elapsed()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("shape suite", shape_suite),
        ("gradient check", gradient_check),
        ("equilibrium controller", equilibrium_controller),
        ("metric oracle", metric_oracle),
        ("damage mask exactness", damage_mask_exactness),
        ("overfit sanity", overfit),
        ("determinism", determinism),
        ("pipeline round-trips", round_trips),
        ("end-to-end CLI", end_to_end_cli),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("acceptance {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
