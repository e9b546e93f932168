//! Alternating optimization of the generator and both discriminators.
//!
//! One iteration runs four sub-updates in a fixed order:
//!
//! 1. patch discriminator step on the conditional adversarial loss,
//! 2. generator step on `g_adv + lambda_l1 * L1`,
//! 3. auto-encoder discriminator step on `L_real - k * L_fake`,
//! 4. generator step on the fake reconstruction loss,
//!
//! followed by the proportional `k` update from the losses of step 3.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{prepare_batch, BatchPlan, PairedSample};
use crate::error::{Error, Result};
use crate::losses::{
    began_losses, cgan_d1_loss, cgan_d1_loss_grad, cgan_g_loss, cgan_g_loss_grad,
    convergence_measure, generator_objective, mean_abs_diff, mean_abs_diff_grad, update_k,
    EquilibriumState, LossWeights,
};
use crate::models::{AutoEncoderSpec, GeneratorSpec, NetworkSpecs, Networks, PatchDiscriminatorSpec};
use crate::nn::ParameterSet;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

/// How the two discriminator/generator pairs share the iteration budget.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// All four sub-updates in every iteration.
    #[default]
    Interleaved,
    /// First half of the run trains D1 with G only, second half D2 with G.
    TwoPhase,
}

/// Channel widths of the three networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelWidths {
    pub generator_base: usize,
    pub generator_max: usize,
    pub patch_base: usize,
    pub autoencoder_base: usize,
    pub embedding_dim: usize,
}

impl Default for ModelWidths {
    fn default() -> Self {
        Self {
            generator_base: 64,
            generator_max: 512,
            patch_base: 64,
            autoencoder_base: 64,
            embedding_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    /// Target iteration count; resumed runs continue up to this total.
    pub max_iterations: u64,
    pub seed: u64,
    pub image_size: usize,
    pub shuffle: bool,
    pub schedule: Schedule,
    /// Save a checkpoint every this many iterations (0 disables periodic saves).
    pub checkpoint_interval: u64,
    /// Require bit-reproducible kernels. Every kernel here is single-threaded
    /// and fixed-order, so this holds either way; the flag is kept in the
    /// config snapshot.
    pub strict: bool,
    pub weights: LossWeights,
    pub equilibrium: EquilibriumState,
    pub widths: ModelWidths,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            max_iterations: 4000,
            seed: 0,
            image_size: 256,
            shuffle: true,
            schedule: Schedule::Interleaved,
            checkpoint_interval: 1000,
            strict: true,
            weights: LossWeights::default(),
            equilibrium: EquilibriumState::default(),
            widths: ModelWidths::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.image_size < 2 {
            return Err(Error::InvalidArgument(format!("image_size {} is too small", self.image_size)));
        }
        self.weights.validate()?;
        self.equilibrium.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Architecture implied by the image size and widths.
    pub fn network_specs(&self) -> NetworkSpecs {
        let w = &self.widths;
        NetworkSpecs {
            generator: GeneratorSpec::for_image_size(self.image_size).with_widths(w.generator_base, w.generator_max),
            patch: PatchDiscriminatorSpec::for_image_size(self.image_size).with_base(w.patch_base),
            autoencoder: AutoEncoderSpec::for_image_size(self.image_size).with_widths(w.autoencoder_base, w.embedding_dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: u64,
    pub d1_loss: f64,
    pub g_adv: f64,
    pub l1: f64,
    pub d2_loss: f64,
    pub g_recon: f64,
    pub generator_objective: f64,
    pub k: f64,
    pub convergence_measure: f64,
}

/// Value of the full generator objective and its gradient with respect to
/// the generator parameters.
#[derive(Debug, Clone)]
pub struct ObjectiveGradient<T> {
    pub g_adv: f64,
    pub l1: f64,
    pub g_recon: f64,
    pub value: f64,
    pub grads: ParameterSet<T>,
}

/// Parameters of the three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub generator: ParameterSet<T>,
    pub patch: ParameterSet<T>,
    pub autoencoder: ParameterSet<T>,
}

impl<T: Real> NetworkParams<T> {
    /// Generator, patch and auto-encoder weights seeded with `seed`, `seed + 1`, `seed + 2`.
    pub fn init(nets: &Networks, seed: u64) -> Self {
        Self {
            generator: nets.generator.init_parameters(seed),
            patch: nets.patch.init_parameters(seed.wrapping_add(1)),
            autoencoder: nets.autoencoder.init_parameters(seed.wrapping_add(2)),
        }
    }
}

/// `g_adv + lambda_l1 * L1(y, G(x)) + L(G(x))` for fixed discriminators,
/// with the gradient for the generator parameters.
pub fn generator_objective_gradient<T: Real>(
    nets: &Networks,
    params: &NetworkParams<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    weights: &LossWeights,
) -> Result<ObjectiveGradient<T>> {
    let trace = nets.generator.forward_traced(&params.generator, x)?;
    let fake = trace.output();
    let adv = adversarial_terms(nets, &params.patch, x, y, fake, weights)?;
    let recon = recon_term(nets, &params.autoencoder, fake)?;
    let mut dfake = adv.dfake;
    dfake.add_assign(&recon.dfake);
    let mut grads = ParameterSet::zeros(nets.generator.layout());
    nets.generator.backward(&params.generator, &trace, dfake, &mut grads);
    Ok(ObjectiveGradient {
        g_adv: adv.g_adv,
        l1: adv.l1,
        g_recon: recon.value,
        value: generator_objective(adv.g_adv, adv.l1, recon.value, weights),
        grads,
    })
}

struct AdversarialTerms<T> {
    g_adv: f64,
    l1: f64,
    dfake: Tensor<T>,
}

fn adversarial_terms<T: Real>(
    nets: &Networks,
    patch: &ParameterSet<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    fake: &Tensor<T>,
    weights: &LossWeights,
) -> Result<AdversarialTerms<T>> {
    let trace = nets.patch.forward_traced(patch, x, fake)?;
    let scores = trace.output();
    let g_adv = cgan_g_loss(scores).value;
    let mut dfake = nets
        .patch
        .backward(patch, &trace, cgan_g_loss_grad(scores), None, true)
        .expect("image gradient requested");
    let l1 = mean_abs_diff(fake, y)?;
    let lambda = T::of(weights.lambda_l1);
    for (d, s) in dfake.data_mut().iter_mut().zip(mean_abs_diff_grad(fake, y).data()) {
        *d += lambda * *s;
    }
    Ok(AdversarialTerms { g_adv, l1, dfake })
}

struct ReconTerm<T> {
    value: f64,
    dfake: Tensor<T>,
}

/// `mean |fake - D2(fake)|` and its gradient with respect to `fake`, both
/// directly and through the auto-encoder.
fn recon_term<T: Real>(nets: &Networks, ae: &ParameterSet<T>, fake: &Tensor<T>) -> Result<ReconTerm<T>> {
    let trace = nets.autoencoder.forward_traced(ae, fake)?;
    let rec = trace.output();
    let value = mean_abs_diff(fake, rec)?;
    let direct = mean_abs_diff_grad(fake, rec);
    let through = nets
        .autoencoder
        .backward(ae, &trace, direct.map(|v| -v), None, true)
        .expect("input gradient requested");
    let mut dfake = direct;
    dfake.add_assign(&through);
    Ok(ReconTerm { value, dfake })
}

/// Complete mutable training state plus the networks it parameterizes.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub specs: NetworkSpecs,
    pub nets: Networks,
    pub params: NetworkParams<T>,
    pub adam_generator: Adam<T>,
    pub adam_patch: Adam<T>,
    pub adam_autoencoder: Adam<T>,
    pub equilibrium: EquilibriumState,
    pub iteration: u64,
}

fn check_finite(term: &'static str, value: f64, iteration: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term, iteration })
    }
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let specs = config.network_specs();
        Self::with_specs(config, specs)
    }

    /// Fresh state for an explicit architecture.
    pub fn with_specs(config: TrainConfig, specs: NetworkSpecs) -> Result<Self> {
        config.validate()?;
        if specs.image_size() != config.image_size {
            return Err(Error::InvalidArgument(format!(
                "network size {} differs from configured image size {}",
                specs.image_size(),
                config.image_size
            )));
        }
        let nets = specs.build()?;
        let params = NetworkParams::init(&nets, config.seed);
        Ok(Self {
            adam_generator: Adam::new(nets.generator.layout()),
            adam_patch: Adam::new(nets.patch.layout()),
            adam_autoencoder: Adam::new(nets.autoencoder.layout()),
            equilibrium: config.equilibrium,
            iteration: 0,
            config,
            specs,
            nets,
            params,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let nets = ckpt.specs.build()?;
        for (name, layout, p) in [
            ("generator", nets.generator.layout(), &ckpt.params.generator),
            ("patch", nets.patch.layout(), &ckpt.params.patch),
            ("autoencoder", nets.autoencoder.layout(), &ckpt.params.autoencoder),
        ] {
            if p.layout() != layout {
                return Err(Error::InvalidArgument(format!("{name} parameters do not match the embedded spec")));
            }
        }
        Ok(Self {
            config: ckpt.config,
            specs: ckpt.specs,
            nets,
            params: ckpt.params,
            adam_generator: ckpt.adam_generator,
            adam_patch: ckpt.adam_patch,
            adam_autoencoder: ckpt.adam_autoencoder,
            equilibrium: ckpt.equilibrium,
            iteration: ckpt.iteration,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            specs: self.specs.clone(),
            params: self.params.clone(),
            adam_generator: self.adam_generator.clone(),
            adam_patch: self.adam_patch.clone(),
            adam_autoencoder: self.adam_autoencoder.clone(),
            equilibrium: self.equilibrium,
            iteration: self.iteration,
        }
    }

    fn phases(&self) -> (bool, bool) {
        match self.config.schedule {
            Schedule::Interleaved => (true, true),
            Schedule::TwoPhase => {
                let first = self.iteration < self.config.max_iterations / 2;
                (first, !first)
            }
        }
    }

    /// One iteration on a prepared batch (`x`, `y` in the symmetric range).
    /// A non-finite loss aborts before the update that would consume it.
    pub fn train_step(&mut self, x: &Tensor<T>, y: &Tensor<T>) -> Result<TrainLogRecord> {
        let it = self.iteration + 1;
        let adam = self.config.adam();
        let (train_adv, train_recon) = self.phases();
        let nets = &self.nets;

        // (1) patch discriminator.
        let fake = nets.generator.forward(&self.params.generator, x)?;
        let real_trace = nets.patch.forward_traced(&self.params.patch, x, y)?;
        let fake_trace = nets.patch.forward_traced(&self.params.patch, x, &fake)?;
        let d1_loss = check_finite(
            "d1_loss",
            cgan_d1_loss(real_trace.output(), fake_trace.output())?.value,
            it,
        )?;
        if train_adv {
            let (dr, df) = cgan_d1_loss_grad(real_trace.output(), fake_trace.output());
            let mut grads = ParameterSet::zeros(nets.patch.layout());
            nets.patch.backward(&self.params.patch, &real_trace, dr, Some(&mut grads), false);
            nets.patch.backward(&self.params.patch, &fake_trace, df, Some(&mut grads), false);
            self.adam_patch.step(&adam, &mut self.params.patch, &grads);
        }

        // (2) generator against the patch discriminator plus L1.
        let trace = nets.generator.forward_traced(&self.params.generator, x)?;
        let adv = adversarial_terms(nets, &self.params.patch, x, y, trace.output(), &self.config.weights)?;
        check_finite("g_adv", adv.g_adv, it)?;
        check_finite("l1", adv.l1, it)?;
        if train_adv {
            let mut grads = ParameterSet::zeros(nets.generator.layout());
            nets.generator.backward(&self.params.generator, &trace, adv.dfake, &mut grads);
            self.adam_generator.step(&adam, &mut self.params.generator, &grads);
        }

        // (3) auto-encoder discriminator.
        let trace = nets.generator.forward_traced(&self.params.generator, x)?;
        let fake = trace.output();
        let ae = &nets.autoencoder;
        let real_rec = ae.forward_traced(&self.params.autoencoder, y)?;
        let fake_rec = ae.forward_traced(&self.params.autoencoder, fake)?;
        let l_real = check_finite("l_real", mean_abs_diff(y, real_rec.output())?, it)?;
        let l_fake = check_finite("l_fake", mean_abs_diff(fake, fake_rec.output())?, it)?;
        let (d2_loss, _) = began_losses(l_real, l_fake, &self.equilibrium);
        if train_recon {
            let k = T::of(self.equilibrium.k);
            let mut grads = ParameterSet::zeros(ae.layout());
            let dr = mean_abs_diff_grad(real_rec.output(), y);
            ae.backward(&self.params.autoencoder, &real_rec, dr, Some(&mut grads), false);
            let df = mean_abs_diff_grad(fake_rec.output(), fake).map(|v| -k * v);
            ae.backward(&self.params.autoencoder, &fake_rec, df, Some(&mut grads), false);
            self.adam_autoencoder.step(&adam, &mut self.params.autoencoder, &grads);
        }

        // (4) generator against the auto-encoder.
        let recon = recon_term(nets, &self.params.autoencoder, fake)?;
        let g_recon = check_finite("g_recon", recon.value, it)?;
        if train_recon {
            let mut grads = ParameterSet::zeros(nets.generator.layout());
            nets.generator.backward(&self.params.generator, &trace, recon.dfake, &mut grads);
            self.adam_generator.step(&adam, &mut self.params.generator, &grads);
            self.equilibrium = update_k(self.equilibrium, l_real, l_fake);
        }

        self.iteration = it;
        Ok(TrainLogRecord {
            iteration: it,
            d1_loss,
            g_adv: adv.g_adv,
            l1: adv.l1,
            d2_loss,
            g_recon,
            generator_objective: generator_objective(adv.g_adv, adv.l1, g_recon, &self.config.weights),
            k: self.equilibrium.k,
            convergence_measure: convergence_measure(l_real, l_fake, self.equilibrium.gamma),
        })
    }

    /// Generator output for a prepared batch.
    pub fn generate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.nets.generator.forward(&self.params.generator, x)
    }
}

/// Append-only CSV log with one row per [`TrainLogRecord`].
pub struct TrainLogWriter {
    writer: csv::Writer<File>,
}

impl TrainLogWriter {
    /// Open `path`, truncating unless `append` is set. A header row is
    /// written whenever the file starts empty.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        let writer = csv::WriterBuilder::new().has_headers(empty).from_writer(file);
        Ok(Self { writer })
    }

    pub fn write(&mut self, record: &TrainLogRecord) -> Result<()> {
        self.writer.serialize(record)?;
        self.writer.flush().map_err(|e| Error::io("train log", e))?;
        Ok(())
    }
}

pub fn read_train_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Where [`train_loop`] writes its side outputs.
#[derive(Debug, Clone, Default)]
pub struct LoopOutputs {
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Append to an existing log instead of truncating it.
    pub append_log: bool,
}

impl LoopOutputs {
    pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
        dir.join(format!("ckpt_{iteration:06}.rgck"))
    }
}

/// Train until `config.max_iterations` total iterations. The batch for
/// iteration `t` is the `t`-th batch of the seeded plan, so resuming from a
/// checkpoint continues the exact sequence.
pub fn train_loop<T: Real>(
    trainer: &mut Trainer<T>,
    samples: &[PairedSample],
    outputs: &LoopOutputs,
) -> Result<Vec<TrainLogRecord>> {
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let cfg = trainer.config.clone();
    let plan = BatchPlan::new(samples.len(), cfg.batch_size, cfg.seed, cfg.shuffle)?;
    let mut log = match &outputs.log_path {
        Some(p) => Some(TrainLogWriter::open(p, outputs.append_log)?),
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut records = Vec::new();
    while trainer.iteration < cfg.max_iterations {
        let batch: Vec<&PairedSample> = plan.batch_at(trainer.iteration).into_iter().map(|i| &samples[i]).collect();
        let (x, y) = prepare_batch::<T>(&batch, cfg.image_size)?;
        let record = trainer.train_step(&x, &y)?;
        if let Some(log) = log.as_mut() {
            log.write(&record)?;
        }
        log::debug!(
            "iter {} d1={:.4} g_adv={:.4} l1={:.4} d2={:.4} g_recon={:.4} k={:.5} M={:.4}",
            record.iteration,
            record.d1_loss,
            record.g_adv,
            record.l1,
            record.d2_loss,
            record.g_recon,
            record.k,
            record.convergence_measure
        );
        records.push(record);
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_interval > 0 && trainer.iteration % cfg.checkpoint_interval == 0 {
                trainer
                    .to_checkpoint()
                    .save(&LoopOutputs::checkpoint_path(dir, trainer.iteration))?;
            }
        }
    }
    Ok(records)
}

/// Write a CSV log from records in one go (used by tests and tools).
pub fn write_train_log(path: &Path, records: &[TrainLogRecord]) -> Result<()> {
    let mut w = TrainLogWriter::open(path, false)?;
    for r in records {
        w.write(r)?;
    }
    let mut file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}
