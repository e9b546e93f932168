//! Training objectives: the conditional adversarial loss over patch scores,
//! the L1 reconstruction terms, and the boundary-equilibrium controller that
//! balances the generator against the auto-encoder discriminator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyph::GlyphImage;
use crate::tensor::{Real, Tensor};

/// Guard keeping probabilities away from 0 and 1 inside logarithms.
pub const LOG_EPS: f64 = 1e-7;

/// Controller state for the auto-encoder discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquilibriumState {
    /// Weight on the fake reconstruction loss, kept in `[0, 1]`.
    pub k: f64,
    /// Target ratio of fake to real reconstruction loss (output diversity).
    pub gamma: f64,
    /// Proportional gain of the `k` update.
    pub lambda_k: f64,
}

impl Default for EquilibriumState {
    fn default() -> Self {
        Self {
            k: 0.0,
            gamma: 0.5,
            lambda_k: 0.001,
        }
    }
}

impl EquilibriumState {
    pub fn new(k: f64, gamma: f64, lambda_k: f64) -> Result<Self> {
        let s = Self { k, gamma, lambda_k };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.k) {
            return Err(Error::InvalidArgument(format!("k must lie in [0, 1], got {}", self.k)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.lambda_k > 0.0 && self.lambda_k.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_k must be positive, got {}", self.lambda_k)));
        }
        Ok(())
    }
}

/// `k' = clamp(k + lambda_k * (gamma * L_real - L_fake), 0, 1)`.
pub fn update_k(state: EquilibriumState, l_real: f64, l_fake: f64) -> EquilibriumState {
    let raw = state.k + state.lambda_k * (state.gamma * l_real - l_fake);
    EquilibriumState {
        k: raw.clamp(0.0, 1.0),
        ..state
    }
}

/// Global convergence measure `L_real + |gamma * L_real - L_fake|`.
pub fn convergence_measure(l_real: f64, l_fake: f64, gamma: f64) -> f64 {
    l_real + (gamma * l_real - l_fake).abs()
}

/// `(d2_loss, g_recon_loss) = (L_real - k * L_fake, L_fake)`.
pub fn began_losses(l_real: f64, l_fake: f64, state: &EquilibriumState) -> (f64, f64) {
    (l_real - state.k * l_fake, l_fake)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the L1 term in the generator objective.
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_l1: 100.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda_l1 must be finite and non-negative, got {}",
                self.lambda_l1
            )));
        }
        Ok(())
    }
}

/// `g_adv + lambda_l1 * l1 + g_recon`.
pub fn generator_objective(g_adv: f64, l1: f64, g_recon: f64, w: &LossWeights) -> f64 {
    g_adv + w.lambda_l1 * l1 + g_recon
}

/// All scalar losses of one training iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub d1_loss: f64,
    pub g_adv_loss: f64,
    pub l1_loss: f64,
    pub d2_loss: f64,
    pub g_recon_loss: f64,
    pub convergence_measure: f64,
}

impl LossBundle {
    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("d1_loss", self.d1_loss),
            ("g_adv_loss", self.g_adv_loss),
            ("l1_loss", self.l1_loss),
            ("d2_loss", self.d2_loss),
            ("g_recon_loss", self.g_recon_loss),
            ("convergence_measure", self.convergence_measure),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// A loss over discriminator probabilities, with the number of scores that
/// had to be clamped into `[eps, 1 - eps]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreLoss {
    pub value: f64,
    pub clamped: usize,
}

/// NaN passes through so that a diverged discriminator shows up as a
/// non-finite loss instead of a silently clamped one.
fn clamp_score(p: f64, clamped: &mut usize) -> f64 {
    if !(LOG_EPS..=1.0 - LOG_EPS).contains(&p) && !p.is_nan() {
        *clamped += 1;
        return p.clamp(LOG_EPS, 1.0 - LOG_EPS);
    }
    p
}

fn check_same<T: Real>(context: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

/// Discriminator side of the conditional adversarial loss:
/// `mean(-ln real) + mean(-ln(1 - fake))` over all patches and batch items.
pub fn cgan_d1_loss<T: Real>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<ScoreLoss> {
    check_same("cgan_d1_loss", real, fake)?;
    let mut clamped = 0;
    let n = real.len() as f64;
    let mut sum = 0.0;
    for (&r, &f) in real.data().iter().zip(fake.data()) {
        let r = clamp_score(r.as_f64(), &mut clamped);
        let f = clamp_score(f.as_f64(), &mut clamped);
        sum -= r.ln() + (1.0 - f).ln();
    }
    if clamped > 0 {
        log::debug!("cgan_d1_loss clamped {clamped} scores");
    }
    Ok(ScoreLoss {
        value: sum / n,
        clamped,
    })
}

/// Gradients of [`cgan_d1_loss`] with respect to the real and fake scores.
pub fn cgan_d1_loss_grad<T: Real>(real: &Tensor<T>, fake: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let n = real.len() as f64;
    let dr = real.map(|r| T::of(-1.0 / (clamp_score(r.as_f64(), &mut 0) * n)));
    let df = fake.map(|f| T::of(1.0 / ((1.0 - clamp_score(f.as_f64(), &mut 0)) * n)));
    (dr, df)
}

/// Non-saturating generator term `mean(-ln fake)`.
pub fn cgan_g_loss<T: Real>(fake: &Tensor<T>) -> ScoreLoss {
    let mut clamped = 0;
    let n = fake.len() as f64;
    let sum: f64 = fake
        .data()
        .iter()
        .map(|&f| -clamp_score(f.as_f64(), &mut clamped).ln())
        .sum();
    ScoreLoss {
        value: sum / n,
        clamped,
    }
}

pub fn cgan_g_loss_grad<T: Real>(fake: &Tensor<T>) -> Tensor<T> {
    let n = fake.len() as f64;
    fake.map(|f| T::of(-1.0 / (clamp_score(f.as_f64(), &mut 0) * n)))
}

/// Mean absolute element difference between two tensors.
pub fn mean_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same("mean_abs_diff", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(sum / a.len() as f64)
}

/// Gradient of [`mean_abs_diff`] with respect to `a`.
pub fn mean_abs_diff_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let scale = T::of(1.0 / a.len() as f64);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            if x > y {
                scale
            } else if x < y {
                -scale
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(a.shape(), data)
}

fn check_images(context: &'static str, a: &GlyphImage, b: &GlyphImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(context, format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    if a.range() != b.range() {
        return Err(Error::InvalidArgument(format!(
            "{context}: value ranges differ ({} vs {})",
            a.range(),
            b.range()
        )));
    }
    Ok(())
}

/// Mean absolute per-element difference between a target and a generated image.
pub fn l1_loss(y: &GlyphImage, y_hat: &GlyphImage) -> Result<f64> {
    check_images("l1_loss", y, y_hat)?;
    let sum: f64 = y
        .pixels()
        .iter()
        .zip(y_hat.pixels())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / y.pixels().len() as f64)
}

/// Auto-encoder reconstruction loss `mean |v - v_rec|`; the same L1 norm as
/// [`l1_loss`].
pub fn recon_loss(v: &GlyphImage, v_rec: &GlyphImage) -> Result<f64> {
    l1_loss(v, v_rec)
}
