//! Adversarial losses and the mutual-information term tying projected codes
//! to the codes the generator was conditioned on.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::codes::TransformationCode;
use crate::error::{Error, Result};

/// Losses of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub d_adv_loss: f64,
    pub g_adv_loss: f64,
    pub mi_loss: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn new(d_adv_loss: f64, g_adv_loss: f64, mi_loss: f64, lambda: f64) -> Self {
        Self {
            d_adv_loss,
            g_adv_loss,
            mi_loss,
            total_g: g_adv_loss + lambda * mi_loss,
            total_d: d_adv_loss + lambda * mi_loss,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.d_adv_loss, self.g_adv_loss, self.mi_loss, self.total_g, self.total_d]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Generator adversarial objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `-E[log σ(D(G))]`.
    #[default]
    NonSaturating,
    /// `E[log(1 - σ(D(G)))]`, the literal minimax form.
    Minimax,
}

/// `log(1 + e^x)` written so that the subgradient choice at 0 does not matter
/// and large `|x|` neither overflows nor loses the linear part.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let a = x.abs()?;
    let tail = (a.neg()?.exp()? + 1.0)?.log()?;
    Ok((((x * 0.5)? + (a * 0.5)?)? + tail)?)
}

fn check_nonempty(t: &Tensor, what: &str) -> Result<()> {
    if t.elem_count() == 0 {
        return Err(Error::invalid(format!("{what}: empty batch")));
    }
    Ok(())
}

/// `-E[log σ(real)] - E[log(1 - σ(fake))]`.
pub fn d_adv_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    check_nonempty(real_logits, "discriminator loss (real)")?;
    check_nonempty(fake_logits, "discriminator loss (fake)")?;
    let real = softplus(&real_logits.neg()?)?.mean_all()?;
    let fake = softplus(fake_logits)?.mean_all()?;
    Ok((real + fake)?)
}

pub fn g_adv_loss(fake_logits: &Tensor, kind: GeneratorLoss) -> Result<Tensor> {
    check_nonempty(fake_logits, "generator loss")?;
    Ok(match kind {
        GeneratorLoss::NonSaturating => softplus(&fake_logits.neg()?)?.mean_all()?,
        GeneratorLoss::Minimax => softplus(fake_logits)?.mean_all()?.neg()?,
    })
}

/// Negative log-likelihood of `t_proj` under a unit-variance Gaussian centred
/// at `t`, without the constant: `0.5 * mean_b ||t_proj - t||^2`.
/// Both tensors are `(B, D)`.
pub fn mi_loss_tensor(t: &Tensor, t_proj: &Tensor) -> Result<Tensor> {
    if t.dims() != t_proj.dims() {
        return Err(Error::shape(format!(
            "mi_loss: {:?} vs {:?}",
            t.dims(),
            t_proj.dims()
        )));
    }
    let (b, _) = t.dims2()?;
    if b == 0 {
        return Err(Error::invalid("mi_loss: empty batch"));
    }
    let diff = (t_proj - t)?;
    Ok((diff.sqr()?.sum(1)?.mean_all()? * 0.5)?)
}

fn logits_tensor(v: &[f64]) -> Result<Tensor> {
    Ok(Tensor::from_slice(v, v.len(), &Device::Cpu)?)
}

fn scalar(t: Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

pub fn adv_loss_discriminator(real_logits: &[f64], fake_logits: &[f64]) -> Result<f64> {
    scalar(d_adv_loss(&logits_tensor(real_logits)?, &logits_tensor(fake_logits)?)?)
}

pub fn adv_loss_generator(fake_logits: &[f64]) -> Result<f64> {
    scalar(g_adv_loss(&logits_tensor(fake_logits)?, GeneratorLoss::NonSaturating)?)
}

/// Batch MI loss over code pairs.
pub fn mi_loss(t: &[TransformationCode], t_proj: &[TransformationCode]) -> Result<f64> {
    if t.len() != t_proj.len() {
        return Err(Error::shape("mi_loss: batch sizes differ"));
    }
    if t.is_empty() {
        return Err(Error::invalid("mi_loss: empty batch"));
    }
    if t.iter().zip(t_proj).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::shape("mi_loss: code shapes differ"));
    }
    let to_t = |codes: &[TransformationCode]| -> Result<Tensor> {
        let d = codes[0].flat_dim();
        let flat: Vec<f64> = codes
            .iter()
            .flat_map(|c| c.flatten().into_iter().map(f64::from))
            .collect();
        Ok(Tensor::from_vec(flat, (codes.len(), d), &Device::Cpu)?)
    };
    scalar(mi_loss_tensor(&to_t(t)?, &to_t(t_proj)?)?)
}
