//! Transformation deployer (generator) and transformation learner
//! (discriminator with per-layer projection heads).

mod discriminator;
mod generator;

pub use discriminator::{DiscOutput, Discriminator};
pub use generator::{GenOutput, Generator};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::codes::{LatentCode, TransformationCode};
use crate::error::{Error, Result};

/// How the style affine maps `(t_k, z_k) -> (scale, bias)` start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffineInit {
    /// Unit-variance weights (equalized), bias `(1, 0)`.
    Random,
    /// Zero weights, bias `(1, 0)`: every input maps to scale 1, bias 0.
    Zero,
}

/// Architecture hyperparameters shared by generator and discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Number of code-injected layers (and projection heads).
    pub k: usize,
    pub t_dim: usize,
    pub z_dim: usize,
    /// Feature channels per resolution block, starting at 4x4.
    pub channels: Vec<usize>,
    pub affine_init: AffineInit,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ArchConfig {
    /// Desk-scale profile: K=5 injected layers from 4x4 to 64x64.
    fn default() -> Self {
        Self {
            k: 5,
            t_dim: 4,
            z_dim: 32,
            channels: vec![128, 64, 32, 16, 8],
            affine_init: AffineInit::Random,
            init_seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("arch: at least one resolution block required"));
        }
        if self.k == 0 || self.k > self.channels.len() {
            return Err(Error::invalid(format!(
                "arch: K={} must be in [1, {}]",
                self.k,
                self.channels.len()
            )));
        }
        if self.t_dim == 0 || self.z_dim == 0 || self.channels.contains(&0) {
            return Err(Error::invalid("arch: dimensions must be positive"));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    /// Side length at a 1-based stage.
    pub fn resolution(stage: usize) -> usize {
        4 << (stage - 1)
    }

    pub fn max_resolution(&self) -> usize {
        Self::resolution(self.num_stages())
    }

    pub fn stage_for_resolution(&self, res: usize) -> Result<usize> {
        (1..=self.num_stages())
            .find(|&s| Self::resolution(s) == res)
            .ok_or_else(|| Error::invalid(format!("resolution {res} is not a stage of this model")))
    }

    pub fn code_dim(&self) -> usize {
        self.k * self.t_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.k * self.z_dim
    }

    pub(crate) fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.num_stages() {
            return Err(Error::invalid(format!(
                "stage {stage} outside [1, {}]",
                self.num_stages()
            )));
        }
        Ok(())
    }
}

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Generator parameters.
    Generator,
    /// Discriminator trunk and adversarial head.
    DiscAdv,
    /// Projection heads.
    DiscProj,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("g.") {
            ParamGroup::Generator
        } else if name.starts_with("d.head") {
            ParamGroup::DiscProj
        } else {
            ParamGroup::DiscAdv
        }
    }
}

/// Stacks transformation codes into a `(B, K*t_dim)` tensor.
pub fn codes_tensor(codes: &[TransformationCode], dtype: DType) -> Result<Tensor> {
    stack_rows(codes.iter().map(|c| c.flatten()).collect(), dtype)
}

/// Stacks latent codes into a `(B, K*z_dim)` tensor.
pub fn latents_tensor(codes: &[LatentCode], dtype: DType) -> Result<Tensor> {
    stack_rows(codes.iter().map(|c| c.flatten()).collect(), dtype)
}

fn stack_rows(rows: Vec<Vec<f32>>, dtype: DType) -> Result<Tensor> {
    let b = rows.len();
    if b == 0 {
        return Err(Error::invalid("empty code batch"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("code batch has mixed shapes"));
    }
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    Ok(Tensor::from_vec(flat, (b, d), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits a `(B, K*t_dim)` tensor into codes.
pub fn tensor_to_codes(t: &Tensor, k: usize, t_dim: usize) -> Result<Vec<TransformationCode>> {
    let (b, d) = t.dims2()?;
    if d != k * t_dim {
        return Err(Error::shape(format!("projection width {d} != {k} x {t_dim}")));
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    flat.chunks(d)
        .take(b)
        .map(|row| TransformationCode::from_flat(k, t_dim, row))
        .collect()
}
