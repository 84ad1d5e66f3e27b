use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, SyntheticConfig};
use crate::error::{Error, Result};
use crate::networks::{AffineInit, ArchConfig};
use crate::nn::fnv1a;
use crate::objectives::GeneratorLoss;
use crate::optim::AdamConfig;

/// Everything a training run depends on. Loaded from TOML; unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub t_dim: usize,
    pub z_dim: usize,
    /// Channels per resolution block from 4x4 upwards; must cover every
    /// stage up to `max_resolution`.
    pub channels: Vec<usize>,
    pub max_resolution: usize,
    /// Real images shown per stage.
    pub images_per_stage: usize,
    /// Share of each grown stage spent fading the new block in.
    pub fade_fraction: f64,
    /// Batch size per stage; the last entry repeats for later stages.
    pub batch_sizes: Vec<usize>,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    #[serde(default)]
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub generator_loss: GeneratorLoss,
    /// Reserved; generator weight averaging is not implemented.
    #[serde(default)]
    pub ema: bool,
    #[serde(default = "default_affine_init")]
    pub affine_init: AffineInit,
    pub dataset: DatasetSpec,
}

fn default_affine_init() -> AffineInit {
    AffineInit::Random
}

impl TrainConfig {
    /// The small CPU profile: 4x4 to 32x32 on the synthetic scenes.
    pub fn toy() -> Self {
        Self {
            k: 4,
            t_dim: 8,
            z_dim: 8,
            channels: vec![32, 32, 16, 8],
            max_resolution: 32,
            images_per_stage: 8_000,
            fade_fraction: 0.5,
            batch_sizes: vec![16],
            lr_start: 0.001,
            lr_end: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
            lambda: 1.0,
            seed: 0,
            checkpoint_interval: 0,
            generator_loss: GeneratorLoss::NonSaturating,
            ema: false,
            affine_init: AffineInit::Random,
            dataset: DatasetSpec::synthetic(
                SyntheticConfig {
                    brightness: [0.1, 1.0],
                    hue: [0.4, 2.4],
                    ..SyntheticConfig::default()
                },
                32,
                0,
            ),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_stages(&self) -> usize {
        (self.max_resolution / 4).trailing_zeros() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_resolution < 4 || !self.max_resolution.is_power_of_two() {
            return bad(format!("max_resolution {} must be a power of two >= 4", self.max_resolution));
        }
        if self.channels.len() < self.num_stages() {
            return bad(format!(
                "{} channel entries cannot cover {} stages",
                self.channels.len(),
                self.num_stages()
            ));
        }
        if !(self.fade_fraction > 0.0 && self.fade_fraction < 1.0) {
            return bad(format!("fade_fraction {} outside (0, 1)", self.fade_fraction));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return bad("batch_sizes must be nonempty and positive".into());
        }
        if self.images_per_stage == 0 {
            return bad("images_per_stage must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and non-negative", self.lambda));
        }
        if self.ema {
            return bad("ema is reserved and must be false".into());
        }
        if self.dataset.resolution < self.max_resolution {
            return bad(format!(
                "dataset resolution {} below max_resolution {}",
                self.dataset.resolution, self.max_resolution
            ));
        }
        self.dataset.validate()?;
        self.arch().validate()
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            k: self.k,
            t_dim: self.t_dim,
            z_dim: self.z_dim,
            channels: self.channels[..self.num_stages().min(self.channels.len())].to_vec(),
            affine_init: self.affine_init,
            init_seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn batch_size(&self, stage: usize) -> usize {
        self.batch_sizes[(stage - 1).min(self.batch_sizes.len() - 1)]
    }

    /// Steps spent at a stage: enough batches to show `images_per_stage`.
    pub fn stage_steps(&self, stage: usize) -> u64 {
        self.images_per_stage.div_ceil(self.batch_size(stage)) as u64
    }

    pub fn fade_steps(&self, stage: usize) -> u64 {
        if stage == 1 {
            0
        } else {
            ((self.stage_steps(stage) as f64 * self.fade_fraction).ceil() as u64).max(1)
        }
    }

    /// Blend factor after `step_in_stage` steps of `stage`.
    pub fn fade_alpha(&self, stage: usize, step_in_stage: u64) -> f64 {
        let fade = self.fade_steps(stage);
        if fade == 0 {
            1.0
        } else {
            (step_in_stage as f64 / fade as f64).min(1.0)
        }
    }

    /// Linear ramp from `lr_start` at the first stage to `lr_end` at the last.
    pub fn learning_rate(&self, stage: usize) -> f64 {
        let n = self.num_stages();
        if n == 1 {
            return self.lr_end;
        }
        self.lr_start + (self.lr_end - self.lr_start) * (stage - 1) as f64 / (n - 1) as f64
    }

    pub fn total_steps(&self) -> u64 {
        (1..=self.num_stages()).map(|s| self.stage_steps(s)).sum()
    }

    /// FNV-1a of the JSON form, as 16 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_arithmetic() {
        let c = TrainConfig::toy();
        assert_eq!(c.num_stages(), 4);
        let res: Vec<usize> = (1..=c.num_stages()).map(ArchConfig::resolution).collect();
        assert_eq!(res, vec![4, 8, 16, 32]);
        assert_eq!(c.learning_rate(1), 0.001);
        assert_eq!(c.learning_rate(4), 0.002);
        assert_eq!(c.stage_steps(1), 500);
        assert_eq!(c.fade_alpha(1, 0), 1.0);
        assert_eq!(c.fade_alpha(2, 0), 0.0);
        assert_eq!(c.fade_alpha(2, c.fade_steps(2)), 1.0);
    }

    #[test]
    fn toml_round_trip_and_rejections() {
        let c = TrainConfig::toy();
        let text = c.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        assert!(TrainConfig::from_toml(&format!("{text}\nunknown_key = 1\n")).is_err());
        let mut bad = c.clone();
        bad.fade_fraction = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.max_resolution = 24;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.ema = true;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_stage_uses_end_rate() {
        let mut c = TrainConfig::toy();
        c.max_resolution = 4;
        assert_eq!(c.learning_rate(1), c.lr_end);
    }
}
