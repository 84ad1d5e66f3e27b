//! Progressive adversarial training with the mutual-information term.

mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Block, Checkpoint, CheckpointKind, Manifest, FORMAT_VERSION};
pub use config::TrainConfig;

use crate::codes::{sample_latent, sample_transformation, LatentCode, TransformationCode};
use crate::data::{split, ImageDataset};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::networks::{codes_tensor, latents_tensor, ArchConfig, Discriminator, Generator, ParamGroup};
use crate::objectives::{d_adv_loss, g_adv_loss, mi_loss_tensor, LossReport};
use crate::optim::{Adam, Moments};

const DTYPE: DType = DType::F32;

/// Serialized position of the training RNG.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Corrupt("invalid rng state in manifest".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Training-specific manifest fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMeta {
    pub config: TrainConfig,
    pub step_in_stage: u64,
    pub adam_steps: BTreeMap<String, u64>,
    pub rng: RngState,
}

/// Networks, optimizer moments and schedule position of a run.
#[derive(Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub g: Generator,
    pub d: Discriminator,
    pub adam: Adam,
    pub step: u64,
    pub step_in_stage: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let arch = config.arch();
        Ok(Self {
            config: config.clone(),
            g: Generator::new(&arch, DTYPE, 1)?,
            d: Discriminator::new(&arch, DTYPE, 1)?,
            adam: Adam::new(config.adam()),
            step: 0,
            step_in_stage: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        self.g.arch()
    }

    pub fn stage(&self) -> usize {
        self.g.stage()
    }

    pub fn resolution(&self) -> usize {
        self.g.resolution()
    }

    pub fn fade_alpha(&self) -> f64 {
        self.g.fade_alpha()
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate(self.stage())
    }

    pub fn batch_size(&self) -> usize {
        self.config.batch_size(self.stage())
    }

    pub fn is_finished(&self) -> bool {
        self.stage() == self.config.num_stages() && self.step_in_stage >= self.config.stage_steps(self.stage())
    }

    /// Moves the schedule one step forward, growing both networks at a stage
    /// boundary.
    fn advance(&mut self) -> Result<()> {
        self.step += 1;
        self.step_in_stage += 1;
        let stage = self.stage();
        if self.step_in_stage >= self.config.stage_steps(stage) && stage < self.config.num_stages() {
            self.g.grow(stage + 1)?;
            self.d.grow(stage + 1)?;
            self.step_in_stage = 0;
            log::info!("grew to {}x{} at step {}", self.resolution(), self.resolution(), self.step);
        }
        let alpha = self.config.fade_alpha(self.stage(), self.step_in_stage);
        self.g.set_fade_alpha(alpha)?;
        self.d.set_fade_alpha(alpha)
    }

    /// Draws `n` training indices from `pool`.
    pub fn sample_indices(&mut self, pool: &[usize], n: usize) -> Vec<usize> {
        (0..n).map(|_| pool[self.rng.gen_range(0..pool.len())]).collect()
    }

    fn sample_codes(&mut self, n: usize) -> Result<(Vec<LatentCode>, Vec<TransformationCode>)> {
        let arch = self.g.arch().clone();
        let mut zs = Vec::with_capacity(n);
        let mut ts = Vec::with_capacity(n);
        for _ in 0..n {
            zs.push(sample_latent(&mut self.rng, arch.k, arch.z_dim)?);
            ts.push(sample_transformation(&mut self.rng, arch.k, arch.t_dim)?);
        }
        Ok((zs, ts))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let adam_steps = self
            .adam
            .moments()
            .iter()
            .map(|(k, m)| (k.clone(), m.steps))
            .collect();
        let meta = TrainMeta {
            config: self.config.clone(),
            step_in_stage: self.step_in_stage,
            adam_steps,
            rng: RngState::capture(&self.rng),
        };
        let mut ckpt = Checkpoint::new(Manifest {
            kind: CheckpointKind::TrainState,
            format_version: FORMAT_VERSION,
            arch: self.arch().clone(),
            stage: self.stage(),
            fade_alpha: self.fade_alpha(),
            step: self.step,
            config_hash: self.config.hash(),
            extra: serde_json::to_value(meta)?,
        });
        ckpt.add_params(self.g.params())?;
        ckpt.add_params(self.d.params())?;
        for (name, m) in self.adam.moments() {
            ckpt.blocks.insert(format!("opt/{name}/m"), Block::from_tensor(&m.m)?);
            ckpt.blocks.insert(format!("opt/{name}/v"), Block::from_tensor(&m.v)?);
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.manifest;
        if m.kind != CheckpointKind::TrainState {
            return Err(Error::invalid("checkpoint does not hold a training state"));
        }
        let meta: TrainMeta = serde_json::from_value(m.extra.clone())?;
        meta.config.validate()?;
        if meta.config.hash() != m.config_hash || meta.config.arch() != m.arch {
            return Err(Error::Corrupt("manifest config does not match its hash or architecture".into()));
        }
        let (g, d) = load_networks(ckpt, DTYPE)?;
        let mut adam = Adam::new(meta.config.adam());
        for (name, steps) in &meta.adam_steps {
            let get = |suffix: &str| -> Result<Tensor> {
                ckpt.blocks
                    .get(&format!("opt/{name}/{suffix}"))
                    .ok_or_else(|| Error::Corrupt(format!("missing optimizer moment for {name}")))?
                    .to_tensor(DTYPE)
            };
            adam.insert_moments(
                name.clone(),
                Moments {
                    m: get("m")?,
                    v: get("v")?,
                    steps: *steps,
                },
            );
        }
        Ok(Self {
            config: meta.config,
            g,
            d,
            adam,
            step: m.step,
            step_in_stage: meta.step_in_stage,
            rng: meta.rng.restore()?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Rebuilds generator and discriminator from any checkpoint kind.
pub fn load_networks(ckpt: &Checkpoint, dtype: DType) -> Result<(Generator, Discriminator)> {
    let m = &ckpt.manifest;
    let g = Generator::from_params(&m.arch, ckpt.params_with_prefix("g.", dtype)?, m.stage, m.fade_alpha)?;
    let d = Discriminator::from_params(&m.arch, ckpt.params_with_prefix("d.", dtype)?, m.stage, m.fade_alpha)?;
    Ok((g, d))
}

/// Progressive-growing input blend for real images during a fade-in:
/// `alpha * x + (1 - alpha) * up(down(x))`.
pub fn fade_reals(images: &[Image], alpha: f64) -> Result<Vec<Image>> {
    if alpha >= 1.0 {
        return Ok(images.to_vec());
    }
    images
        .iter()
        .map(|x| {
            let low = x.downsample2()?.upsample2()?;
            let data = x
                .data()
                .iter()
                .zip(low.data())
                .map(|(&a, &b)| (alpha * a as f64 + (1.0 - alpha) * b as f64) as f32)
                .collect();
            Image::new(x.size(), data)
        })
        .collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One discriminator update on the adversarial loss, then one joint update
/// of the generator and the projection heads on `g_adv + λ·MI`.
///
/// The discriminator trunk and adversarial head only ever move in the first
/// update, so their trajectory does not depend on λ within a step.
pub fn train_step(state: &mut TrainState, real_batch: &[Image]) -> Result<LossReport> {
    let res = state.resolution();
    if real_batch.is_empty() {
        return Err(Error::invalid("empty real batch"));
    }
    if let Some(bad) = real_batch.iter().find(|x| x.size() != res) {
        return Err(Error::StageMismatch {
            expected: res,
            actual: bad.size(),
        });
    }
    let b = real_batch.len();
    let lr = state.learning_rate();
    let lambda = state.config.lambda;
    let kind = state.config.generator_loss;
    let (zs, ts) = state.sample_codes(b)?;
    let z = latents_tensor(&zs, DTYPE)?;
    let t = codes_tensor(&ts, DTYPE)?;
    let reals = Image::batch_to_tensor(&fade_reals(real_batch, state.fade_alpha())?, DTYPE)?;

    let fake = state.g.forward(&z, &t)?.image.detach();
    let real_logits = state.d.adv_logits(&reals)?;
    let fake_logits = state.d.adv_logits(&fake)?;
    let d_loss = d_adv_loss(&real_logits, &fake_logits)?;
    let d_value = scalar(&d_loss)?;
    if !d_value.is_finite() {
        return Err(non_finite(state.step, LossReport::new(d_value, f64::NAN, f64::NAN, lambda)));
    }
    let grads = d_loss.backward()?;
    state
        .adam
        .step(state.d.params(), &grads, lr, |n| ParamGroup::of(n) == ParamGroup::DiscAdv)?;

    let fake = state.g.forward(&z, &t)?.image;
    let out = state.d.forward(&fake)?;
    let g_loss = g_adv_loss(&out.logits, kind)?;
    let width = state.g.active_layers() * state.arch().t_dim;
    let mi = mi_loss_tensor(&t.narrow(1, 0, width)?, &out.projection.narrow(1, 0, width)?)?;
    let report = LossReport::new(d_value, scalar(&g_loss)?, scalar(&mi)?, lambda);
    if !report.is_finite() {
        return Err(non_finite(state.step, report));
    }
    let total = (g_loss + (mi * lambda)?)?;
    let grads = total.backward()?;
    state.adam.step(state.g.params(), &grads, lr, |_| true)?;
    state
        .adam
        .step(state.d.params(), &grads, lr, |n| ParamGroup::of(n) == ParamGroup::DiscProj)?;

    state.advance()?;
    Ok(report)
}

fn non_finite(step: u64, report: LossReport) -> Error {
    Error::NonFinite {
        step,
        report: serde_json::to_string(&report).unwrap_or_default(),
    }
}

/// Tab-separated per-step log.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step\tstage\tfade_alpha\td_adv\tg_adv\tmi\tlr";

    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{}", Self::HEADER).map_err(|e| Error::io(path, e))?;
        Ok(Self { out })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = File::options().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn line(step: u64, stage_res: usize, alpha: f64, lr: f64, r: &LossReport) -> String {
        format!(
            "{step}\t{stage_res}\t{alpha:.6}\t{:.8}\t{:.8}\t{:.8}\t{lr:.6}",
            r.d_adv_loss, r.g_adv_loss, r.mi_loss
        )
    }

    pub fn write(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| Error::io("metrics log", e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("metrics log", e))
    }
}

/// One row of the step log, kept in memory as well.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub resolution: usize,
    pub fade_alpha: f64,
    pub lr: f64,
    pub report: LossReport,
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Stop after this many steps even if the schedule is not finished.
    pub max_steps: Option<u64>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Checks the dataset against the schedule and returns the training indices.
pub fn training_indices(config: &TrainConfig, dataset: &dyn ImageDataset) -> Result<Vec<usize>> {
    if dataset.resolution() < config.max_resolution {
        return Err(Error::invalid(format!(
            "dataset resolution {} below max_resolution {}",
            dataset.resolution(),
            config.max_resolution
        )));
    }
    let train = split(dataset, config.dataset.holdout)?.train;
    let largest = (1..=config.num_stages()).map(|s| config.batch_size(s)).max().unwrap_or(1);
    if train.len() < largest {
        return Err(Error::invalid(format!(
            "dataset has {} training images, fewer than one batch of {largest}",
            train.len()
        )));
    }
    Ok(train)
}

/// Continues `state` until the schedule ends (or `max_steps` more steps).
pub fn continue_training(
    mut state: TrainState,
    dataset: &dyn ImageDataset,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    let train = training_indices(&state.config, dataset)?;
    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.tsv");
            Some(if state.step > 0 && path.exists() {
                MetricsLog::append(&path)?
            } else {
                MetricsLog::create(&path)?
            })
        }
        None => None,
    };
    let mut records = Vec::new();
    let mut taken = 0;
    while !state.is_finished() && opts.max_steps.map_or(true, |m| taken < m) {
        let (res, alpha, lr, step) = (state.resolution(), state.fade_alpha(), state.learning_rate(), state.step);
        let idx = state.sample_indices(&train, state.batch_size());
        let batch = idx
            .iter()
            .map(|&i| dataset.image(i, res))
            .collect::<Result<Vec<_>>>()?;
        let report = match train_step(&mut state, &batch) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                if let Some(dir) = &opts.out_dir {
                    let dump = dir.join("abort.ckpt");
                    if let Err(save) = state.save(&dump) {
                        log::error!("could not write {}: {save}", dump.display());
                    }
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some(log) = log.as_mut() {
            log.write(&MetricsLog::line(step, res, alpha, lr, &report))?;
        }
        records.push(StepRecord {
            step,
            resolution: res,
            fade_alpha: alpha,
            lr,
            report,
        });
        taken += 1;
        if let (Some(dir), interval) = (&opts.out_dir, state.config.checkpoint_interval) {
            if interval > 0 && state.step % interval == 0 {
                state.save(&dir.join(format!("ckpt_{:08}.bin", state.step)))?;
            }
        }
        if state.step % 100 == 0 {
            log::info!("step {} @{res}: {:?}", state.step, records.last().map(|r| &r.report));
        }
    }
    if let Some(log) = log.as_mut() {
        log.flush()?;
    }
    let checkpoint = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join("final.bin");
            state.save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        state,
        records,
        checkpoint,
    })
}

pub fn run_training(config: &TrainConfig, dataset: &dyn ImageDataset, opts: &RunOptions) -> Result<TrainOutcome> {
    continue_training(TrainState::new(config)?, dataset, opts)
}
