//! Command-line front end and HTTP inference service.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use transpace::codes::{compose_directions, TransformationDirection};
use transpace::data::{split, DatasetSpec, ImageDataset, SyntheticConfig, SyntheticDataset};
use transpace::image::Image;
use transpace::metrics::{frechet_distance, image_stats, ConvEmbedder, FeatureStats};
use transpace::networks::{Discriminator, Generator};
use transpace::rerender::{edited_features, train_rerenderer, RerenderConfig, Rerenderer};
use transpace::training::{
    continue_training, load_networks, run_training, Checkpoint, CheckpointKind, RunOptions, TrainConfig, TrainMeta,
    TrainState,
};
use transpace::transform::{
    check_document_stage, codes_for_seed, compose_and_apply, extract_transformation, layerwise_manipulate,
    load_direction, transform_sequence,
};

pub mod server;

#[derive(Debug, Parser)]
#[command(name = "transpace", version, about = "Train, evaluate and edit with transformation-space GANs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train (or resume) a progressive model.
    Train(TrainArgs),
    /// Fréchet distance between two feature-statistics files or image folders.
    EvalFd(EvalFdArgs),
    /// Extract a direction from an image pair.
    Extract(ExtractArgs),
    /// Apply a direction at several intensities.
    Apply(ApplyArgs),
    /// Combine directions with weights; optionally render the result.
    Compose(ComposeArgs),
    /// Apply a direction on selected layers only.
    Layerwise(LayerwiseArgs),
    /// Train the rerendering module against a trained generator.
    RerenderTrain(RerenderTrainArgs),
    /// Edit a real image through the rerendering module.
    Rerender(RerenderArgs),
    /// Write a synthetic factor dataset to a folder.
    SynthData(SynthDataArgs),
    /// Run the HTTP inference service.
    Serve(server::ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config; the toy profile when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from a training checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalFdArgs {
    #[arg(long, conflicts_with = "images_a")]
    pub stats_a: Option<PathBuf>,
    #[arg(long, conflicts_with = "images_b")]
    pub stats_b: Option<PathBuf>,
    #[arg(long)]
    pub images_a: Option<PathBuf>,
    #[arg(long)]
    pub images_b: Option<PathBuf>,
    /// Working resolution for image folders.
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    /// Where to write the statistics computed from `--images-a`/`--images-b`.
    #[arg(long)]
    pub save_stats: Option<PathBuf>,
    /// Accepted for uniformity; the embedder is fixed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub pair: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub direction: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub gammas: Vec<f64>,
    /// Restrict the direction to these layers (1-based).
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub directions: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub weights: Vec<f64>,
    /// Composed direction document.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Render the composition with this checkpoint into `--png`.
    #[arg(long, requires = "png")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    pub png: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LayerwiseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub direction: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub gamma: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerenderTrainArgs {
    /// Trained generator checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image folder; the checkpoint's training dataset when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// TOML rerender config; defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RerenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub rerenderer: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Direction to apply in code space; plain reconstruction when omitted.
    #[arg(long)]
    pub direction: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A generator/discriminator pair loaded from a training checkpoint.
pub struct Model {
    pub g: Generator,
    pub d: Discriminator,
    pub hash: String,
    pub stage: usize,
}

impl Model {
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        Self::from_checkpoint(&ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.manifest.kind != CheckpointKind::TrainState {
            bail!(transpace::Error::invalid("expected a training checkpoint"));
        }
        let (g, d) = load_networks(ckpt, DType::F32)?;
        Ok(Self {
            stage: g.stage(),
            hash: ckpt.content_hash()?,
            g,
            d,
        })
    }

    pub fn read_direction(&self, path: &Path) -> Result<TransformationDirection> {
        let text = std::fs::read_to_string(path).map_err(|e| transpace::Error::io(path, e))?;
        Ok(load_direction(&text, self.stage)?)
    }
}

/// `error: <kind>: <message>` on one line.
pub fn error_line(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<transpace::Error>())
        .map(|t| t.kind())
        .unwrap_or("failed");
    let msg = format!("{e:#}").replace(['\n', '\r'], " ");
    format!("error: {kind}: {msg}")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| transpace::Error::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| transpace::Error::io(path, e).into())
}

fn read_direction_file(path: &Path) -> Result<TransformationDirection> {
    let text = std::fs::read_to_string(path).map_err(|e| transpace::Error::io(path, e))?;
    Ok(TransformationDirection::from_json(&text)?)
}

/// File name used for the image at `gamma`.
pub fn gamma_file_name(gamma: f64) -> String {
    format!("gamma_{gamma:+.4}.png")
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::EvalFd(a) => eval_fd(a),
        Command::Extract(a) => extract(a),
        Command::Apply(a) => apply(a),
        Command::Compose(a) => compose(a),
        Command::Layerwise(a) => layerwise(a),
        Command::RerenderTrain(a) => rerender_train(a),
        Command::Rerender(a) => rerender(a),
        Command::SynthData(a) => synth_data(a),
        Command::Serve(a) => server::serve(a),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    create_dir(&a.out_dir)?;
    let opts = RunOptions {
        out_dir: Some(a.out_dir.clone()),
        max_steps: a.max_steps,
    };
    let outcome = if let Some(path) = &a.resume {
        let state = TrainState::load(path)?;
        if a.seed.is_some_and(|s| s != state.config.seed) {
            bail!(transpace::Error::Config("--seed differs from the resumed run".into()));
        }
        let ds = state.config.dataset.open()?;
        continue_training(state, ds.as_ref(), &opts)?
    } else {
        let mut config = match &a.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::toy(),
        };
        if let Some(seed) = a.seed {
            config.seed = seed;
        }
        config.validate()?;
        write_text(&a.out_dir.join("config.toml"), &config.to_toml()?)?;
        let ds = config.dataset.open()?;
        run_training(&config, ds.as_ref(), &opts)?
    };
    let last = outcome.records.last();
    println!(
        "step {} resolution {} checkpoint {}",
        outcome.state.step,
        outcome.state.resolution(),
        outcome.checkpoint.as_deref().map(|p| p.display().to_string()).unwrap_or_default()
    );
    if let Some(r) = last {
        println!(
            "d_adv {:.4} g_adv {:.4} mi {:.4}",
            r.report.d_adv_loss, r.report.g_adv_loss, r.report.mi_loss
        );
    }
    Ok(())
}

fn folder_stats(dir: &Path, resolution: usize) -> Result<FeatureStats> {
    let ds = DatasetSpec::folder(dir, resolution).open()?;
    let images = (0..ds.len())
        .map(|i| ds.image(i, resolution))
        .collect::<transpace::Result<Vec<_>>>()?;
    Ok(image_stats(&ConvEmbedder::new()?, &images, 64)?)
}

fn eval_fd(a: EvalFdArgs) -> Result<()> {
    let side = |stats: &Option<PathBuf>, images: &Option<PathBuf>, name: &str| -> Result<FeatureStats> {
        match (stats, images) {
            (Some(p), None) => Ok(FeatureStats::load(p)?),
            (None, Some(dir)) => folder_stats(dir, a.resolution),
            _ => bail!(transpace::Error::invalid(format!(
                "give exactly one of --stats-{name} or --images-{name}"
            ))),
        }
    };
    let sa = side(&a.stats_a, &a.images_a, "a")?;
    let sb = side(&a.stats_b, &a.images_b, "b")?;
    if let Some(out) = &a.save_stats {
        let computed = if a.images_a.is_some() { &sa } else { &sb };
        computed.save(out)?;
    }
    println!("{:.6}", frechet_distance(&sa, &sb)?);
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let model = Model::load(&a.ckpt)?;
    let res = model.d.resolution();
    let xa = Image::load(&a.pair[0], res)?;
    let xb = Image::load(&a.pair[1], res)?;
    let mut r = extract_transformation(&model.d, &xa, &xb)?;
    r.source_a = a.pair[0].display().to_string();
    r.source_b = a.pair[1].display().to_string();
    r.checkpoint_hash = model.hash.clone();
    write_text(&a.out, &r.to_json()?)?;
    println!("norm {:.6}", r.direction.norm());
    Ok(())
}

fn apply(a: ApplyArgs) -> Result<()> {
    let model = Model::load(&a.ckpt)?;
    let mut dir = model.read_direction(&a.direction)?;
    if let Some(layers) = &a.layers {
        dir = dir.masked(layers)?;
    }
    let (z, t) = codes_for_seed(model.g.arch(), a.seed)?;
    let images = transform_sequence(&model.g, &z, &t, &dir, &a.gammas)?;
    create_dir(&a.out_dir)?;
    for (gamma, img) in a.gammas.iter().zip(&images) {
        let path = a.out_dir.join(gamma_file_name(*gamma));
        img.save_png(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn compose(a: ComposeArgs) -> Result<()> {
    let dirs = a
        .directions
        .iter()
        .map(|p| read_direction_file(p))
        .collect::<Result<Vec<_>>>()?;
    let composed = compose_directions(&dirs, &a.weights)?;
    if let Some(out) = &a.out {
        write_text(out, &composed.to_json()?)?;
    }
    if let (Some(ckpt), Some(png)) = (&a.ckpt, &a.png) {
        let model = Model::load(ckpt)?;
        for p in &a.directions {
            let text = std::fs::read_to_string(p).map_err(|e| transpace::Error::io(p, e))?;
            check_document_stage(&serde_json::from_str(&text)?, model.stage)?;
        }
        let (z, t) = codes_for_seed(model.g.arch(), a.seed)?;
        compose_and_apply(&model.g, &z, &t, &[composed.clone()], &[1.0], a.gamma)?.save_png(png)?;
    }
    println!("norm {:.6}", composed.norm());
    Ok(())
}

fn layerwise(a: LayerwiseArgs) -> Result<()> {
    let model = Model::load(&a.ckpt)?;
    let dir = model.read_direction(&a.direction)?;
    let (z, t) = codes_for_seed(model.g.arch(), a.seed)?;
    layerwise_manipulate(&model.g, &z, &t, &dir, &a.layers, a.gamma)?.save_png(&a.out)?;
    Ok(())
}

fn rerender_train(a: RerenderTrainArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let mut config = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| transpace::Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| transpace::Error::Config(e.to_string()))?
        }
        None => RerenderConfig::default(),
    };
    config.seed = a.seed;
    if let Some(steps) = a.steps {
        config.steps = steps;
    }
    let ds: Box<dyn ImageDataset> = match &a.data {
        Some(dir) => DatasetSpec::folder(dir, model.g.resolution()).open()?,
        None => {
            let meta: TrainMeta = serde_json::from_value(ckpt.manifest.extra.clone())
                .context("checkpoint carries no training dataset; pass --data")?;
            meta.config.dataset.open()?
        }
    };
    let indices = split(ds.as_ref(), 0.1)?.train;
    let out = train_rerenderer(&model.g, &model.d, ds.as_ref(), &indices, &config)?;
    out.rerenderer.to_checkpoint(&model.g, &model.hash)?.save(&a.out)?;
    let first = out.losses.first().copied().unwrap_or(0.0);
    let last = out.losses.last().copied().unwrap_or(0.0);
    println!("loss {first:.4} -> {last:.4}");
    Ok(())
}

fn rerender(a: RerenderArgs) -> Result<()> {
    let model = Model::load(&a.ckpt)?;
    let r = Rerenderer::from_checkpoint(&Checkpoint::load(&a.rerenderer)?)?;
    if r.resolution() != model.g.resolution() {
        bail!(transpace::Error::StageMismatch {
            expected: model.g.resolution(),
            actual: r.resolution(),
        });
    }
    let real = Image::load(&a.image, r.resolution())?;
    let dir = a.direction.as_deref().map(|p| model.read_direction(p)).transpose()?;
    let feats = edited_features(&model.g, &model.d, &real, dir.as_ref(), a.gamma, a.seed)?;
    r.rerender_image(&real, &feats)?.save_png(&a.out)?;
    Ok(())
}

fn synth_data(a: SynthDataArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        count: a.count,
        ..TrainConfig::toy().dataset.synthetic
    };
    let ds = SyntheticDataset::generate(&cfg, a.resolution, a.seed)?;
    ds.export(&a.out_dir)?;
    println!("{} images in {}", ds.len(), a.out_dir.display());
    Ok(())
}
