//! Rerendering of real images: an encoder/decoder whose per-level content
//! features are whitened and recoloured with statistics taken from the
//! generator's multi-scale features, followed by a guided smoothing pass.

use candle_core::{DType, Device, Tensor, D};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codes::{apply_direction, sample_latent, TransformationDirection};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::ConvEmbedder;
use crate::networks::{latents_tensor, Discriminator, Generator};
use crate::nn::{self, fnv1a, Conv, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::training::{Checkpoint, CheckpointKind, Manifest, FORMAT_VERSION};

/// Eigenvalue floor applied before inverse square roots.
pub const WCT_EPS: f64 = 1e-5;
const HE_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerenderConfig {
    /// Channels per encoder/decoder level, finest first.
    pub channels: Vec<usize>,
    /// Weight of the recoloured features against the raw content features.
    pub blend: f64,
    pub smooth_radius: usize,
    pub smooth_eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the embedder-feature L1 term.
    pub feature_weight: f64,
    pub seed: u64,
}

impl Default for RerenderConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32],
            blend: 0.5,
            smooth_radius: 4,
            smooth_eps: 1e-3,
            steps: 400,
            batch_size: 8,
            lr: 2e-3,
            feature_weight: 0.1,
            seed: 0,
        }
    }
}

impl RerenderConfig {
    pub fn validate(&self, resolution: usize) -> Result<()> {
        let levels = self.channels.len();
        if levels == 0 || self.channels.contains(&0) {
            return Err(Error::Config("rerender: channels must be nonempty and positive".into()));
        }
        if resolution >> (levels - 1) < 2 {
            return Err(Error::Config(format!(
                "rerender: {levels} levels need at least {} pixels",
                2 << (levels - 1)
            )));
        }
        if !(0.0..=1.0).contains(&self.blend) || self.smooth_eps <= 0.0 || self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("rerender: blend in [0, 1], positive eps, lr and batch".into()));
        }
        Ok(())
    }
}

/// Per-sample channel mean and covariance (population normalization) of a
/// `(B, C, H, W)` tensor.
pub fn channel_statistics(x: &Tensor) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let (b, c, h, w) = x.dims4()?;
    let n = h * w;
    if n < 2 {
        return Err(Error::invalid("channel statistics need at least 2 spatial positions"));
    }
    let flat = x.to_dtype(DType::F64)?.reshape((b, c, n))?.to_vec3::<f64>()?;
    Ok(flat
        .into_iter()
        .map(|rows| {
            let m = DMatrix::from_fn(c, n, |i, j| rows[i][j]);
            let mean = m.column_mean();
            let centered = &m - &mean * DVector::from_element(n, 1.0).transpose();
            let cov = &centered * centered.transpose() / n as f64;
            (mean, cov)
        })
        .collect())
}

fn eigen_map(cov: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let sym = (cov + cov.transpose()) * 0.5;
    let e = SymmetricEigen::try_new(sym, 1e-14, 10_000)
        .ok_or_else(|| Error::Numerical("covariance eigendecomposition did not converge".into()))?;
    let d = e.eigenvalues.map(f);
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.transpose())
}

/// Applies a per-sample `(C, C)` matrix and then adds `offset (B, C)`.
fn apply_per_sample(x: &Tensor, mats: &[DMatrix<f64>], offset: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let data: Vec<f64> = mats.iter().flat_map(|m| m.transpose().iter().copied().collect::<Vec<_>>()).collect();
    let m = Tensor::from_vec(data, (b, c, c), &Device::Cpu)?.to_dtype(x.dtype())?;
    let y = m.matmul(&x.reshape((b, c, h * w))?)?.reshape((b, c, h, w))?;
    Ok(y.broadcast_add(&offset.reshape((b, c, 1, 1))?)?)
}

fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Removes each sample's channel mean and decorrelates channels to unit
/// variance: `E Λ^-½ Eᵀ (x - μ)` with eigenvalues floored at [`WCT_EPS`].
/// The matrix is treated as a constant for differentiation.
pub fn whitening(x: &Tensor) -> Result<Tensor> {
    let stats = channel_statistics(x)?;
    let mats = stats
        .iter()
        .map(|(_, cov)| eigen_map(cov, |l| 1.0 / l.max(WCT_EPS).sqrt()))
        .collect::<Result<Vec<_>>>()?;
    let mean = spatial_mean(x)?;
    let centered = x.broadcast_sub(&mean.unsqueeze(2)?.unsqueeze(3)?)?;
    let zero = mean.zeros_like()?;
    apply_per_sample(&centered, &mats, &zero)
}

/// Gives whitened features the channel mean and covariance of `style`:
/// `E Λ^½ Eᵀ x + μ_style`.
pub fn coloring(white: &Tensor, style: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = white.dims4()?;
    let (bs, cs, _, _) = style.dims4()?;
    if (b, c) != (bs, cs) {
        return Err(Error::shape(format!(
            "coloring: content {:?} vs style {:?}",
            white.dims(),
            style.dims()
        )));
    }
    let stats = channel_statistics(style)?;
    let mats = stats
        .iter()
        .map(|(_, cov)| eigen_map(cov, |l| l.max(0.0).sqrt()))
        .collect::<Result<Vec<_>>>()?;
    apply_per_sample(white, &mats, &spatial_mean(style)?.to_dtype(white.dtype())?)
}

/// Averages all channels of `f` into one map and repeats it `channels` times.
pub fn averaged_style(f: &Tensor, channels: usize) -> Result<Tensor> {
    let (b, _, h, w) = f.dims4()?;
    Ok(f.mean_keepdim(1)?.broadcast_as((b, channels, h, w))?.contiguous()?)
}

/// Tent weights of a control grid with spacing `r`: `(index, weight)` per
/// control point along one axis.
fn tents(n: usize, r: usize) -> Vec<Vec<(usize, f64)>> {
    let m = (n - 1).div_ceil(r) + 1;
    (0..m)
        .map(|k| {
            let centre = (k * r) as f64;
            (0..n)
                .filter_map(|p| {
                    let w = 1.0 - (p as f64 - centre).abs() / r as f64;
                    (w > 0.0).then_some((p, w))
                })
                .collect()
        })
        .collect()
}

/// Edge-preserving smoothing guided by the grey level of `guide`.
///
/// Each channel of `x` (mapped to [0, 1]) is replaced by its least-squares
/// projection onto images of the form `Σ_k w_k(p) (b_k + a_k (g(p) - ḡ_k))`:
/// an affine function of the guide whose coefficients vary smoothly on a tent
/// grid of spacing `radius`. Slope directions whose energy falls below
/// `eps` times the tent energy are dropped, which flattens regions where the
/// guide is flat. Being an orthogonal projection, applying it twice gives
/// the same result, unless the first pass had to clamp values back into
/// the image range.
pub fn smooth(x: &Image, guide: &Image, radius: usize, eps: f64) -> Result<Image> {
    let n = x.size();
    if guide.size() != n {
        return Err(Error::shape(format!("smooth: image {n} vs guide {}", guide.size())));
    }
    if radius == 0 || eps <= 0.0 {
        return Err(Error::invalid("smooth: radius and eps must be positive"));
    }
    let npx = n * n;
    let g: Vec<f64> = (0..npx)
        .map(|i| (0..3).map(|c| (guide.data()[c * npx + i] as f64 + 1.0) * 0.5).sum::<f64>() / 3.0)
        .collect();
    let axis = tents(n, radius);
    let m = axis.len();
    // Sparse columns of the design matrix: (pixel, value) lists.
    let mut cols: Vec<Vec<(usize, f64)>> = Vec::with_capacity(2 * m * m);
    for ty in &axis {
        for tx in &axis {
            let w: Vec<(usize, f64)> = ty
                .iter()
                .flat_map(|&(y, wy)| tx.iter().map(move |&(x, wx)| (y * n + x, wy * wx)))
                .collect();
            let mass: f64 = w.iter().map(|(_, v)| v).sum();
            let mean_g = w.iter().map(|&(p, v)| v * g[p]).sum::<f64>() / mass;
            let slope = w.iter().map(|&(p, v)| (p, v * (g[p] - mean_g))).collect();
            cols.push(w);
            cols.push(slope);
        }
    }
    let k = cols.len();
    let mut dense = DMatrix::<f64>::zeros(npx, k);
    for (j, col) in cols.iter().enumerate() {
        for &(p, v) in col {
            dense[(p, j)] = v;
        }
    }
    let gram = dense.transpose() * &dense;
    let e = SymmetricEigen::try_new(gram, 1e-13, 10_000)
        .ok_or_else(|| Error::Numerical("smoothing eigendecomposition did not converge".into()))?;
    let tent_energy = cols.iter().step_by(2).map(|c| c.iter().map(|(_, v)| v * v).sum::<f64>()).sum::<f64>()
        / (k / 2) as f64;
    let keep: Vec<usize> = (0..k).filter(|&i| e.eigenvalues[i] > eps * tent_energy).collect();
    // Orthonormal basis of the retained subspace: A v_i / sqrt(λ_i).
    let mut basis = DMatrix::<f64>::zeros(npx, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        let col = &dense * e.eigenvectors.column(i) / e.eigenvalues[i].sqrt();
        basis.set_column(j, &col);
    }
    let mut out = Vec::with_capacity(3 * npx);
    for c in 0..3 {
        let p = DVector::from_iterator(npx, x.data()[c * npx..(c + 1) * npx].iter().map(|&v| (v as f64 + 1.0) * 0.5));
        let q = &basis * (basis.transpose() * p);
        out.extend(q.iter().map(|v| (v * 2.0 - 1.0).clamp(-1.0, 1.0) as f32));
    }
    Image::new(n, out)
}

/// Anisotropic total variation summed over channels.
pub fn total_variation(img: &Image) -> f64 {
    let n = img.size();
    let mut tv = 0.0;
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let v = img.get(c, y, x) as f64;
                if x + 1 < n {
                    tv += (img.get(c, y, x + 1) as f64 - v).abs();
                }
                if y + 1 < n {
                    tv += (img.get(c, y + 1, x) as f64 - v).abs();
                }
            }
        }
    }
    tv
}

/// One level of the transfer: encoder output, the broadcast style map, and
/// the whitened and recoloured content.
#[derive(Debug)]
pub struct WctLevel {
    pub content: Tensor,
    pub style: Tensor,
    pub white: Tensor,
    pub colored: Tensor,
}

/// Encoder, progressive-feature maps and decoder.
#[derive(Debug)]
pub struct Rerenderer {
    config: RerenderConfig,
    feature_channels: Vec<usize>,
    resolution: usize,
    params: ParamStore,
    enc: Vec<Conv>,
    prog: Vec<Conv>,
    dec: Vec<Conv>,
    out: Conv,
}

impl Rerenderer {
    /// `feature_channels` lists the channel counts of the generator features
    /// that will be passed in; `resolution` is the working image size.
    pub fn new(config: &RerenderConfig, feature_channels: &[usize], resolution: usize) -> Result<Self> {
        Self::build(config, feature_channels, resolution, ParamStore::new(DType::F32))
    }

    fn build(config: &RerenderConfig, feature_channels: &[usize], resolution: usize, mut p: ParamStore) -> Result<Self> {
        config.validate(resolution)?;
        if feature_channels.is_empty() {
            return Err(Error::invalid("rerender: no generator features"));
        }
        let seed = config.seed;
        let total: usize = feature_channels.iter().sum();
        let ch = &config.channels;
        let mut enc = Vec::new();
        let mut prog = Vec::new();
        let mut dec = Vec::new();
        for (i, &c) in ch.iter().enumerate() {
            let cin = if i == 0 { 3 } else { ch[i - 1] };
            enc.push(Conv::new(&mut p, seed, &format!("r.enc{i}"), cin, c, 3, HE_GAIN)?);
            prog.push(Conv::new(&mut p, seed, &format!("r.prog{i}"), total, c, 1, HE_GAIN)?);
            if i > 0 {
                dec.push(Conv::new(&mut p, seed, &format!("r.dec{i}"), c, ch[i - 1], 3, HE_GAIN)?);
            }
        }
        let out = Conv::new(&mut p, seed, "r.out", ch[0], 3, 3, 1.0)?;
        Ok(Self {
            config: config.clone(),
            feature_channels: feature_channels.to_vec(),
            resolution,
            params: p,
            enc,
            prog,
            dec,
            out,
        })
    }

    pub fn config(&self) -> &RerenderConfig {
        &self.config
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Upsamples every generator map bilinearly to the working resolution,
    /// concatenates them, and maps the stack to each level.
    pub fn upsampled_features(&self, gen_features: &[Tensor]) -> Result<Tensor> {
        if gen_features.len() != self.feature_channels.len() {
            return Err(Error::shape(format!(
                "rerender: {} generator maps, expected {}",
                gen_features.len(),
                self.feature_channels.len()
            )));
        }
        let mut prev = 0;
        let mut ups = Vec::new();
        for (f, &c) in gen_features.iter().zip(&self.feature_channels) {
            let (_, fc, h, w) = f.dims4()?;
            if fc != c || h != w || h <= prev || !h.is_power_of_two() || (prev > 0 && h != prev * 2) {
                return Err(Error::shape(format!("rerender: unexpected generator map {:?}", f.dims())));
            }
            prev = h;
            let f = f.detach().to_dtype(DType::F32)?;
            ups.push(if h == self.resolution {
                f
            } else {
                f.upsample_bilinear2d(self.resolution, self.resolution, false)?
            });
        }
        Ok(Tensor::cat(&ups, 1)?)
    }

    pub fn extract_progressive(&self, gen_features: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut x = self.upsampled_features(gen_features)?;
        let mut out = Vec::new();
        for (i, conv) in self.prog.iter().enumerate() {
            if i > 0 {
                x = nn::downsample2(&x)?;
            }
            out.push(nn::lrelu(&conv.forward(&self.params, &x)?)?);
        }
        Ok(out)
    }

    /// Encoder activations per level, finest first.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::new();
        for (i, conv) in self.enc.iter().enumerate() {
            if i > 0 {
                h = nn::downsample2(&h)?;
            }
            h = nn::lrelu(&conv.forward(&self.params, &h)?)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    fn check_real(&self, real: &Tensor) -> Result<()> {
        let (_, c, h, w) = real.dims4()?;
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::shape(format!(
                "rerender expects (B, 3, {0}, {0}); got {1:?}",
                self.resolution,
                real.dims()
            )));
        }
        Ok(())
    }

    /// The intermediate tensors of every level, for inspection.
    pub fn wct_levels(&self, real: &Tensor, gen_features: &[Tensor]) -> Result<Vec<WctLevel>> {
        self.check_real(real)?;
        let content = self.encode(&real.to_dtype(DType::F32)?)?;
        let styles = self.extract_progressive(gen_features)?;
        content
            .into_iter()
            .zip(styles)
            .zip(&self.config.channels)
            .map(|((content, f), &ch)| {
                let style = averaged_style(&f, ch)?;
                let white = whitening(&content)?;
                let colored = coloring(&white, &style)?;
                Ok(WctLevel {
                    content,
                    style,
                    white,
                    colored,
                })
            })
            .collect()
    }

    /// Decoded image before smoothing, `(B, 3, R, R)` in [-1, 1].
    pub fn forward(&self, real: &Tensor, gen_features: &[Tensor]) -> Result<Tensor> {
        let alpha = self.config.blend;
        let mixed = self
            .wct_levels(real, gen_features)?
            .iter()
            .map(|l| nn::blend(&l.colored, &l.content, alpha))
            .collect::<Result<Vec<_>>>()?;
        let mut h = mixed.last().expect("at least one level").clone();
        for i in (1..mixed.len()).rev() {
            h = nn::upsample2(&nn::lrelu(&self.dec[i - 1].forward(&self.params, &h)?)?)?;
            h = (h + &mixed[i - 1])?;
        }
        Ok(self.out.forward(&self.params, &h)?.tanh()?)
    }

    /// Full pipeline for one image: encode, whiten/colour, decode, smooth.
    pub fn rerender_image(&self, real: &Image, gen_features: &[Tensor]) -> Result<Image> {
        let decoded = self.forward(&real.to_tensor(DType::F32)?, gen_features)?;
        let img = Image::from_batch_tensor(&decoded)?.remove(0);
        smooth(&img, real, self.config.smooth_radius, self.config.smooth_eps)
    }

    pub fn to_checkpoint(&self, g: &Generator, generator_hash: &str) -> Result<Checkpoint> {
        let extra = serde_json::json!({
            "config": self.config,
            "feature_channels": self.feature_channels,
            "resolution": self.resolution,
            "generator_hash": generator_hash,
        });
        let config_hash = format!("{:016x}", fnv1a(serde_json::to_string(&self.config)?.as_bytes()));
        let mut ckpt = Checkpoint::new(Manifest {
            kind: CheckpointKind::Rerenderer,
            format_version: FORMAT_VERSION,
            arch: g.arch().clone(),
            stage: g.stage(),
            fade_alpha: g.fade_alpha(),
            step: self.config.steps as u64,
            config_hash,
            extra,
        });
        ckpt.add_params(&self.params)?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.manifest.kind != CheckpointKind::Rerenderer {
            return Err(Error::invalid("checkpoint does not hold a rerenderer"));
        }
        #[derive(Deserialize)]
        struct Extra {
            config: RerenderConfig,
            feature_channels: Vec<usize>,
            resolution: usize,
        }
        let extra: Extra = serde_json::from_value(ckpt.manifest.extra.clone())?;
        let params = ckpt.params_with_prefix("r.", DType::F32)?;
        let n = params.len();
        let r = Self::build(&extra.config, &extra.feature_channels, extra.resolution, params)?;
        if r.params.len() != n {
            return Err(Error::Corrupt("rerenderer parameter set is incomplete".into()));
        }
        Ok(r)
    }
}

/// Generator features for real images: `G(z, D_T(x))` with fresh `z`.
pub fn matched_features(g: &Generator, d: &Discriminator, reals: &[Image], rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let x = Image::batch_to_tensor(reals, DType::F32)?;
    let t = d.projection(&x.to_dtype(d.params().dtype())?)?.detach();
    let arch = g.arch();
    let zs = (0..reals.len())
        .map(|_| sample_latent(rng, arch.k, arch.z_dim))
        .collect::<Result<Vec<_>>>()?;
    let z = latents_tensor(&zs, g.params().dtype())?;
    let out = g.forward(&z, &t.to_dtype(g.params().dtype())?)?;
    Ok(out.features.into_iter().map(|f| f.detach()).collect())
}

/// Generator features for editing a real image: `G(z_seed, D_T(x) + γ d)`.
pub fn edited_features(
    g: &Generator,
    d: &Discriminator,
    real: &Image,
    direction: Option<&TransformationDirection>,
    gamma: f64,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let t = d.project(real)?;
    let t = match direction {
        Some(dir) => apply_direction(&t, dir, gamma)?,
        None => t,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = g.arch();
    let z = sample_latent(&mut rng, arch.k, arch.z_dim)?;
    g.intermediate_features(&z, &t)
}

pub struct RerenderTraining {
    pub rerenderer: Rerenderer,
    /// Loss per step.
    pub losses: Vec<f64>,
}

/// Trains from scratch on reconstruction: pixel L1 plus L1 between fixed
/// random-embedder features of output and input.
pub fn train_rerenderer(
    g: &Generator,
    d: &Discriminator,
    dataset: &dyn ImageDataset,
    indices: &[usize],
    config: &RerenderConfig,
) -> Result<RerenderTraining> {
    if indices.is_empty() {
        return Err(Error::invalid("rerender training needs images"));
    }
    let res = g.resolution();
    let channels: Vec<usize> = {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probe = vec![dataset.image(indices[0], res)?];
        matched_features(g, d, &probe, &mut rng)?.iter().map(|f| f.dim(1)).collect::<candle_core::Result<_>>()?
    };
    let r = Rerenderer::new(config, &channels, res)?;
    let embedder = ConvEmbedder::new()?;
    let mut adam = Adam::new(AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<Image> = (0..config.batch_size)
            .map(|_| dataset.image(indices[rand::Rng::gen_range(&mut rng, 0..indices.len())], res))
            .collect::<Result<_>>()?;
        let feats = matched_features(g, d, &batch, &mut rng)?;
        let x = Image::batch_to_tensor(&batch, DType::F32)?;
        let y = r.forward(&x, &feats)?;
        let mut loss = (&y - &x)?.abs()?.mean_all()?;
        if config.feature_weight > 0.0 {
            for (a, b) in embedder.feature_maps(&y)?.iter().zip(embedder.feature_maps(&x)?) {
                loss = (loss + ((a - b.detach())?.abs()?.mean_all()? * config.feature_weight)?)?;
            }
        }
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: step as u64,
                report: format!("rerender loss {value}"),
            });
        }
        losses.push(value);
        let grads = loss.backward()?;
        adam.step(&r.params, &grads, config.lr, |_| true)?;
        if step % 50 == 0 {
            log::info!("rerender step {step}: loss {value:.4}");
        }
    }
    Ok(RerenderTraining { rerenderer: r, losses })
}
