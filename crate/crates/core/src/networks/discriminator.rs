use candle_core::{DType, Tensor, D};

use super::{tensor_to_codes, ArchConfig};
use crate::codes::TransformationCode;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Conv, Linear, ParamStore};

const HE_GAIN: f64 = std::f64::consts::SQRT_2;
const MBSTD_EPS: f64 = 1e-8;

/// Two convolutions and a fully connected layer mapping trunk activations at
/// one resolution to a `t_dim` code in (-1, 1).
#[derive(Clone, Debug)]
struct ProjectionHead {
    conv0: Conv,
    conv1: Conv,
    fc: Linear,
}

impl ProjectionHead {
    fn new(p: &mut ParamStore, seed: u64, layer: usize, channels: usize, t_dim: usize) -> Result<Self> {
        let name = format!("d.head{layer}");
        Ok(Self {
            conv0: Conv::new(p, seed, &format!("{name}.conv0"), channels, channels, 3, HE_GAIN)?,
            conv1: Conv::new(p, seed, &format!("{name}.conv1"), channels, channels, 3, HE_GAIN)?,
            fc: Linear::new(p, seed, &format!("{name}.fc"), channels * 16, t_dim, 1.0)?,
        })
    }

    fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let h = nn::lrelu(&self.conv0.forward(p, x)?)?;
        let mut h = nn::lrelu(&self.conv1.forward(p, &h)?)?;
        while h.dim(2)? > 4 {
            h = nn::downsample2(&h)?;
        }
        let h = h.flatten_from(1)?;
        Ok(self.fc.forward(p, &h)?.tanh()?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    from_rgb: Conv,
    /// Empty for the 4x4 block, which feeds the final layers instead.
    convs: Vec<Conv>,
    head: Option<ProjectionHead>,
}

#[derive(Clone, Debug)]
struct FinalLayers {
    conv: Conv,
    fc: Linear,
    adv: Linear,
}

/// Discriminator with an adversarial head `D_adv` and per-layer projection
/// heads `D_T` attached to the trunk at the resolution mirroring generator
/// layer `k`.
#[derive(Debug)]
pub struct Discriminator {
    arch: ArchConfig,
    params: ParamStore,
    blocks: Vec<Block>,
    last: FinalLayers,
    fade_alpha: f64,
}

pub struct DiscOutput {
    /// `(B,)` real/fake logits.
    pub logits: Tensor,
    /// `(B, K*t_dim)`; zeros for layers not present at the current stage.
    pub projection: Tensor,
}

impl Discriminator {
    pub fn new(arch: &ArchConfig, dtype: DType, stage: usize) -> Result<Self> {
        arch.validate()?;
        arch.check_stage(stage)?;
        let mut params = ParamStore::new(dtype);
        let last = Self::final_layers(arch, &mut params)?;
        let mut d = Self {
            arch: arch.clone(),
            params,
            blocks: Vec::new(),
            last,
            fade_alpha: 1.0,
        };
        for s in 1..=stage {
            d.add_block(s)?;
        }
        Ok(d)
    }

    pub fn from_params(arch: &ArchConfig, mut params: ParamStore, stage: usize, fade_alpha: f64) -> Result<Self> {
        arch.validate()?;
        arch.check_stage(stage)?;
        let before = params.len();
        let last = Self::final_layers(arch, &mut params)?;
        let mut d = Self {
            arch: arch.clone(),
            params,
            blocks: Vec::new(),
            last,
            fade_alpha,
        };
        for s in 1..=stage {
            d.add_block(s)?;
        }
        if d.params.len() != before {
            return Err(Error::Corrupt("discriminator parameter set is incomplete".into()));
        }
        Ok(d)
    }

    fn final_layers(arch: &ArchConfig, p: &mut ParamStore) -> Result<FinalLayers> {
        let c = arch.channels[0];
        let seed = arch.init_seed;
        Ok(FinalLayers {
            conv: Conv::new(p, seed, "d.final.conv", c + 1, c, 3, HE_GAIN)?,
            fc: Linear::new(p, seed, "d.final.fc", c * 16, c, HE_GAIN)?,
            adv: Linear::new(p, seed, "d.adv", c, 1, 1.0)?,
        })
    }

    fn add_block(&mut self, stage: usize) -> Result<()> {
        let arch = &self.arch;
        let seed = arch.init_seed;
        let c = arch.channels[stage - 1];
        let p = &mut self.params;
        let from_rgb = Conv::new(p, seed, &format!("d.rgb{stage}"), 3, c, 1, HE_GAIN)?;
        let convs = if stage == 1 {
            Vec::new()
        } else {
            let cout = arch.channels[stage - 2];
            vec![
                Conv::new(p, seed, &format!("d.b{stage}.conv0"), c, c, 3, HE_GAIN)?,
                Conv::new(p, seed, &format!("d.b{stage}.conv1"), c, cout, 3, HE_GAIN)?,
            ]
        };
        let head = if stage <= arch.k {
            Some(ProjectionHead::new(p, seed, stage, c, arch.t_dim)?)
        } else {
            None
        };
        self.blocks.push(Block { from_rgb, convs, head });
        Ok(())
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn stage(&self) -> usize {
        self.blocks.len()
    }

    pub fn resolution(&self) -> usize {
        ArchConfig::resolution(self.stage())
    }

    pub fn fade_alpha(&self) -> f64 {
        self.fade_alpha
    }

    pub fn set_fade_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("fade_alpha {alpha} outside [0, 1]")));
        }
        self.fade_alpha = alpha;
        Ok(())
    }

    pub fn active_layers(&self) -> usize {
        self.stage().min(self.arch.k)
    }

    pub fn grow(&mut self, new_stage: usize) -> Result<()> {
        if new_stage != self.stage() + 1 {
            return Err(Error::invalid(format!(
                "grow: can only go from stage {} to {}, not {new_stage}",
                self.stage(),
                self.stage() + 1
            )));
        }
        self.arch.check_stage(new_stage)?;
        self.add_block(new_stage)?;
        self.fade_alpha = 0.0;
        Ok(())
    }

    pub fn snapshot(&self) -> Result<Self> {
        Ok(Self {
            arch: self.arch.clone(),
            params: self.params.deep_clone()?,
            blocks: self.blocks.clone(),
            last: self.last.clone(),
            fade_alpha: self.fade_alpha,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            arch: self.arch.clone(),
            params: self.params.to_dtype(dtype)?,
            blocks: self.blocks.clone(),
            last: self.last.clone(),
            fade_alpha: self.fade_alpha,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (b, c, h, w) = x.dims4()?;
        let r = self.resolution();
        if c != 3 || h != r || w != r {
            return Err(Error::shape(format!(
                "discriminator at stage {} expects (B, 3, {r}, {r}); got {:?}",
                self.stage(),
                x.dims()
            )));
        }
        Ok(b)
    }

    /// Trunk activations entering each block, indexed by stage (0-based), plus
    /// the 4x4 activation that feeds the final layers.
    fn trunk(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let p = &self.params;
        let top = self.stage();
        let mut inputs: Vec<Option<Tensor>> = vec![None; top];
        let mut h = nn::lrelu(&self.blocks[top - 1].from_rgb.forward(p, x)?)?;
        for stage in (2..=top).rev() {
            inputs[stage - 1] = Some(h.clone());
            for conv in &self.blocks[stage - 1].convs {
                h = nn::lrelu(&conv.forward(p, &h)?)?;
            }
            h = nn::downsample2(&h)?;
            if stage == top && self.fade_alpha < 1.0 {
                let low = nn::lrelu(&self.blocks[stage - 2].from_rgb.forward(p, &nn::downsample2(x)?)?)?;
                h = nn::blend(&h, &low, self.fade_alpha)?;
            }
        }
        inputs[0] = Some(h);
        Ok(inputs.into_iter().map(|t| t.expect("every stage visited")).collect())
    }

    fn minibatch_stddev(h: &Tensor) -> Result<Tensor> {
        let (b, _, hh, ww) = h.dims4()?;
        let centered = h.broadcast_sub(&h.mean_keepdim(0)?)?;
        let std = (centered.sqr()?.mean_keepdim(0)? + MBSTD_EPS)?.sqrt()?;
        let s = std.mean_all()?;
        let plane = s.broadcast_as((b, 1, hh, ww))?.contiguous()?;
        Ok(Tensor::cat(&[h, &plane], 1)?)
    }

    fn adv_from_trunk(&self, h4: &Tensor) -> Result<Tensor> {
        let p = &self.params;
        let h = Self::minibatch_stddev(h4)?;
        let h = nn::lrelu(&self.last.conv.forward(p, &h)?)?;
        let h = nn::lrelu(&self.last.fc.forward(p, &h.flatten_from(1)?)?)?;
        Ok(self.last.adv.forward(p, &h)?.squeeze(D::Minus1)?)
    }

    fn project_from_trunk(&self, inputs: &[Tensor], batch: usize) -> Result<Tensor> {
        let p = &self.params;
        let mut parts = Vec::with_capacity(self.arch.k);
        for layer in 1..=self.arch.k {
            let part = match self.blocks.get(layer - 1).and_then(|b| b.head.as_ref()) {
                Some(head) => head.forward(p, &inputs[layer - 1])?,
                None => Tensor::zeros((batch, self.arch.t_dim), self.params.dtype(), p.device())?,
            };
            parts.push(part);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<DiscOutput> {
        let b = self.check_input(x)?;
        let x = x.to_dtype(self.params.dtype())?;
        let inputs = self.trunk(&x)?;
        Ok(DiscOutput {
            logits: self.adv_from_trunk(&inputs[0])?,
            projection: self.project_from_trunk(&inputs, b)?,
        })
    }

    /// Adversarial logits only, `(B,)`.
    pub fn adv_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let inputs = self.trunk(&x.to_dtype(self.params.dtype())?)?;
        self.adv_from_trunk(&inputs[0])
    }

    /// Projections only, `(B, K*t_dim)`.
    pub fn projection(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.check_input(x)?;
        let inputs = self.trunk(&x.to_dtype(self.params.dtype())?)?;
        self.project_from_trunk(&inputs, b)
    }

    /// Logits for a batch of images, in input order.
    pub fn adv_score(&self, images: &[Image]) -> Result<Vec<f64>> {
        let x = Image::batch_to_tensor(images, self.params.dtype())?;
        Ok(self.adv_logits(&x)?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// `D_T(x)`: projects an image onto the transformation space.
    pub fn project(&self, image: &Image) -> Result<TransformationCode> {
        Ok(self.project_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn project_batch(&self, images: &[Image]) -> Result<Vec<TransformationCode>> {
        let x = Image::batch_to_tensor(images, self.params.dtype())?;
        tensor_to_codes(&self.projection(&x)?, self.arch.k, self.arch.t_dim)
    }
}
