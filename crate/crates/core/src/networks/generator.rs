use candle_core::{DType, Tensor};

use super::{latents_tensor, codes_tensor, ArchConfig, AffineInit};
use crate::codes::{LatentCode, TransformationCode};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Conv, Linear, ParamStore};

const HE_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<Conv>,
    affine: Option<Linear>,
    channels: usize,
    to_rgb: Conv,
}

/// Style-modulated generator `G(z, t)` starting from a learned constant map.
///
/// Block `k` (1-based) runs at `4 * 2^(k-1)` pixels; the first `K` blocks end
/// in AdaIN whose scale/bias come from an affine map of `t_k ⊕ z_k`.
#[derive(Debug)]
pub struct Generator {
    arch: ArchConfig,
    params: ParamStore,
    blocks: Vec<Block>,
    fade_alpha: f64,
}

/// Output image plus the post-AdaIN activations of each active injected layer.
pub struct GenOutput {
    pub image: Tensor,
    pub features: Vec<Tensor>,
}

impl Generator {
    pub fn new(arch: &ArchConfig, dtype: DType, stage: usize) -> Result<Self> {
        arch.validate()?;
        arch.check_stage(stage)?;
        let mut g = Self {
            arch: arch.clone(),
            params: ParamStore::new(dtype),
            blocks: Vec::new(),
            fade_alpha: 1.0,
        };
        let c0 = arch.channels[0];
        g.params.init_normal(arch.init_seed, "g.const", &[1, c0, 4, 4])?;
        for s in 1..=stage {
            g.add_block(s)?;
        }
        Ok(g)
    }

    /// Rebuilds layer bookkeeping around an existing parameter set.
    pub fn from_params(arch: &ArchConfig, params: ParamStore, stage: usize, fade_alpha: f64) -> Result<Self> {
        arch.validate()?;
        arch.check_stage(stage)?;
        let mut g = Self {
            arch: arch.clone(),
            params,
            blocks: Vec::new(),
            fade_alpha,
        };
        g.params.get("g.const")?;
        let before = g.params.len();
        for s in 1..=stage {
            g.add_block(s)?;
        }
        if g.params.len() != before {
            return Err(Error::Corrupt("generator parameter set is incomplete".into()));
        }
        Ok(g)
    }

    fn add_block(&mut self, stage: usize) -> Result<()> {
        let arch = &self.arch;
        let seed = arch.init_seed;
        let c = arch.channels[stage - 1];
        let p = &mut self.params;
        let convs = if stage == 1 {
            vec![Conv::new(p, seed, "g.b1.conv0", c, c, 3, HE_GAIN)?]
        } else {
            let cin = arch.channels[stage - 2];
            vec![
                Conv::new(p, seed, &format!("g.b{stage}.conv0"), cin, c, 3, HE_GAIN)?,
                Conv::new(p, seed, &format!("g.b{stage}.conv1"), c, c, 3, HE_GAIN)?,
            ]
        };
        let affine = if stage <= arch.k {
            let name = format!("g.b{stage}.affine");
            let in_dim = arch.t_dim + arch.z_dim;
            let bias: Vec<f64> = (0..2 * c).map(|i| if i < c { 1.0 } else { 0.0 }).collect();
            p.init_from(&format!("{name}.b"), &[2 * c], bias)?;
            if arch.affine_init == AffineInit::Zero {
                p.init_const(&format!("{name}.w"), &[2 * c, in_dim], 0.0)?;
            }
            Some(Linear::new(p, seed, &name, in_dim, 2 * c, 1.0)?)
        } else {
            None
        };
        let to_rgb = Conv::new(p, seed, &format!("g.rgb{stage}"), c, 3, 1, 1.0)?;
        self.blocks.push(Block {
            convs,
            affine,
            channels: c,
            to_rgb,
        });
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

    /// Injected layers that exist at the current stage.
    pub fn active_layers(&self) -> usize {
        self.stage().min(self.arch.k)
    }

    /// Adds the next resolution block; existing parameters are untouched and
    /// the fade-in restarts at alpha = 0.
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

    /// Deep copy that shares no parameter storage with `self`.
    pub fn snapshot(&self) -> Result<Self> {
        Ok(Self {
            arch: self.arch.clone(),
            params: self.params.deep_clone()?,
            blocks: self.blocks.clone(),
            fade_alpha: self.fade_alpha,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            arch: self.arch.clone(),
            params: self.params.to_dtype(dtype)?,
            blocks: self.blocks.clone(),
            fade_alpha: self.fade_alpha,
        })
    }

    fn check_inputs(&self, z: &Tensor, t: &Tensor) -> Result<usize> {
        let (bz, dz) = z.dims2()?;
        let (bt, dt) = t.dims2()?;
        if dz != self.arch.latent_dim() || dt != self.arch.code_dim() || bz != bt {
            return Err(Error::shape(format!(
                "generator expects z (B, {}) and t (B, {}); got {:?} and {:?}",
                self.arch.latent_dim(),
                self.arch.code_dim(),
                z.dims(),
                t.dims()
            )));
        }
        Ok(bz)
    }

    /// Style `(scale, bias)` tensors, each `(B, C_k)`, for 1-based layer `k`.
    pub fn style_tensors(&self, k: usize, z: &Tensor, t: &Tensor) -> Result<(Tensor, Tensor)> {
        let block = k
            .checked_sub(1)
            .and_then(|i| self.blocks.get(i))
            .ok_or_else(|| Error::invalid(format!("layer {k} not present at stage {}", self.stage())))?;
        let affine = block
            .affine
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("layer {k} is not code-injected")))?;
        let (t_dim, z_dim) = (self.arch.t_dim, self.arch.z_dim);
        let t_k = t.narrow(1, (k - 1) * t_dim, t_dim)?;
        let z_k = z.narrow(1, (k - 1) * z_dim, z_dim)?;
        let code = Tensor::cat(&[&t_k, &z_k], 1)?.to_dtype(self.params.dtype())?;
        let style = affine.forward(&self.params, &code)?;
        let c = block.channels;
        Ok((style.narrow(1, 0, c)?, style.narrow(1, c, c)?))
    }

    /// Affine `A_k(t_k ⊕ z_k)` for a single code pair; returns `(scale, bias)`.
    pub fn style_affine(&self, k: usize, z_k: &[f32], t_k: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        if k == 0 || k > self.arch.k {
            return Err(Error::invalid(format!("layer {k} outside [1, {}]", self.arch.k)));
        }
        if z_k.len() != self.arch.z_dim || t_k.len() != self.arch.t_dim {
            return Err(Error::shape("style_affine: code dimension mismatch"));
        }
        let mut z = vec![0.0f32; self.arch.latent_dim()];
        let mut t = vec![0.0f32; self.arch.code_dim()];
        z[(k - 1) * self.arch.z_dim..k * self.arch.z_dim].copy_from_slice(z_k);
        t[(k - 1) * self.arch.t_dim..k * self.arch.t_dim].copy_from_slice(t_k);
        let dev = candle_core::Device::Cpu;
        let z = Tensor::from_vec(z, (1, self.arch.latent_dim()), &dev)?;
        let t = Tensor::from_vec(t, (1, self.arch.code_dim()), &dev)?;
        let (s, b) = self.style_tensors(k, &z, &t)?;
        let to_vec = |x: Tensor| -> Result<Vec<f32>> {
            Ok(x.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
        };
        Ok((to_vec(s)?, to_vec(b)?))
    }

    /// Batched forward pass. `z: (B, K*z_dim)`, `t: (B, K*t_dim)`.
    pub fn forward(&self, z: &Tensor, t: &Tensor) -> Result<GenOutput> {
        let b = self.check_inputs(z, t)?;
        let p = &self.params;
        let c0 = self.arch.channels[0];
        let mut x = p.get("g.const")?.as_tensor().broadcast_as((b, c0, 4, 4))?;
        let mut features = Vec::new();
        let mut prev_rgb_input = None;
        let last = self.blocks.len();
        for (i, block) in self.blocks.iter().enumerate() {
            let stage = i + 1;
            if stage > 1 {
                if stage == last {
                    prev_rgb_input = Some(x.clone());
                }
                x = nn::upsample2(&x)?;
            }
            for conv in &block.convs {
                x = nn::lrelu(&conv.forward(p, &x)?)?;
            }
            if block.affine.is_some() {
                let (scale, bias) = self.style_tensors(stage, z, t)?;
                x = nn::adain(&x, &scale, &bias)?;
                features.push(x.clone());
            }
        }
        let top = &self.blocks[last - 1];
        let mut rgb = top.to_rgb.forward(p, &x)?;
        if let Some(prev) = prev_rgb_input.filter(|_| self.fade_alpha < 1.0) {
            let low = self.blocks[last - 2].to_rgb.forward(p, &prev)?;
            rgb = nn::blend(&rgb, &nn::upsample2(&low)?, self.fade_alpha)?;
        }
        Ok(GenOutput {
            image: rgb.tanh()?,
            features,
        })
    }

    pub fn generate_batch(&self, zs: &[LatentCode], ts: &[TransformationCode]) -> Result<Vec<Image>> {
        if zs.len() != ts.len() {
            return Err(Error::invalid("generate: z and t batch sizes differ"));
        }
        let dtype = self.params.dtype();
        let out = self.forward(&latents_tensor(zs, dtype)?, &codes_tensor(ts, dtype)?)?;
        Image::from_batch_tensor(&out.image)
    }

    pub fn generate(&self, z: &LatentCode, t: &TransformationCode) -> Result<Image> {
        self.check_codes(z, t)?;
        Ok(self
            .generate_batch(std::slice::from_ref(z), std::slice::from_ref(t))?
            .remove(0))
    }

    /// Post-AdaIN activation of each active injected layer, `(1, C_k, r_k, r_k)`.
    pub fn intermediate_features(&self, z: &LatentCode, t: &TransformationCode) -> Result<Vec<Tensor>> {
        self.check_codes(z, t)?;
        let dtype = self.params.dtype();
        let out = self.forward(
            &latents_tensor(std::slice::from_ref(z), dtype)?,
            &codes_tensor(std::slice::from_ref(t), dtype)?,
        )?;
        Ok(out.features)
    }

    fn check_codes(&self, z: &LatentCode, t: &TransformationCode) -> Result<()> {
        if z.shape() != (self.arch.k, self.arch.z_dim) || t.shape() != (self.arch.k, self.arch.t_dim) {
            return Err(Error::shape(format!(
                "generator expects z {:?} and t {:?}; got {:?} and {:?}",
                (self.arch.k, self.arch.z_dim),
                (self.arch.k, self.arch.t_dim),
                z.shape(),
                t.shape()
            )));
        }
        Ok(())
    }
}
