//! Parameter storage and the handful of layers the networks are built from.
//!
//! Weights are stored with unit-variance initialization and rescaled at
//! runtime by `gain / sqrt(fan_in)` (equalized learning rate).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const LRELU_SLOPE: f64 = 0.2;
pub const ADAIN_EPS: f64 = 1e-8;

/// 64-bit FNV-1a; used for stable name-derived seeds and filename hashing.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Named trainable tensors, ordered by name.
///
/// Not `Clone`: parameters are updated in place, so copies go through
/// [`ParamStore::deep_clone`].
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Inserts a tensor as a parameter, replacing any previous value.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?;
        self.vars.insert(name.into(), Var::from_tensor(&value)?);
        Ok(())
    }

    /// Standard-normal init seeded by `(seed, name)`. No-op if present.
    pub fn init_normal(&mut self, seed: u64, name: &str, shape: &[usize]) -> Result<()> {
        if self.contains(name) {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        if self.contains(name) {
            return Ok(());
        }
        let n: usize = shape.iter().product();
        let t = Tensor::from_vec(vec![value; n], shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn init_from(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        if self.contains(name) {
            return Ok(());
        }
        self.insert(name, Tensor::from_vec(data, shape, &self.device)?)
    }

    /// Overwrites an existing parameter's value in place (shape must match).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.get(name)?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!(
                "set {name}: {:?} vs {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Deep copy with freshly allocated storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self {
            vars,
            dtype: self.dtype,
            device: self.device.clone(),
        })
    }

    /// Copy converted to another precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype);
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().to_dtype(dtype)?)?;
        }
        Ok(out)
    }
}

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LRELU_SLOPE)?)?)
}

/// `k x k` convolution, stride 1, zero "same" padding, via im2col + matmul.
pub fn conv2d_same(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (co, ci, kh, kw) = w.dims4()?;
    if ci != c {
        return Err(Error::shape(format!("conv: input has {c} channels, kernel expects {ci}")));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::invalid("conv: kernel must be square with odd size"));
    }
    if kh == 1 {
        let y = w
            .reshape((co, c))?
            .broadcast_matmul(&x.reshape((b, c, h * wd))?)?;
        return Ok(y.reshape((b, co, h, wd))?);
    }
    let p = kh / 2;
    let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
    let mut cols = Vec::with_capacity(kh * kw);
    for dy in 0..kh {
        for dx in 0..kw {
            cols.push(xp.narrow(2, dy, h)?.narrow(3, dx, wd)?);
        }
    }
    let col = Tensor::stack(&cols, 2)?.reshape((b, c * kh * kw, h * wd))?;
    let y = w.reshape((co, c * kh * kw))?.broadcast_matmul(&col)?;
    Ok(y.reshape((b, co, h, wd))?)
}

/// Convolution with equalized learning rate and bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub gain: f64,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        gain: f64,
    ) -> Result<Self> {
        let weight = format!("{name}.w");
        let bias = format!("{name}.b");
        store.init_normal(seed, &weight, &[out_ch, in_ch, kernel, kernel])?;
        store.init_const(&bias, &[out_ch], 0.0)?;
        Ok(Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            gain,
        })
    }

    pub fn scale(&self) -> f64 {
        self.gain / ((self.in_ch * self.kernel * self.kernel) as f64).sqrt()
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = (store.get(&self.weight)?.as_tensor() * self.scale())?;
        let b = store.get(&self.bias)?.as_tensor().reshape((1, self.out_ch, 1, 1))?;
        Ok(conv2d_same(x, &w)?.broadcast_add(&b)?)
    }
}

/// Fully connected layer with equalized learning rate.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub gain: f64,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
    ) -> Result<Self> {
        let weight = format!("{name}.w");
        let bias = format!("{name}.b");
        store.init_normal(seed, &weight, &[out_dim, in_dim])?;
        store.init_const(&bias, &[out_dim], 0.0)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
            gain,
        })
    }

    pub fn scale(&self) -> f64 {
        self.gain / (self.in_dim as f64).sqrt()
    }

    /// `x: (B, in) -> (B, out)`.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = (store.get(&self.weight)?.as_tensor() * self.scale())?;
        let b = store.get(&self.bias)?.as_tensor();
        Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
    }
}

/// Adaptive instance normalization.
///
/// `features: (B, C, H, W)`, `scale`/`bias: (B, C)`. Each channel is normalized
/// over its spatial extent, then mapped to `scale * x_hat + bias`.
pub fn adain(features: &Tensor, scale: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = features.dims4()?;
    if scale.dims() != [b, c] || bias.dims() != [b, c] {
        return Err(Error::shape(format!(
            "adain: features have {c} channels (batch {b}), scale {:?}, bias {:?}",
            scale.dims(),
            bias.dims()
        )));
    }
    let mean = features.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = features.broadcast_sub(&mean)?;
    let var = centered
        .sqr()?
        .mean_keepdim(D::Minus1)?
        .mean_keepdim(D::Minus2)?;
    let normed = centered.broadcast_div(&(var + ADAIN_EPS)?.sqrt()?)?;
    let scale = scale.reshape((b, c, 1, 1))?;
    let bias = bias.reshape((b, c, 1, 1))?;
    Ok(normed.broadcast_mul(&scale)?.broadcast_add(&bias)?)
}

/// Nearest-neighbour 2x upsampling.
///
/// Built from a broadcast rather than `upsample_nearest2d`, whose backward
/// pass overwrites the gradient already accumulated on its input instead of
/// adding to it. That loses a path whenever the input has other consumers,
/// as in the generator's fade-in.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, h * 2, w * 2))?)
}

/// 2x2 average pooling.
pub fn downsample2(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(2)?)
}

/// Linear blend `alpha * a + (1 - alpha) * b`.
pub fn blend(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    Ok(((a * alpha)? + (b * (1.0 - alpha))?)?)
}
