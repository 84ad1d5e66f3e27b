//! Image embedders for Fréchet distance.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Conv, ParamStore};

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f64>>>;
}

/// Weights are drawn from this seed, so every build carries the same network.
pub const EMBEDDER_SEED: u64 = 0x5EED_0F_E4BED;
pub const EMBEDDER_RESOLUTION: usize = 32;
const WIDTHS: [usize; 3] = [16, 32, 64];

/// A small random convolutional net: three conv/leaky-ReLU layers with 2x
/// average pooling between them. Features are the spatial means of each
/// layer's activations concatenated (112 values).
#[derive(Debug)]
pub struct ConvEmbedder {
    params: ParamStore,
    convs: Vec<Conv>,
}

impl ConvEmbedder {
    pub fn new() -> Result<Self> {
        Self::with_dtype(DType::F32)
    }

    pub fn with_dtype(dtype: DType) -> Result<Self> {
        let mut params = ParamStore::new(dtype);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &w) in WIDTHS.iter().enumerate() {
            convs.push(Conv::new(&mut params, EMBEDDER_SEED, &format!("embed.conv{i}"), cin, w, 3, std::f64::consts::SQRT_2)?);
            cin = w;
        }
        Ok(Self { params, convs })
    }

    /// Per-layer activations for a `(B, 3, H, W)` batch; differentiable in `x`.
    pub fn feature_maps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.to_dtype(self.params.dtype())?;
        let mut maps = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 && h.dim(2)? > 1 {
                h = nn::downsample2(&h)?;
            }
            h = nn::lrelu(&conv.forward(&self.params, &h)?)?;
            maps.push(h.clone());
        }
        Ok(maps)
    }

    fn prepare(image: &Image) -> Result<Image> {
        let mut img = image.clone();
        while img.size() < EMBEDDER_RESOLUTION {
            img = img.upsample2()?;
        }
        img.downsample_to(EMBEDDER_RESOLUTION)
    }
}

impl Embedder for ConvEmbedder {
    fn dim(&self) -> usize {
        WIDTHS.iter().sum()
    }

    fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let prepared = images.iter().map(Self::prepare).collect::<Result<Vec<_>>>()?;
        let x = Image::batch_to_tensor(&prepared, self.params.dtype())?;
        let pooled = self
            .feature_maps(&x)?
            .iter()
            .map(|m| m.mean((2, 3)))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let feats = Tensor::cat(&pooled, 1)?.to_dtype(DType::F64)?;
        Ok(feats.to_vec2::<f64>()?)
    }
}

/// Reads precomputed features (for example from an Inception network): one
/// vector per line, values separated by commas or whitespace; blank lines and
/// lines starting with `#` are ignored.
pub fn load_feature_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Corrupt(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(Error::shape(format!(
                    "{}:{}: {} values, expected {first}",
                    path.display(),
                    n + 1,
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}
