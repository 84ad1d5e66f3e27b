//! Fréchet distance over embedded image features and pixel oracles for the
//! synthetic factors.

mod embedder;
pub mod oracles;
mod stats;

pub use embedder::{load_feature_file, ConvEmbedder, Embedder, EMBEDDER_RESOLUTION, EMBEDDER_SEED};
pub use oracles::{factor_response, Oracle};
pub use stats::{frechet_distance, sqrtm_psd, FeatureStats, StatsAccumulator, COV_REGULARIZATION};

use crate::error::Result;
use crate::image::Image;

/// Embeds `images` in chunks and accumulates their statistics.
pub fn image_stats(embedder: &dyn Embedder, images: &[Image], chunk: usize) -> Result<FeatureStats> {
    let mut acc = StatsAccumulator::new(embedder.dim());
    for part in images.chunks(chunk.max(1)) {
        for f in embedder.embed(part)? {
            acc.push(&f)?;
        }
    }
    acc.finish()
}
