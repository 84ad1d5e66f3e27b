//! Editing operations: extract a direction from an image pair, then walk a
//! synthesis along it, per layer or combined with other directions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codes::{
    apply_direction, compose_directions, direction_between, sample_latent, sample_transformation, DirectionDocument,
    LatentCode, Provenance, TransformationCode, TransformationDirection,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::networks::{ArchConfig, Discriminator, Generator};

/// Projections of an image pair and the direction between them.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionResult {
    pub t_a_proj: TransformationCode,
    pub t_b_proj: TransformationCode,
    pub direction: TransformationDirection,
    pub source_a: String,
    pub source_b: String,
    pub checkpoint_hash: String,
    pub stage: usize,
}

impl ExtractionResult {
    pub fn to_document(&self) -> DirectionDocument {
        let mut doc = self.direction.to_document();
        doc.provenance = Some(Provenance {
            source_a: self.source_a.clone(),
            source_b: self.source_b.clone(),
            checkpoint_hash: self.checkpoint_hash.clone(),
            stage: self.stage,
            t_a_proj: self.t_a_proj.layers().to_vec(),
            t_b_proj: self.t_b_proj.layers().to_vec(),
        });
        doc
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }
}

/// Parses a direction document and, when it records an extraction stage,
/// checks it against `stage`.
pub fn load_direction(text: &str, stage: usize) -> Result<TransformationDirection> {
    let doc: DirectionDocument = serde_json::from_str(text)?;
    check_document_stage(&doc, stage)?;
    TransformationDirection::from_document(&doc)
}

pub fn check_document_stage(doc: &DirectionDocument, stage: usize) -> Result<()> {
    match &doc.provenance {
        Some(p) if p.stage != stage => Err(Error::StageMismatch {
            expected: stage,
            actual: p.stage,
        }),
        _ => Ok(()),
    }
}

/// `t'_A = D_T(x_A)`, `t'_B = D_T(x_B)`, `d = t'_B - t'_A`.
pub fn extract_transformation(d: &Discriminator, x_a: &Image, x_b: &Image) -> Result<ExtractionResult> {
    for x in [x_a, x_b] {
        if x.size() != d.resolution() {
            return Err(Error::StageMismatch {
                expected: d.resolution(),
                actual: x.size(),
            });
        }
    }
    let mut codes = d.project_batch(&[x_a.clone(), x_b.clone()])?;
    let t_b_proj = codes.pop().expect("two projections");
    let t_a_proj = codes.pop().expect("two projections");
    let direction = direction_between(&t_a_proj, &t_b_proj)?;
    Ok(ExtractionResult {
        t_a_proj,
        t_b_proj,
        direction,
        source_a: String::new(),
        source_b: String::new(),
        checkpoint_hash: String::new(),
        stage: d.stage(),
    })
}

/// The `(z, t)` pair a seed stands for: a ChaCha8 stream seeded with `seed`,
/// drawing all of `z` and then all of `t`.
pub fn codes_for_seed(arch: &ArchConfig, seed: u64) -> Result<(LatentCode, TransformationCode)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_latent(&mut rng, arch.k, arch.z_dim)?;
    let t = sample_transformation(&mut rng, arch.k, arch.t_dim)?;
    Ok((z, t))
}

/// `G(z, t + γ d)` for each γ. The γ = 0 image is exactly `G(z, t)`.
pub fn transform_sequence(
    g: &Generator,
    z: &LatentCode,
    t: &TransformationCode,
    d: &TransformationDirection,
    gammas: &[f64],
) -> Result<Vec<Image>> {
    if gammas.is_empty() {
        return Err(Error::invalid("transform_sequence: no gamma values"));
    }
    gammas
        .iter()
        .map(|&gamma| g.generate(z, &apply_direction(t, d, gamma)?))
        .collect()
}

/// Applies `d` only on `layers` (1-based).
pub fn layerwise_manipulate(
    g: &Generator,
    z: &LatentCode,
    t: &TransformationCode,
    d: &TransformationDirection,
    layers: &[usize],
    gamma: f64,
) -> Result<Image> {
    let masked = d.masked(layers)?;
    g.generate(z, &apply_direction(t, &masked, gamma)?)
}

/// Composes `directions` with `weights`, then applies the result with `gamma`.
pub fn compose_and_apply(
    g: &Generator,
    z: &LatentCode,
    t: &TransformationCode,
    directions: &[TransformationDirection],
    weights: &[f64],
    gamma: f64,
) -> Result<Image> {
    let composed = compose_directions(directions, weights)?;
    g.generate(z, &apply_direction(t, &composed, gamma)?)
}
