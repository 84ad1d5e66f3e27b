//! Multi-scale transformation and latent codes, and the direction arithmetic
//! used by every editing operation.
//!
//! Codes are stored per layer. Values are `f32` (what the networks consume);
//! direction deltas are `f64` so that the difference of two `f32` codes is
//! exact and `t + 1.0 * (t' - t)` lands on `t'` bit for bit.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version tag written into direction documents.
pub const DIRECTION_FORMAT_VERSION: u32 = 1;

fn check_dims(what: &str, layers: usize, dim: usize) -> Result<()> {
    if layers == 0 {
        return Err(Error::invalid(format!("{what}: layer count must be >= 1")));
    }
    if dim == 0 {
        return Err(Error::invalid(format!("{what}: per-layer dimension must be >= 1")));
    }
    Ok(())
}

fn check_rectangular<T>(what: &str, layers: &[Vec<T>]) -> Result<usize> {
    let dim = layers.first().map(Vec::len).unwrap_or(0);
    check_dims(what, layers.len(), dim)?;
    if layers.iter().any(|l| l.len() != dim) {
        return Err(Error::shape(format!("{what}: ragged layers")));
    }
    Ok(dim)
}

/// Per-layer transformation code `t = [t_1 .. t_K]` (also used for projections `t'`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformationCode {
    layers: Vec<Vec<f32>>,
}

/// Per-layer latent code `z = [z_1 .. z_K]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    layers: Vec<Vec<f32>>,
}

macro_rules! layered_code {
    ($ty:ident, $what:literal) => {
        impl $ty {
            pub fn new(layers: Vec<Vec<f32>>) -> Result<Self> {
                check_rectangular($what, &layers)?;
                Ok(Self { layers })
            }

            pub fn zeros(k: usize, dim: usize) -> Result<Self> {
                check_dims($what, k, dim)?;
                Ok(Self {
                    layers: vec![vec![0.0; dim]; k],
                })
            }

            pub fn from_flat(k: usize, dim: usize, flat: &[f32]) -> Result<Self> {
                check_dims($what, k, dim)?;
                if flat.len() != k * dim {
                    return Err(Error::shape(format!(
                        "{}: flat length {} != {} x {}",
                        $what,
                        flat.len(),
                        k,
                        dim
                    )));
                }
                Ok(Self {
                    layers: flat.chunks(dim).map(<[f32]>::to_vec).collect(),
                })
            }

            /// Number of layers `K`.
            pub fn num_layers(&self) -> usize {
                self.layers.len()
            }

            pub fn layer_dim(&self) -> usize {
                self.layers[0].len()
            }

            pub fn flat_dim(&self) -> usize {
                self.num_layers() * self.layer_dim()
            }

            pub fn layers(&self) -> &[Vec<f32>] {
                &self.layers
            }

            /// Layer `k`, 1-based.
            pub fn layer(&self, k: usize) -> Option<&[f32]> {
                k.checked_sub(1)
                    .and_then(|i| self.layers.get(i))
                    .map(Vec::as_slice)
            }

            pub fn flatten(&self) -> Vec<f32> {
                self.layers.iter().flatten().copied().collect()
            }

            pub fn shape(&self) -> (usize, usize) {
                (self.num_layers(), self.layer_dim())
            }
        }
    };
}

layered_code!(TransformationCode, "transformation code");
layered_code!(LatentCode, "latent code");

/// Difference vector in transformation space, restricted to a set of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformationDirection {
    delta: Vec<Vec<f64>>,
    layer_mask: BTreeSet<usize>,
}

impl TransformationDirection {
    /// Full-mask direction from raw per-layer deltas.
    pub fn new(delta: Vec<Vec<f64>>) -> Result<Self> {
        check_rectangular("direction", &delta)?;
        let layer_mask = (1..=delta.len()).collect();
        Ok(Self { delta, layer_mask })
    }

    pub fn zeros(k: usize, t_dim: usize) -> Result<Self> {
        check_dims("direction", k, t_dim)?;
        Self::new(vec![vec![0.0; t_dim]; k])
    }

    pub fn with_mask(delta: Vec<Vec<f64>>, layers: &[usize]) -> Result<Self> {
        Self::new(delta)?.masked(layers)
    }

    /// Same delta restricted to `layers` (1-based indices, no duplicates).
    pub fn masked(&self, layers: &[usize]) -> Result<Self> {
        let k = self.num_layers();
        let mut mask = BTreeSet::new();
        for &l in layers {
            if l == 0 || l > k {
                return Err(Error::invalid(format!("layer index {l} outside [1, {k}]")));
            }
            if !mask.insert(l) {
                return Err(Error::invalid(format!("duplicate layer index {l}")));
            }
        }
        Ok(Self {
            delta: self.delta.clone(),
            layer_mask: mask,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.delta.len()
    }

    pub fn layer_dim(&self) -> usize {
        self.delta[0].len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_layers(), self.layer_dim())
    }

    pub fn delta(&self) -> &[Vec<f64>] {
        &self.delta
    }

    pub fn layer_mask(&self) -> &BTreeSet<usize> {
        &self.layer_mask
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.layer_mask.contains(&k)
    }

    /// Delta with unmasked layers zeroed, flattened.
    pub fn effective_flat(&self) -> Vec<f64> {
        self.delta
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let on = self.is_active(i + 1);
                l.iter().map(move |&v| if on { v } else { 0.0 })
            })
            .collect()
    }

    /// Euclidean norm of the effective (masked) delta.
    pub fn norm(&self) -> f64 {
        self.effective_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.effective_flat().iter().all(|&v| v == 0.0)
    }

    /// Cosine similarity of the effective deltas; 0 when either is zero.
    pub fn cosine(&self, other: &Self) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape("cosine: direction shapes differ"));
        }
        let a = self.effective_flat();
        let b = other.effective_flat();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let (na, nb) = (self.norm(), other.norm());
        if na == 0.0 || nb == 0.0 {
            return Ok(0.0);
        }
        Ok(dot / (na * nb))
    }

    pub fn negated(&self) -> Self {
        Self {
            delta: self
                .delta
                .iter()
                .map(|l| l.iter().map(|v| -v).collect())
                .collect(),
            layer_mask: self.layer_mask.clone(),
        }
    }

    pub fn to_document(&self) -> DirectionDocument {
        DirectionDocument {
            format_version: DIRECTION_FORMAT_VERSION,
            k: self.num_layers(),
            t_dim: self.layer_dim(),
            layer_mask: self.layer_mask.iter().copied().collect(),
            delta: self.delta.clone(),
            provenance: None,
        }
    }

    pub fn from_document(doc: &DirectionDocument) -> Result<Self> {
        if doc.format_version != DIRECTION_FORMAT_VERSION {
            return Err(Error::Version {
                found: doc.format_version,
                expected: DIRECTION_FORMAT_VERSION,
            });
        }
        let d = Self::with_mask(doc.delta.clone(), &doc.layer_mask)?;
        if d.shape() != (doc.k, doc.t_dim) {
            return Err(Error::shape(format!(
                "direction document declares {}x{} but holds {}x{}",
                doc.k,
                doc.t_dim,
                d.num_layers(),
                d.layer_dim()
            )));
        }
        Ok(d)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }
}

/// Serialized form of a [`TransformationDirection`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionDocument {
    pub format_version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    pub t_dim: usize,
    pub layer_mask: Vec<usize>,
    pub delta: Vec<Vec<f64>>,
    /// Present when the direction was extracted from an image pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Where an extracted direction came from. Directions are only meaningful
/// for models at the stage they were extracted at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub source_a: String,
    pub source_b: String,
    pub checkpoint_hash: String,
    pub stage: usize,
    pub t_a_proj: Vec<Vec<f32>>,
    pub t_b_proj: Vec<Vec<f32>>,
}

/// Draws `z` with i.i.d. standard normal components.
pub fn sample_latent<R: Rng + ?Sized>(rng: &mut R, k: usize, z_dim: usize) -> Result<LatentCode> {
    check_dims("latent code", k, z_dim)?;
    let layers = (0..k)
        .map(|_| (0..z_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    Ok(LatentCode { layers })
}

/// Draws `t` with i.i.d. components uniform on the open interval (-1, 1).
pub fn sample_transformation<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    t_dim: usize,
) -> Result<TransformationCode> {
    check_dims("transformation code", k, t_dim)?;
    let layers = (0..k)
        .map(|_| (0..t_dim).map(|_| open_unit_interval(rng)).collect())
        .collect();
    Ok(TransformationCode { layers })
}

fn open_unit_interval<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    loop {
        let v: f32 = rng.gen_range(-1.0f32..1.0);
        if v > -1.0 {
            return v;
        }
    }
}

/// `d_AB = t_b - t_a`, full mask.
pub fn direction_between(
    t_a: &TransformationCode,
    t_b: &TransformationCode,
) -> Result<TransformationDirection> {
    if t_a.shape() != t_b.shape() {
        return Err(Error::shape(format!(
            "direction_between: {:?} vs {:?}",
            t_a.shape(),
            t_b.shape()
        )));
    }
    let delta = t_a
        .layers
        .iter()
        .zip(&t_b.layers)
        .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| y as f64 - x as f64).collect())
        .collect();
    TransformationDirection::new(delta)
}

/// `t + gamma * d` on the direction's masked layers; other layers are copied.
pub fn apply_direction(
    t: &TransformationCode,
    d: &TransformationDirection,
    gamma: f64,
) -> Result<TransformationCode> {
    if t.shape() != d.shape() {
        return Err(Error::shape(format!(
            "apply_direction: code {:?} vs direction {:?}",
            t.shape(),
            d.shape()
        )));
    }
    if gamma == 0.0 {
        return Ok(t.clone());
    }
    let layers = t
        .layers
        .iter()
        .zip(&d.delta)
        .enumerate()
        .map(|(i, (tl, dl))| {
            if d.is_active(i + 1) {
                tl.iter()
                    .zip(dl)
                    .map(|(&x, &dx)| (x as f64 + gamma * dx) as f32)
                    .collect()
            } else {
                tl.clone()
            }
        })
        .collect();
    Ok(TransformationCode { layers })
}

/// Weighted sum of directions. On each layer only the directions whose mask
/// covers that layer contribute; the resulting mask is the union.
pub fn compose_directions(
    ds: &[TransformationDirection],
    weights: &[f64],
) -> Result<TransformationDirection> {
    if ds.is_empty() {
        return Err(Error::invalid("compose_directions: empty direction list"));
    }
    if ds.len() != weights.len() {
        return Err(Error::invalid(format!(
            "compose_directions: {} directions but {} weights",
            ds.len(),
            weights.len()
        )));
    }
    let shape = ds[0].shape();
    if ds.iter().any(|d| d.shape() != shape) {
        return Err(Error::shape("compose_directions: direction shapes differ"));
    }
    let mask: BTreeSet<usize> = ds.iter().flat_map(|d| d.layer_mask.iter().copied()).collect();
    let delta = (0..shape.0)
        .map(|i| {
            let layer = i + 1;
            let contributing: Vec<usize> = if mask.contains(&layer) {
                (0..ds.len()).filter(|&j| ds[j].is_active(layer)).collect()
            } else {
                (0..ds.len()).collect()
            };
            (0..shape.1)
                .map(|c| {
                    let mut terms = contributing.iter().map(|&j| weights[j] * ds[j].delta[i][c]);
                    let first = terms.next().unwrap_or(0.0);
                    terms.fold(first, |acc, v| acc + v)
                })
                .collect()
        })
        .collect();
    Ok(TransformationDirection {
        delta,
        layer_mask: mask,
    })
}

/// Arithmetic mean of several directions (full mask of the union).
pub fn mean_direction(ds: &[TransformationDirection]) -> Result<TransformationDirection> {
    let w = vec![1.0 / ds.len().max(1) as f64; ds.len()];
    compose_directions(ds, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn latent_sampling_shape_and_determinism() {
        let z = sample_latent(&mut rng(7), 5, 32).unwrap();
        assert_eq!(z.flat_dim(), 160);
        let a = sample_latent(&mut rng(7), 1, 1).unwrap();
        let b = sample_latent(&mut rng(7), 1, 1).unwrap();
        assert_eq!(a.flatten()[0].to_bits(), b.flatten()[0].to_bits());
    }

    #[test]
    fn latent_moments() {
        let mut r = rng(3);
        let n = 100_000;
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        let mut count = 0usize;
        for _ in 0..n {
            let z = sample_latent(&mut r, 2, 64).unwrap();
            // one scalar per draw keeps the estimator's variance at 1/n
            let v = z.layers()[0][0] as f64;
            sum += v;
            sq += v * v;
            count += 1;
        }
        let mean = sum / count as f64;
        let var = sq / count as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn transformation_sampling_bounds_and_mean() {
        let t = sample_transformation(&mut rng(1), 5, 4).unwrap();
        assert_eq!(t.flat_dim(), 20);
        assert!(t.flatten().iter().all(|v| *v > -1.0 && *v < 1.0));
        let one = sample_transformation(&mut rng(1), 1, 1).unwrap();
        assert!(one.flatten()[0].abs() < 1.0);

        let mut r = rng(9);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_transformation(&mut r, 2, 4).unwrap().layers()[1][3] as f64)
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn non_positive_dims_rejected() {
        assert!(matches!(sample_latent(&mut rng(0), 0, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(sample_latent(&mut rng(0), 3, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            sample_transformation(&mut rng(0), 0, 4),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn direction_examples() {
        let t = sample_transformation(&mut rng(2), 3, 4).unwrap();
        assert!(direction_between(&t, &t).unwrap().is_zero());

        let zeros = TransformationCode::zeros(2, 4).unwrap();
        let ones = TransformationCode::new(vec![vec![1.0; 4]; 2]).unwrap();
        let d = direction_between(&zeros, &ones).unwrap();
        assert!(d.delta().iter().flatten().all(|&v| v == 1.0));
        assert_eq!(d.layer_mask().len(), 2);

        let other = TransformationCode::zeros(2, 4).unwrap();
        assert!(matches!(direction_between(&t, &other), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn mask_semantics() {
        let t = TransformationCode::zeros(3, 4).unwrap();
        let d = TransformationDirection::with_mask(vec![vec![1.0; 4]; 3], &[1]).unwrap();
        let out = apply_direction(&t, &d, 0.5).unwrap();
        assert_eq!(out.layers()[0], vec![0.5; 4]);
        assert_eq!(out.layers()[1], vec![0.0; 4]);
        assert_eq!(out.layers()[2], vec![0.0; 4]);
    }

    #[test]
    fn invalid_masks() {
        let d = TransformationDirection::zeros(3, 2).unwrap();
        assert!(d.masked(&[0]).is_err());
        assert!(d.masked(&[4]).is_err());
        assert!(d.masked(&[2, 2]).is_err());
        assert!(d.masked(&[]).unwrap().layer_mask().is_empty());
    }

    #[test]
    fn compose_examples() {
        let a = sample_transformation(&mut rng(4), 3, 4).unwrap();
        let b = sample_transformation(&mut rng(5), 3, 4).unwrap();
        let d = direction_between(&a, &b).unwrap();
        assert_eq!(compose_directions(&[d.clone()], &[1.0]).unwrap(), d);
        assert!(compose_directions(&[d.clone(), d.clone()], &[1.0, -1.0])
            .unwrap()
            .is_zero());
        assert!(compose_directions(&[], &[]).is_err());
        assert!(compose_directions(&[d.clone()], &[1.0, 2.0]).is_err());

        let partial = d.masked(&[2]).unwrap();
        let other = d.masked(&[3]).unwrap();
        let c = compose_directions(&[partial, other], &[1.0, 1.0]).unwrap();
        assert_eq!(c.layer_mask().iter().copied().collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn document_round_trip() {
        let a = sample_transformation(&mut rng(11), 5, 4).unwrap();
        let b = sample_transformation(&mut rng(12), 5, 4).unwrap();
        let d = direction_between(&a, &b).unwrap().masked(&[1, 3, 5]).unwrap();
        let text = d.to_json().unwrap();
        assert!(text.contains("\"K\": 5"));
        assert_eq!(TransformationDirection::from_json(&text).unwrap(), d);

        let mut doc = d.to_document();
        doc.format_version = 99;
        assert!(matches!(
            TransformationDirection::from_document(&doc),
            Err(Error::Version { .. })
        ));
        let mut doc = d.to_document();
        doc.t_dim = 3;
        assert!(TransformationDirection::from_document(&doc).is_err());
    }
}
