//! Training data: image folders, the synthetic factor scenes, and a
//! deterministic train/test split.

mod folder;
pub mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use folder::FolderDataset;
pub use synthetic::{render, FactorSample, Factors, SyntheticConfig, SyntheticDataset};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::fnv1a;

/// Random-access images at any power-of-two size up to [`resolution`].
///
/// [`resolution`]: ImageDataset::resolution
pub trait ImageDataset: Send + Sync {
    fn len(&self) -> usize;
    fn resolution(&self) -> usize;
    fn image(&self, idx: usize, size: usize) -> Result<Image>;
    /// Stable identifier, used for the split.
    fn name(&self, idx: usize) -> String;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Folder,
    Synthetic,
}

/// The `[dataset]` section of a training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Image directory; required for `folder`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub resolution: usize,
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    /// Seed for drawing synthetic factors.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
}

fn default_holdout() -> f64 {
    0.10
}

impl DatasetSpec {
    pub fn synthetic(config: SyntheticConfig, resolution: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            resolution,
            holdout: default_holdout(),
            seed,
            synthetic: config,
        }
    }

    pub fn folder(path: impl Into<PathBuf>, resolution: usize) -> Self {
        Self {
            kind: DatasetKind::Folder,
            path: Some(path.into()),
            resolution,
            holdout: default_holdout(),
            seed: 0,
            synthetic: SyntheticConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::invalid(format!("holdout {} outside [0, 1)", self.holdout)));
        }
        if self.kind == DatasetKind::Folder && self.path.is_none() {
            return Err(Error::Config("folder dataset needs a path".into()));
        }
        Image::filled(self.resolution, [0.0; 3]).map(|_| ())
    }

    pub fn open(&self) -> Result<Box<dyn ImageDataset>> {
        self.validate()?;
        Ok(match self.kind {
            DatasetKind::Folder => {
                let path = self.path.as_ref().expect("validated");
                Box::new(FolderDataset::load(path, self.resolution)?)
            }
            DatasetKind::Synthetic => Box::new(SyntheticDataset::generate(&self.synthetic, self.resolution, self.seed)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Orders items by the FNV-1a hash of their name and sends the first
/// `round(n * holdout)` to the test set. Both lists come back in index order,
/// so the result does not depend on enumeration order and adding a file only
/// moves that file.
pub fn split_by_name(names: &[String], holdout: f64) -> Result<Split> {
    if !(0.0..1.0).contains(&holdout) {
        return Err(Error::invalid(format!("holdout {holdout} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by_key(|&i| (fnv1a(names[i].as_bytes()), names[i].clone()));
    let n_test = (names.len() as f64 * holdout).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, test })
}

pub fn split(dataset: &dyn ImageDataset, holdout: f64) -> Result<Split> {
    let names: Vec<String> = (0..dataset.len()).map(|i| dataset.name(i)).collect();
    split_by_name(&names, holdout)
}
