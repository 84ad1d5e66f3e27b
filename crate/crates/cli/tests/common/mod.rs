#![allow(dead_code)]

use std::path::{Path, PathBuf};

use transpace::data::SyntheticConfig;
use transpace::training::{run_training, RunOptions, TrainConfig};

/// Two stages up to 8x8, a handful of steps.
pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::toy();
    c.k = 2;
    c.t_dim = 4;
    c.z_dim = 4;
    c.channels = vec![16, 8];
    c.max_resolution = 8;
    c.images_per_stage = 8;
    c.batch_sizes = vec![4];
    c.seed = 3;
    c.dataset.resolution = 8;
    c.dataset.synthetic = SyntheticConfig {
        count: 30,
        ..c.dataset.synthetic
    };
    c
}

/// Trains the tiny model into `dir` and returns the final checkpoint.
pub fn trained_checkpoint(dir: &Path) -> PathBuf {
    let c = tiny_config();
    let ds = c.dataset.open().unwrap();
    let out = run_training(
        &c,
        ds.as_ref(),
        &RunOptions {
            out_dir: Some(dir.to_path_buf()),
            max_steps: None,
        },
    )
    .unwrap();
    out.checkpoint.unwrap()
}
