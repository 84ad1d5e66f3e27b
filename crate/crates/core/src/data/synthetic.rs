//! Procedural scenes with known generative factors.
//!
//! A scene is a vertical-gradient background of hue `hue` plus up to nine
//! near-grey discs placed in distinct cells of a 3x3 grid. Brightness scales
//! the HSV value of everything, so the mean HSV value of a render is exactly
//! `0.85 * brightness` and the normalized luminance is `1.7 * brightness - 1`.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageDataset;
use crate::color::{angle_diff, hsv_to_rgb};
use crate::error::{Error, Result};
use crate::image::Image;

pub const BACKGROUND_SATURATION: f64 = 0.7;
pub const OBJECT_SATURATION: f64 = 0.08;
/// Fraction of value lost from the top row to the bottom row.
pub const GRADIENT_DEPTH: f64 = 0.3;
const GRID: usize = 3;

pub const FACTOR_NAMES: [&str; 4] = ["brightness", "hue", "object_count", "object_size"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub count: usize,
    pub brightness: [f64; 2],
    /// Radians; sampled uniformly in `[lo, hi)`.
    pub hue: [f64; 2],
    /// Inclusive bounds on the number of discs.
    pub object_count: [usize; 2],
    /// Disc radius as a fraction of the image side.
    pub object_size: [f64; 2],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 10_000,
            brightness: [0.0, 1.0],
            hue: [0.0, TAU],
            object_count: [0, 3],
            object_size: [0.06, 0.12],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.count > 0
            && 0.0 <= self.brightness[0]
            && self.brightness[0] <= self.brightness[1]
            && self.brightness[1] <= 1.0
            && 0.0 <= self.hue[0]
            && self.hue[0] <= self.hue[1]
            && self.hue[1] <= TAU
            && self.object_count[0] <= self.object_count[1]
            && self.object_count[1] <= GRID * GRID
            && 0.0 < self.object_size[0]
            && self.object_size[0] <= self.object_size[1]
            && self.object_size[1] < 0.5 / GRID as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid synthetic factor ranges: {self:?}")))
        }
    }

    fn range_width(&self, factor: &str) -> Result<f64> {
        Ok(match factor {
            "brightness" => self.brightness[1] - self.brightness[0],
            "hue" => (self.hue[1] - self.hue[0]).min(std::f64::consts::PI),
            "object_count" => (self.object_count[1] - self.object_count[0]) as f64,
            "object_size" => self.object_size[1] - self.object_size[0],
            _ => return Err(unknown_factor(factor)),
        })
    }
}

fn unknown_factor(name: &str) -> Error {
    Error::invalid(format!("unknown factor {name:?}; expected one of {FACTOR_NAMES:?}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub brightness: f64,
    pub hue: f64,
    pub object_count: usize,
    pub object_size: f64,
    /// Seeds disc placement; not a factor in its own right.
    pub layout_seed: u64,
}

impl Factors {
    pub fn get(&self, name: &str) -> Result<f64> {
        Ok(match name {
            "brightness" => self.brightness,
            "hue" => self.hue,
            "object_count" => self.object_count as f64,
            "object_size" => self.object_size,
            _ => return Err(unknown_factor(name)),
        })
    }

    /// Copy with one factor replaced. Hue wraps into `[0, 2π)`; the count is
    /// rounded and clamped to the grid.
    pub fn with(&self, name: &str, value: f64) -> Result<Self> {
        let mut f = self.clone();
        match name {
            "brightness" => f.brightness = value.clamp(0.0, 1.0),
            "hue" => f.hue = value.rem_euclid(TAU),
            "object_count" => f.object_count = value.round().clamp(0.0, (GRID * GRID) as f64) as usize,
            "object_size" => f.object_size = value,
            _ => return Err(unknown_factor(name)),
        }
        Ok(f)
    }

    /// Signed change of `name` from `self` to `other` (shortest arc for hue).
    pub fn difference(&self, other: &Self, name: &str) -> Result<f64> {
        if name == "hue" {
            Ok(angle_diff(self.hue, other.hue))
        } else {
            Ok(other.get(name)? - self.get(name)?)
        }
    }

    /// Disc centres and radius in pixels for a square render of side `size`.
    pub fn discs(&self, size: usize) -> Vec<(f64, f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.layout_seed);
        let mut cells: Vec<usize> = (0..GRID * GRID).collect();
        cells.shuffle(&mut rng);
        let cell = 1.0 / GRID as f64;
        let slack = (cell / 2.0 - self.object_size - 0.02).max(0.0);
        cells
            .into_iter()
            .take(self.object_count)
            .map(|c| {
                let jx: f64 = rng.gen_range(-1.0..=1.0) * slack;
                let jy: f64 = rng.gen_range(-1.0..=1.0) * slack;
                let cx = ((c % GRID) as f64 + 0.5) * cell + jx;
                let cy = ((c / GRID) as f64 + 0.5) * cell + jy;
                (cx * size as f64, cy * size as f64, self.object_size * size as f64)
            })
            .collect()
    }
}

/// Renders a scene. Pure in `factors` and `size`; sampled at pixel centres.
pub fn render(factors: &Factors, size: usize) -> Result<Image> {
    let mut img = Image::filled(size, [0.0; 3])?;
    let discs = factors.discs(size);
    for y in 0..size {
        let py = y as f64 + 0.5;
        let value = factors.brightness * (1.0 - GRADIENT_DEPTH * py / size as f64);
        let bg = hsv_to_rgb(factors.hue, BACKGROUND_SATURATION, value);
        let fg = hsv_to_rgb(factors.hue, OBJECT_SATURATION, value);
        for x in 0..size {
            let px = x as f64 + 0.5;
            let inside = discs
                .iter()
                .any(|&(cx, cy, r)| (px - cx).powi(2) + (py - cy).powi(2) <= r * r);
            let rgb = if inside { fg } else { bg };
            for (c, v) in rgb.iter().enumerate() {
                img.set(c, y, x, (2.0 * v - 1.0) as f32);
            }
        }
    }
    Ok(img)
}

pub struct FactorSample {
    pub image: Image,
    pub factors: Factors,
}

/// A fixed list of factor draws; images are rendered on demand.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    config: SyntheticConfig,
    resolution: usize,
    factors: Vec<Factors>,
}

impl SyntheticDataset {
    pub fn generate(config: &SyntheticConfig, resolution: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        Image::filled(resolution, [0.0; 3])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
            if r[1] > r[0] {
                rng.gen_range(r[0]..r[1])
            } else {
                r[0]
            }
        };
        let factors = (0..config.count)
            .map(|_| Factors {
                brightness: sample(&mut rng, config.brightness),
                hue: sample(&mut rng, config.hue),
                object_count: rng.gen_range(config.object_count[0]..=config.object_count[1]),
                object_size: sample(&mut rng, config.object_size),
                layout_seed: rng.gen(),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            resolution,
            factors,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn factors(&self) -> &[Factors] {
        &self.factors
    }

    pub fn sample(&self, idx: usize) -> Result<FactorSample> {
        let factors = self
            .factors
            .get(idx)
            .ok_or_else(|| Error::invalid(format!("sample index {idx} out of range")))?
            .clone();
        Ok(FactorSample {
            image: render(&factors, self.resolution)?,
            factors,
        })
    }

    /// Names used for the filename-hash split and for export.
    pub fn names(&self) -> Vec<String> {
        (0..self.factors.len()).map(|i| format!("{i:06}.png")).collect()
    }

    /// Writes one PNG per sample plus `factors.csv`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut csv = String::from("file,brightness,hue,object_count,object_size,layout_seed\n");
        for (i, name) in self.names().iter().enumerate() {
            let s = self.sample(i)?;
            s.image.save_png(&dir.join(name))?;
            let f = &s.factors;
            csv.push_str(&format!(
                "{name},{:.9},{:.9},{},{:.9},{}\n",
                f.brightness, f.hue, f.object_count, f.object_size, f.layout_seed
            ));
        }
        let path = dir.join("factors.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
    }

    /// Greedy pairing for a single-factor change of `delta`.
    ///
    /// Each anchor, in index order, is matched with the unused sample whose
    /// change in `factor` is within [`TARGET_TOLERANCE`] of the factor range
    /// from `delta` and whose other factors are closest (range-normalized
    /// Euclidean distance). Pairs further apart than [`OFF_FACTOR_THRESHOLD`]
    /// are not returned. Stops after `max_pairs`.
    pub fn paired_factor_query(&self, factor: &str, delta: f64, max_pairs: usize) -> Result<Vec<(usize, usize)>> {
        let target_width = self.config.range_width(factor)?;
        let others: Vec<(&str, f64)> = FACTOR_NAMES
            .iter()
            .filter(|&&n| n != factor)
            .map(|&n| Ok((n, self.config.range_width(n)?)))
            .collect::<Result<_>>()?;
        let tol = TARGET_TOLERANCE * target_width.max(f64::EPSILON);
        let mut used = vec![false; self.factors.len()];
        let mut pairs = Vec::new();
        for a in 0..self.factors.len() {
            if pairs.len() >= max_pairs {
                break;
            }
            if used[a] {
                continue;
            }
            let fa = &self.factors[a];
            let mut best: Option<(f64, usize)> = None;
            for (b, fb) in self.factors.iter().enumerate() {
                if b == a || used[b] {
                    continue;
                }
                if (fa.difference(fb, factor)? - delta).abs() > tol {
                    continue;
                }
                let dist = off_factor_distance(fa, fb, &others)?;
                if best.map_or(true, |(d, _)| dist < d) {
                    best = Some((dist, b));
                }
            }
            if let Some((dist, b)) = best {
                if dist < OFF_FACTOR_THRESHOLD {
                    used[a] = true;
                    used[b] = true;
                    pairs.push((a, b));
                }
            }
        }
        Ok(pairs)
    }
}

/// Largest accepted off-factor distance for a matched pair.
pub const OFF_FACTOR_THRESHOLD: f64 = 0.1;
/// Allowed error of the target-factor change, as a fraction of its range.
pub const TARGET_TOLERANCE: f64 = 0.05;

/// Range-normalized distance over the listed factors. Factors with a
/// degenerate range contribute nothing.
pub fn off_factor_distance(a: &Factors, b: &Factors, factors: &[(&str, f64)]) -> Result<f64> {
    let mut sum = 0.0;
    for &(name, width) in factors {
        if width > 0.0 {
            sum += (a.difference(b, name)? / width).powi(2);
        }
    }
    Ok(sum.sqrt())
}

impl ImageDataset for SyntheticDataset {
    fn len(&self) -> usize {
        self.factors.len()
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn image(&self, idx: usize, size: usize) -> Result<Image> {
        self.sample(idx)?.image.downsample_to(size)
    }

    fn name(&self, idx: usize) -> String {
        format!("{idx:06}.png")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Factors {
        Factors {
            brightness: 0.8,
            hue: 1.0,
            object_count: 2,
            object_size: 0.1,
            layout_seed: 5,
        }
    }

    #[test]
    fn dark_scene_is_dark() {
        let img = render(&base().with("brightness", 0.0).unwrap(), 32).unwrap();
        assert!(img.data().iter().all(|&v| v < -0.8));
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = SyntheticConfig {
            count: 20,
            ..Default::default()
        };
        let a = SyntheticDataset::generate(&cfg, 16, 4).unwrap();
        let b = SyntheticDataset::generate(&cfg, 16, 4).unwrap();
        assert_eq!(a.factors(), b.factors());
        assert_eq!(a.image(3, 16).unwrap(), b.image(3, 16).unwrap());
        assert_eq!(a.image(3, 8).unwrap().size(), 8);
    }

    #[test]
    fn discs_stay_in_their_cells() {
        for seed in 0..50 {
            let f = Factors {
                object_count: 9,
                object_size: 0.12,
                layout_seed: seed,
                ..base()
            };
            let discs = f.discs(96);
            for (i, a) in discs.iter().enumerate() {
                for b in &discs[i + 1..] {
                    let gap = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() - a.2 - b.2;
                    assert!(gap > 1.0, "discs touch for seed {seed}");
                }
            }
        }
    }

    #[test]
    fn unknown_factor_rejected() {
        let ds = SyntheticDataset::generate(&SyntheticConfig { count: 4, ..Default::default() }, 8, 0).unwrap();
        assert!(ds.paired_factor_query("season", 0.1, 1).is_err());
        assert!(base().get("season").is_err());
    }

    #[test]
    fn zero_delta_pairs_are_close() {
        let ds = SyntheticDataset::generate(&SyntheticConfig { count: 2000, ..Default::default() }, 8, 1).unwrap();
        let pairs = ds.paired_factor_query("brightness", 0.0, 5).unwrap();
        assert_eq!(pairs.len(), 5);
        for (a, b) in pairs {
            let (fa, fb) = (&ds.factors()[a], &ds.factors()[b]);
            assert!((fa.brightness - fb.brightness).abs() <= 0.05 + 1e-12);
            assert_eq!(fa.object_count, fb.object_count);
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let cfg = SyntheticConfig {
            brightness: [0.5, 0.2],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SyntheticConfig {
            object_count: [0, 10],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
