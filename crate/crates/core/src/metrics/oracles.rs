//! Analytic estimators of the synthetic scene factors from pixels.

use std::f64::consts::TAU;
use std::str::FromStr;

use crate::color::rgb_to_hsv;
use crate::error::{Error, Result};
use crate::image::Image;

/// Pixels below this saturation and above [`BLOB_MIN_VALUE`] count as blob.
pub const BLOB_MAX_SATURATION: f64 = 0.35;
pub const BLOB_MIN_VALUE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Oracle {
    /// Mean HSV value mapped to [-1, 1].
    Luminance,
    /// Saturation-weighted circular mean hue, radians in [0, 2π).
    Hue,
    /// Connected components (4-neighbour) of the low-saturation mask.
    BlobCount,
}

impl FromStr for Oracle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "luminance" => Ok(Oracle::Luminance),
            "hue" => Ok(Oracle::Hue),
            "blob_count" | "blobs" => Ok(Oracle::BlobCount),
            _ => Err(Error::invalid(format!("unknown oracle {s:?} (luminance, hue, blob_count)"))),
        }
    }
}

fn hsv_pixels(img: &Image) -> Vec<(f64, f64, f64)> {
    let n = img.size();
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let p = img.pixel(y, x);
            let rgb = p.map(|v| ((v as f64 + 1.0) * 0.5).clamp(0.0, 1.0));
            out.push(rgb_to_hsv(rgb));
        }
    }
    out
}

pub fn luminance(img: &Image) -> f64 {
    let px = hsv_pixels(img);
    2.0 * px.iter().map(|p| p.2).sum::<f64>() / px.len() as f64 - 1.0
}

pub fn hue(img: &Image) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (h, sat, _) in hsv_pixels(img) {
        s += sat * h.sin();
        c += sat * h.cos();
    }
    s.atan2(c).rem_euclid(TAU)
}

pub fn blob_count(img: &Image) -> usize {
    let n = img.size();
    let mask: Vec<bool> = hsv_pixels(img)
        .into_iter()
        .map(|(_, s, v)| s < BLOB_MAX_SATURATION && v > BLOB_MIN_VALUE)
        .collect();
    let mut seen = vec![false; n * n];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..n * n {
        if !mask[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / n, i % n);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - n);
            }
            if y + 1 < n {
                visit(i + n);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < n {
                visit(i + 1);
            }
        }
    }
    count
}

pub fn factor_response(images: &[Image], oracle: Oracle) -> Vec<f64> {
    images
        .iter()
        .map(|img| match oracle {
            Oracle::Luminance => luminance(img),
            Oracle::Hue => hue(img),
            Oracle::BlobCount => blob_count(img) as f64,
        })
        .collect()
}
