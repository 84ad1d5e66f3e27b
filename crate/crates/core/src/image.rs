//! RGB images in channel-major layout with values in [-1, 1].

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

fn check_side(size: usize) -> Result<()> {
    if size < 4 || !size.is_power_of_two() {
        return Err(Error::invalid(format!(
            "image side {size} must be a power of two >= 4"
        )));
    }
    Ok(())
}

impl Image {
    /// `data` is `[3][size][size]`, channel-major.
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        check_side(size)?;
        if data.len() != CHANNELS * size * size {
            return Err(Error::shape(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                CHANNELS * size * size
            )));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Result<Self> {
        check_side(size)?;
        let mut data = Vec::with_capacity(CHANNELS * size * size);
        for v in rgb {
            data.extend(std::iter::repeat(v).take(size * size));
        }
        Ok(Self { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let s = self.size;
        self.data[(c * s + y) * s + x] = v;
    }

    /// RGB triple at a pixel.
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn clamp(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
        self
    }

    /// 2x2 box-filter downsampling.
    pub fn downsample2(&self) -> Result<Self> {
        let s = self.size / 2;
        check_side(s)?;
        let mut out = vec![0.0f32; CHANNELS * s * s];
        for c in 0..CHANNELS {
            for y in 0..s {
                for x in 0..s {
                    let v = self.get(c, 2 * y, 2 * x)
                        + self.get(c, 2 * y + 1, 2 * x)
                        + self.get(c, 2 * y, 2 * x + 1)
                        + self.get(c, 2 * y + 1, 2 * x + 1);
                    out[(c * s + y) * s + x] = v * 0.25;
                }
            }
        }
        Self::new(s, out)
    }

    /// Box-downsamples to `size` (must divide by powers of two).
    pub fn downsample_to(&self, size: usize) -> Result<Self> {
        if size > self.size || self.size % size != 0 || !(self.size / size).is_power_of_two() {
            return Err(Error::invalid(format!(
                "cannot downsample {} to {}",
                self.size, size
            )));
        }
        let mut img = self.clone();
        while img.size > size {
            img = img.downsample2()?;
        }
        Ok(img)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Result<Self> {
        let s = self.size * 2;
        let mut out = vec![0.0f32; CHANNELS * s * s];
        for c in 0..CHANNELS {
            for y in 0..s {
                for x in 0..s {
                    out[(c * s + y) * s + x] = self.get(c, y / 2, x / 2);
                }
            }
        }
        Self::new(s, out)
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, CHANNELS, self.size, self.size), &Device::Cpu)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stacks images of identical size into `(B, 3, H, W)`.
    pub fn batch_to_tensor(images: &[Image], dtype: DType) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("empty image batch"))?;
        if images.iter().any(|i| i.size != first.size) {
            return Err(Error::shape("image batch has mixed resolutions"));
        }
        let data: Vec<f32> = images.iter().flat_map(|i| i.data.iter().copied()).collect();
        let t = Tensor::from_vec(
            data,
            (images.len(), CHANNELS, first.size, first.size),
            &Device::Cpu,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Splits a `(B, 3, H, W)` tensor into images.
    pub fn from_batch_tensor(t: &Tensor) -> Result<Vec<Image>> {
        let (b, c, h, w) = t.dims4()?;
        if c != CHANNELS || h != w {
            return Err(Error::shape(format!("expected (B,3,S,S), got {:?}", t.dims())));
        }
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        flat.chunks(c * h * w)
            .take(b)
            .map(|chunk| Image::new(h, chunk.to_vec()))
            .collect()
    }

    /// Center-crops to a square, resizes to `size`, maps to [-1, 1].
    pub fn from_dynamic(img: &DynamicImage, size: usize) -> Result<Self> {
        check_side(size)?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let side = w.min(h);
        if side == 0 {
            return Err(Error::invalid("empty source image"));
        }
        let x0 = (w - side) / 2;
        let y0 = (h - side) / 2;
        let cropped = image::imageops::crop_imm(&rgb, x0, y0, side, side).to_image();
        let resized = if side as usize == size {
            cropped
        } else {
            image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
        };
        Ok(Self::from_rgb8(&resized))
    }

    fn from_rgb8(rgb: &RgbImage) -> Self {
        let size = rgb.width() as usize;
        let mut data = vec![0.0f32; CHANNELS * size * size];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[(c * size + y as usize) * size + x as usize] = p[c] as f32 / 127.5 - 1.0;
            }
        }
        Self { size, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let s = self.size as u32;
        RgbImage::from_fn(s, s, |x, y| {
            let px = self.pixel(y as usize, x as usize);
            image::Rgb(px.map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8))
        })
    }

    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path)?;
        Self::from_dynamic(&img, size)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// Decodes PNG/JPEG bytes; crops and resizes to `size`.
    pub fn from_encoded(bytes: &[u8], size: usize) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Self::from_dynamic(&img, size)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f32> {
        if self.size != other.size {
            return Err(Error::shape("mean_abs_diff: size mismatch"));
        }
        let s: f32 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Ok(s / self.data.len() as f32)
    }
}
