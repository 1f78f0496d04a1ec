//! Planar float images in `[-1, 1]` and their PNG / tensor conversions.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CHW image, values nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "image buffer has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// 8-bit RGB rendering; grayscale images are replicated across channels.
    pub fn to_rgb8(&self) -> RgbImage {
        let to_u8 = |v: f32| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let px = |c: usize| to_u8(self.at(c.min(self.channels - 1), y, x));
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(3, h, w, 0.0);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                *out.at_mut(c, y as usize, x as usize) = p[c] as f32 / 127.5 - 1.0;
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Nearest-neighbour enlargement for viewing.
    pub fn upscale(&self, factor: usize) -> Image {
        let mut out = Image::filled(self.channels, self.height * factor, self.width * factor, 0.0);
        for c in 0..self.channels {
            for y in 0..out.height {
                for x in 0..out.width {
                    *out.at_mut(c, y, x) = self.at(c, y / factor, x / factor);
                }
            }
        }
        out
    }
}

/// Stacks images into a `(B, C, H, W)` tensor.
pub fn images_to_tensor(images: &[Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for (i, im) in images.iter().enumerate() {
        if im.shape() != (c, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "image {i} is {:?}, batch is {:?}",
                im.shape(),
                (c, h, w)
            )));
        }
        data.extend_from_slice(&im.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(flat
        .chunks_exact(c * h * w)
        .take(b)
        .map(|d| Image {
            channels: c,
            height: h,
            width: w,
            data: d.to_vec(),
        })
        .collect())
}

/// Places images side by side with `gap` background pixels between them.
pub fn hconcat(images: &[Image], gap: usize, background: f32) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
    let h = images.iter().map(|i| i.height).max().unwrap();
    let w = images.iter().map(|i| i.width).sum::<usize>() + gap * (images.len() - 1);
    let mut out = Image::filled(first.channels.max(3), h, w, background);
    let mut x0 = 0;
    for im in images {
        for c in 0..out.channels {
            for y in 0..im.height {
                for x in 0..im.width {
                    *out.at_mut(c, y, x0 + x) = im.at(c.min(im.channels - 1), y, x);
                }
            }
        }
        x0 += im.width + gap;
    }
    Ok(out)
}

pub fn vconcat(images: &[Image], gap: usize, background: f32) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
    let w = images.iter().map(|i| i.width).max().unwrap();
    let h = images.iter().map(|i| i.height).sum::<usize>() + gap * (images.len() - 1);
    let mut out = Image::filled(first.channels.max(3), h, w, background);
    let mut y0 = 0;
    for im in images {
        for c in 0..out.channels {
            for y in 0..im.height {
                for x in 0..im.width {
                    *out.at_mut(c, y0 + y, x) = im.at(c.min(im.channels - 1), y, x);
                }
            }
        }
        y0 += im.height + gap;
    }
    Ok(out)
}
