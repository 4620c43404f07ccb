//! Plain in-memory image and mask buffers.
//!
//! Images are stored row-major, channel-interleaved RGB with values in
//! `[0, 1]`. Masks are single-channel `0/1` buffers.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer positions), clamping to the border.
    pub fn sample_bilinear(&self, y: f32, x: f32) -> [f32; 3] {
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f32;
        let fx = x - x0 as f32;
        let a = self.pixel(y0, x0);
        let b = self.pixel(y0, x1);
        let c = self.pixel(y1, x0);
        let d = self.pixel(y1, x1);
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = a[ch] * (1.0 - fx) + b[ch] * fx;
            let bottom = c[ch] * (1.0 - fx) + d[ch] * fx;
            out[ch] = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    /// Decodes a PNG (RGB or grayscale) and resizes it to `resolution`².
    pub fn load_png(path: &Path, resolution: usize) -> Result<Self> {
        let decoded = image::open(path).map_err(|source| Error::ImageRead {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::resized(decoded.to_rgb8(), resolution))
    }

    /// Interleaved 8-bit RGB rows, resized to `resolution`² like
    /// [`Image::load_png`].
    pub fn from_raw_rgb8(width: usize, height: usize, data: &[u8], resolution: usize) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        let rgb = RgbImage::from_raw(width as u32, height as u32, data.to_vec())
            .ok_or_else(|| Error::invalid("image dimensions overflow"))?;
        Ok(Self::resized(rgb, resolution))
    }

    fn resized(mut rgb: RgbImage, resolution: usize) -> Self {
        if rgb.width() as usize != resolution || rgb.height() as usize != resolution {
            rgb = image::imageops::resize(
                &rgb,
                resolution as u32,
                resolution as u32,
                FilterType::Triangle,
            );
        }
        Self::from_rgb8(&rgb)
    }

    pub fn from_rgb8(rgb: &RgbImage) -> Self {
        let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            height: rgb.height() as usize,
            width: rgb.width() as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::ImageWrite {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Binary ground-truth mask; `1` marks anomalous pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn positive_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Nearest-neighbour resize followed by re-binarization (`>= 128` is on).
    pub fn load_png(path: &Path, resolution: usize) -> Result<Self> {
        let decoded = image::open(path).map_err(|source| Error::ImageRead {
            path: path.to_path_buf(),
            source,
        })?;
        let mut gray = decoded.to_luma8();
        if gray.width() as usize != resolution || gray.height() as usize != resolution {
            gray = image::imageops::resize(
                &gray,
                resolution as u32,
                resolution as u32,
                FilterType::Nearest,
            );
        }
        let data = gray.as_raw().iter().map(|&v| u8::from(v >= 128)).collect();
        Ok(Self {
            height: gray.height() as usize,
            width: gray.width() as usize,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        let img: GrayImage =
            ImageBuffer::<Luma<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer length matches dimensions");
        img.save(path).map_err(|source| Error::ImageWrite {
            path: path.to_path_buf(),
            source,
        })
    }
}
