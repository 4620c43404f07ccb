//! Stochastic, label-preserving image augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::image::Image;

/// Upper bounds of every augmentation family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_probability: f32,
    pub quarter_turns: bool,
    /// Maximum small-angle rotation, in degrees.
    pub max_jitter_degrees: f32,
    /// Maximum relative brightness, contrast and saturation change.
    pub max_color_jitter: f32,
    /// Smallest area fraction kept by the random resized crop.
    pub min_crop_scale: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            quarter_turns: true,
            max_jitter_degrees: 10.0,
            max_color_jitter: 0.2,
            min_crop_scale: 0.8,
        }
    }
}

impl AugmentConfig {
    /// A configuration whose every draw is the identity transform.
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            quarter_turns: false,
            max_jitter_degrees: 0.0,
            max_color_jitter: 0.0,
            min_crop_scale: 1.0,
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> AugmentParams {
        let mut flip = |p: f32| p > 0.0 && rng.random::<f32>() < p;
        let flip_horizontal = flip(self.flip_probability);
        let flip_vertical = flip(self.flip_probability);
        let quarter_turns = if self.quarter_turns {
            rng.random_range(0..4u8)
        } else {
            0
        };
        let jitter_degrees = symmetric(rng, self.max_jitter_degrees);
        let brightness = 1.0 + symmetric(rng, self.max_color_jitter);
        let contrast = 1.0 + symmetric(rng, self.max_color_jitter);
        let saturation = 1.0 + symmetric(rng, self.max_color_jitter);
        let crop_scale = if self.min_crop_scale < 1.0 {
            rng.random_range(self.min_crop_scale..=1.0)
        } else {
            1.0
        };
        let crop_offset = (rng.random::<f32>(), rng.random::<f32>());
        AugmentParams {
            flip_horizontal,
            flip_vertical,
            quarter_turns,
            jitter_degrees,
            brightness,
            contrast,
            saturation,
            crop_scale,
            crop_offset,
        }
    }
}

fn symmetric(rng: &mut impl Rng, bound: f32) -> f32 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub quarter_turns: u8,
    pub jitter_degrees: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Area fraction of the crop, in `(0, 1]`.
    pub crop_scale: f32,
    /// Relative position of the crop window inside the free margin.
    pub crop_offset: (f32, f32),
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip_horizontal: false,
            flip_vertical: false,
            quarter_turns: 0,
            jitter_degrees: 0.0,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            crop_scale: 1.0,
            crop_offset: (0.0, 0.0),
        }
    }

    pub fn apply(&self, image: &Image) -> Image {
        let mut out = image.clone();
        if image.height() > 1 || image.width() > 1 {
            out = self.apply_geometry(&out);
        }
        self.apply_color(&mut out);
        out
    }

    fn apply_geometry(&self, image: &Image) -> Image {
        let mut img = flip(image, self.flip_horizontal, self.flip_vertical);
        let mut turns = self.quarter_turns % 4;
        if img.height() != img.width() {
            // odd turns would transpose the shape
            turns -= turns % 2;
        }
        for _ in 0..turns {
            img = rotate_quarter(&img);
        }
        if self.jitter_degrees != 0.0 || self.crop_scale < 1.0 {
            img = self.rotate_and_crop(&img);
        }
        img
    }

    /// Resamples through the inverse of crop-then-rotate with bilinear
    /// interpolation and border clamping.
    fn rotate_and_crop(&self, img: &Image) -> Image {
        let (h, w) = (img.height(), img.width());
        let side = self.crop_scale.clamp(f32::EPSILON, 1.0).sqrt();
        let crop_h = h as f32 * side;
        let crop_w = w as f32 * side;
        let top = (h as f32 - crop_h) * self.crop_offset.0.clamp(0.0, 1.0);
        let left = (w as f32 - crop_w) * self.crop_offset.1.clamp(0.0, 1.0);
        let (sin, cos) = self.jitter_degrees.to_radians().sin_cos();
        let cy = (h as f32 - 1.0) / 2.0;
        let cx = (w as f32 - 1.0) / 2.0;
        let sy = crop_h / h as f32;
        let sx = crop_w / w as f32;

        let mut out = Image::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let py = top + (y as f32 + 0.5) * sy - 0.5;
                let px = left + (x as f32 + 0.5) * sx - 0.5;
                let dy = py - cy;
                let dx = px - cx;
                let src_x = cos * dx + sin * dy + cx;
                let src_y = -sin * dx + cos * dy + cy;
                out.set_pixel(y, x, img.sample_bilinear(src_y, src_x));
            }
        }
        out
    }

    fn apply_color(&self, img: &mut Image) {
        let n = (img.height() * img.width()) as f32;
        let luma = |p: &[f32]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        let identity_color =
            self.brightness == 1.0 && self.contrast == 1.0 && self.saturation == 1.0;
        if identity_color {
            return;
        }
        for p in img.data_mut().chunks_exact_mut(3) {
            for v in p.iter_mut() {
                *v = (*v * self.brightness).clamp(0.0, 1.0);
            }
        }
        if self.contrast != 1.0 {
            let mean = img.data().chunks_exact(3).map(luma).sum::<f32>() / n;
            for v in img.data_mut() {
                *v = ((*v - mean) * self.contrast + mean).clamp(0.0, 1.0);
            }
        }
        if self.saturation != 1.0 {
            for p in img.data_mut().chunks_exact_mut(3) {
                let gray = luma(p);
                for v in p.iter_mut() {
                    *v = (gray + (*v - gray) * self.saturation).clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn flip(img: &Image, horizontal: bool, vertical: bool) -> Image {
    if !horizontal && !vertical {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let sy = if vertical { h - 1 - y } else { y };
            let sx = if horizontal { w - 1 - x } else { x };
            out.set_pixel(y, x, img.pixel(sy, sx));
        }
    }
    out
}

/// Rotates 90° clockwise.
fn rotate_quarter(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = Image::filled(w, h, [0.0; 3]);
    for y in 0..w {
        for x in 0..h {
            out.set_pixel(y, x, img.pixel(h - 1 - x, y));
        }
    }
    out
}

/// Returns an augmented copy of `sample` drawn with the default magnitudes.
pub fn augment(sample: &ImageSample, seed: u64) -> ImageSample {
    augment_with(sample, &AugmentConfig::default(), seed)
}

pub fn augment_with(sample: &ImageSample, config: &AugmentConfig, seed: u64) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = config.draw(&mut rng);
    ImageSample {
        image: params.apply(&sample.image),
        mask: None,
        ..sample.clone()
    }
}
