//! Pixel anomaly maps from encoder/decoder feature disagreement.

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::image::Image;
use crate::losses::cosine_sim;
use crate::model::{Backbone, ForwardOutput};

pub const DEFAULT_SIGMA: f64 = 4.0;

/// A dense `height × width` map of scores, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(row, col)` of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub map: ScoreMap,
    pub image_score: f64,
}

impl AnomalyMap {
    pub fn from_map(map: ScoreMap) -> Self {
        let image_score = map.max();
        Self { map, image_score }
    }
}

/// `1 - cos` per position.
pub fn stage_distance_map(encoder: &FeatureGrid, decoder: &FeatureGrid) -> Result<ScoreMap> {
    if encoder.shape() != decoder.shape() {
        return Err(Error::ShapeMismatch(format!(
            "encoder {:?} vs decoder {:?}",
            encoder.shape(),
            decoder.shape()
        )));
    }
    let (h, w, _) = encoder.shape();
    let data = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .map(|(r, c)| 1.0 - cosine_sim(encoder.at(r, c), decoder.at(r, c)))
        .collect();
    ScoreMap::new(h, w, data)
}

/// Linear source taps for each output index, align-corners = false.
fn bilinear_taps(src: usize, dst: usize) -> Vec<[(usize, f64); 2]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let f = pos - i0 as f64;
            [(i0, 1.0 - f), (i1, f)]
        })
        .collect()
}

pub fn upsample_bilinear(map: &ScoreMap, (height, width): (usize, usize)) -> ScoreMap {
    let ty = bilinear_taps(map.height, height);
    let tx = bilinear_taps(map.width, width);
    let mut out = ScoreMap::filled(height, width, 0.0);
    for (r, ry) in ty.iter().enumerate() {
        for (c, rx) in tx.iter().enumerate() {
            let mut v = 0.0;
            for &(iy, a) in ry {
                for &(ix, b) in rx {
                    v += a * b * map.get(iy, ix);
                }
            }
            out.set(r, c, v);
        }
    }
    out
}

/// Upsamples every stage map to `size` and averages them.
pub fn fuse_maps(maps: &[ScoreMap], size: (usize, usize)) -> Result<ScoreMap> {
    if maps.is_empty() {
        return Err(Error::invalid("no stage maps to fuse"));
    }
    let mut acc = ScoreMap::filled(size.0, size.1, 0.0);
    for m in maps {
        let up = upsample_bilinear(m, size);
        acc.data.iter_mut().zip(&up.data).for_each(|(a, v)| *a += v);
    }
    let n = maps.len() as f64;
    acc.data.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Mirror index into `0..n` with the edge sample repeated (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur, radius `ceil(4σ)`, reflected borders.
pub fn gaussian_smooth(map: &ScoreMap, sigma: f64) -> Result<ScoreMap> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = (map.height, map.width);
    let mut tmp = ScoreMap::filled(h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            let v = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * map.get(r, reflect(c as isize + k as isize - radius, w)))
                .sum();
            tmp.set(r, c, v);
        }
    }
    let mut out = ScoreMap::filled(h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            let v = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * tmp.get(reflect(r as isize + k as isize - radius, h), c))
                .sum();
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// Anomaly map of sample `i` of a batched forward pass.
pub fn score_sample(out: &ForwardOutput, i: usize, resolution: usize, sigma: f64) -> Result<AnomalyMap> {
    let stage_maps = out
        .encoder
        .maps
        .iter()
        .zip(&out.decoder.maps)
        .map(|(e, d)| {
            stage_distance_map(
                &FeatureGrid::from_batch(&e.tensor, i)?,
                &FeatureGrid::from_batch(&d.tensor, i)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_maps(&stage_maps, (resolution, resolution))?;
    Ok(AnomalyMap::from_map(gaussian_smooth(&fused, sigma)?))
}

pub fn score_batch(out: &ForwardOutput, resolution: usize, sigma: f64) -> Result<Vec<AnomalyMap>> {
    (0..out.batch_size()?)
        .map(|i| score_sample(out, i, resolution, sigma))
        .collect()
}

/// Scores images in chunks of `batch_size`.
pub fn score_images(model: &Backbone, images: &[&Image], batch_size: usize, sigma: f64) -> Result<Vec<AnomalyMap>> {
    let resolution = model.config().resolution;
    let mut maps = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let out = model.forward_images(chunk)?;
        maps.extend(score_batch(&out, resolution, sigma)?);
    }
    Ok(maps)
}
