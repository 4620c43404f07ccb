use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// He-normal weights drawn from a seeded generator so that initialization is
/// reproducible across runs and platforms.
pub(crate) fn he_normal(
    rng: &mut impl Rng,
    shape: (usize, usize, usize, usize),
    device: &Device,
) -> Result<Tensor> {
    let (o, i, kh, kw) = shape;
    let fan_in = (i * kh * kw) as f32;
    let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("finite std");
    let data: Vec<f32> = (0..o * i * kh * kw).map(|_| normal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

#[derive(Clone, Debug)]
pub(crate) struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Owns every trainable tensor of one parameter group.
#[derive(Debug, Default)]
pub(crate) struct ParamStore {
    vars: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn add(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.push((name, var));
        Ok(handle)
    }

    pub fn conv(
        &mut self,
        name: &str,
        rng: &mut impl Rng,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        zero: bool,
        device: &Device,
    ) -> Result<Conv2d> {
        let w = if zero {
            Tensor::zeros((cout, cin, k, k), DType::F32, device)?
        } else {
            he_normal(rng, (cout, cin, k, k), device)?
        };
        Ok(Conv2d {
            weight: self.add(format!("{name}.weight"), w)?,
            bias: self.add(format!("{name}.bias"), Tensor::zeros(cout, DType::F32, device)?)?,
            stride,
            padding: k / 2,
        })
    }

    pub fn norm(&mut self, name: &str, channels: usize, device: &Device) -> Result<GroupNorm> {
        Ok(GroupNorm {
            gamma: self.add(format!("{name}.gamma"), Tensor::ones(channels, DType::F32, device)?)?,
            beta: self.add(format!("{name}.beta"), Tensor::zeros(channels, DType::F32, device)?)?,
            groups: group_count(channels),
        })
    }

    pub fn vars(&self) -> impl Iterator<Item = &(String, Var)> {
        self.vars.iter()
    }

    pub fn var_list(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// Largest divisor of `channels` not above 8.
fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Per-sample group normalization; keeps inference independent of batch
/// composition.
#[derive(Clone, Debug)]
pub(crate) struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
}

impl GroupNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        let normed = normed.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Linear interpolation weights along one axis, align-corners = false.
fn linear_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f32 / dst as f32;
    (0..dst)
        .map(|o| {
            let pos = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f32);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let f = pos - i0 as f32;
            if i0 == i1 || f == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - f), (i1, f)]
            }
        })
        .collect()
}

/// Area-average weights along one axis (adaptive average pooling).
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    (0..dst)
        .map(|o| {
            let start = (o * src) / dst;
            let end = ((o + 1) * src).div_ceil(dst);
            let n = (end - start) as f32;
            (start..end).map(|i| (i, 1.0 / n)).collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ResizeKind {
    Bilinear,
    Area,
}

/// A `(h*w) x (H*W)` interpolation matrix, so resizing is one matmul and is
/// differentiable for arbitrary size ratios.
pub(crate) fn resize_matrix(
    kind: ResizeKind,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    device: &Device,
) -> Result<Tensor> {
    let weights = |s, d| match kind {
        ResizeKind::Bilinear => linear_weights(s, d),
        ResizeKind::Area => area_weights(s, d),
    };
    let wy = weights(h, oh);
    let wx = weights(w, ow);
    let mut m = vec![0f32; h * w * oh * ow];
    for (oy, ry) in wy.iter().enumerate() {
        for (ox, rx) in wx.iter().enumerate() {
            let col = oy * ow + ox;
            for &(iy, a) in ry {
                for &(ix, b) in rx {
                    m[(iy * w + ix) * oh * ow + col] += a * b;
                }
            }
        }
    }
    Ok(Tensor::from_vec(m, (h * w, oh * ow), device)?)
}

pub(crate) fn resize(x: &Tensor, matrix: &Tensor, (oh, ow): (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let flat = x.reshape((n * c, h * w))?;
    Ok(flat.matmul(matrix)?.reshape((n, c, oh, ow))?)
}

/// Row-wise L2 normalization along `dim`; zero vectors stay zero.
///
/// The norm is `sqrt(|x|^2 + 1e-24)` rather than a clamp so that the
/// gradient stays finite at zero vectors.
pub fn l2_normalize(x: &Tensor, dim: usize) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(dim)? + 1e-24)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}
