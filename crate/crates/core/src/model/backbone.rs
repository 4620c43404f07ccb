//! Reverse-distillation style reconstruction model.
//!
//! ```text
//! image ─► encoder (frozen) ─► f1,f2,f3 ─► projector ─► v1,v2,v3 ─► neck ─► z, g
//!                                │                                        │
//!                                └────────── reconstruction target ◄── decoder
//! ```
//!
//! The neck consumes the projected pyramid while the decoder reconstructs the
//! raw encoder pyramid.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    he_normal, l2_normalize, resize, resize_matrix, Conv2d, GroupNorm, ParamStore, ResizeKind,
};
use crate::error::{Error, Result};
use crate::image::Image;

pub const STAGES: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorInit {
    #[default]
    Random,
    /// Zero residual branches, so the projector starts as the identity map.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub resolution: usize,
    /// Stride-2 convolutions before the first tapped stage; stage 1 has
    /// stride `2^stem_downsamples`.
    pub stem_downsamples: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; STAGES],
    pub projector_blocks: usize,
    pub projector_init: ProjectorInit,
    pub bottleneck_channels: usize,
    pub encoder_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// 64×64 input, strides 8/16/32.
    pub fn desk() -> Self {
        Self {
            resolution: 64,
            stem_downsamples: 3,
            stem_channels: 16,
            stage_channels: [32, 64, 128],
            projector_blocks: 4,
            projector_init: ProjectorInit::Random,
            bottleneck_channels: 64,
            encoder_seed: 0,
        }
    }

    /// 256×256 input, strides 8/16/32.
    pub fn full_scale() -> Self {
        Self {
            resolution: 256,
            ..Self::desk()
        }
    }

    pub fn strides(&self) -> [usize; STAGES] {
        let base = 1usize << self.stem_downsamples;
        [base, base * 2, base * 4]
    }

    pub fn total_stride(&self) -> usize {
        self.strides()[STAGES - 1]
    }

    /// Spatial size of each stage for the configured resolution.
    pub fn stage_sizes(&self) -> [usize; STAGES] {
        let mut size = self.resolution;
        for _ in 0..self.stem_downsamples {
            size = size.div_ceil(2);
        }
        let s1 = size;
        let s2 = s1.div_ceil(2);
        [s1, s2, s2.div_ceil(2)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_downsamples == 0 {
            return Err(Error::invalid("stem_downsamples must be at least 1"));
        }
        if self.resolution < self.total_stride() {
            return Err(Error::invalid(format!(
                "resolution {} is smaller than the total stride {}",
                self.resolution,
                self.total_stride()
            )));
        }
        if self.stage_channels.contains(&0) || self.stem_channels == 0 || self.bottleneck_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; identifies compatible checkpoints.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// One stage of a pyramid, batched as `(N, C, h, w)`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub stage: usize,
    pub stride: usize,
    pub tensor: Tensor,
}

#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub maps: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn tensors(&self) -> Vec<Tensor> {
        self.maps.iter().map(|m| m.tensor.clone()).collect()
    }

    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        self.maps
            .iter()
            .map(|m| {
                let (_, c, h, w) = m.tensor.dims4()?;
                Ok((h, w, c))
            })
            .collect()
    }

    /// Pyramid of sample `i` alone, keeping the batch axis.
    pub fn select(&self, i: usize) -> Result<Self> {
        let maps = self
            .maps
            .iter()
            .map(|m| {
                Ok(FeatureMap {
                    stage: m.stage,
                    stride: m.stride,
                    tensor: m.tensor.narrow(0, i, 1)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { maps })
    }
}

/// Output of the projector; shape-matched to the encoder pyramid.
#[derive(Clone, Debug)]
pub struct ProjectedPyramid {
    pub maps: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct BottleneckFeatures {
    /// `(N, c_b, h_b, w_b)`
    pub spatial: Tensor,
    /// `(N, c_b)`, unit norm.
    pub global: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub encoder: FeaturePyramid,
    pub projected: ProjectedPyramid,
    pub bottleneck: BottleneckFeatures,
    pub decoder: FeaturePyramid,
}

impl ForwardOutput {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.encoder.maps[0].tensor.dim(0)?)
    }
}

/// Converts images to an `(N, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&Image], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot build a tensor from zero images"))?;
    let (h, w) = (first.height(), first.width());
    let mut data: Vec<f32> = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "image of {}x{} in a batch of {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        for ch in 0..3 {
            data.extend(img.data().iter().skip(ch).step_by(3));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

/// Frozen convolutional feature pyramid with deterministic random weights.
#[derive(Debug)]
pub struct Encoder {
    layers: Vec<Conv2d>,
    taps: [usize; STAGES],
    strides: [usize; STAGES],
    resolution: usize,
    identifier: String,
}

impl Encoder {
    pub fn new(config: &BackboneConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.encoder_seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for i in 0..config.stem_downsamples {
            let cout = if i + 1 == config.stem_downsamples {
                config.stage_channels[0]
            } else {
                config.stem_channels
            };
            layers.push(frozen_conv(&mut rng, cin, cout, device)?);
            cin = cout;
        }
        let tap1 = layers.len() - 1;
        layers.push(frozen_conv(&mut rng, cin, config.stage_channels[1], device)?);
        layers.push(frozen_conv(
            &mut rng,
            config.stage_channels[1],
            config.stage_channels[2],
            device,
        )?);
        let identifier = format!(
            "random-conv:seed={}:stem={}x{}:stages={:?}",
            config.encoder_seed, config.stem_downsamples, config.stem_channels, config.stage_channels
        );
        Ok(Self {
            layers,
            taps: [tap1, tap1 + 1, tap1 + 2],
            strides: config.strides(),
            resolution: config.resolution,
            identifier,
        })
    }

    pub fn identifier(&self) -> &str {
        &self.identifier
    }

    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        if h < self.strides[STAGES - 1] || w < self.strides[STAGES - 1] {
            return Err(Error::invalid(format!(
                "input {h}x{w} is smaller than the total stride {}",
                self.strides[STAGES - 1]
            )));
        }
        if (h, w) != (self.resolution, self.resolution) {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} does not match the configured resolution {}",
                self.resolution
            )));
        }
        let mut x = ((images - 0.5)? * 4.0)?;
        let mut maps = Vec::with_capacity(STAGES);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?.relu()?;
            if let Some(stage) = self.taps.iter().position(|&t| t == i) {
                maps.push(FeatureMap {
                    stage: stage + 1,
                    stride: self.strides[stage],
                    tensor: x.clone(),
                });
            }
        }
        Ok(FeaturePyramid { maps })
    }

    /// SHA-256 over the raw weight bytes.
    pub fn parameter_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            for t in [&layer.weight, &layer.bias] {
                let v: Vec<f32> = t.flatten_all()?.to_vec1()?;
                for x in v {
                    hasher.update(x.to_le_bytes());
                }
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    #[cfg(test)]
    pub(crate) fn weights(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }
}

fn frozen_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, device: &Device) -> Result<Conv2d> {
    Ok(Conv2d {
        weight: he_normal(rng, (cout, cin, 3, 3), device)?,
        bias: Tensor::zeros(cout, DType::F32, device)?,
        stride: 2,
        padding: 1,
    })
}

#[derive(Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        zero: bool,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            conv: store.conv(&format!("{name}.conv"), rng, (cin, cout, 3), 1, zero, device)?,
            norm: store.norm(&format!("{name}.norm"), cout, device)?,
        })
    }

    fn forward(&self, x: &Tensor, activate: bool) -> Result<Tensor> {
        let y = self.norm.forward(&self.conv.forward(x)?)?;
        if activate {
            Ok(y.relu()?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug)]
struct Projector {
    /// `blocks[stage][i]`; each block is residual.
    blocks: Vec<Vec<ConvBlock>>,
}

#[derive(Debug)]
struct Neck {
    fuse: ConvBlock,
    compress: ConvBlock,
    /// Resizes stage `s` to the deepest stage's resolution.
    pool: Vec<Tensor>,
}

#[derive(Debug)]
struct DecoderStage {
    entry: ConvBlock,
    refine: ConvBlock,
    head: Conv2d,
}

#[derive(Debug)]
struct Decoder {
    /// Deepest stage first.
    stages: Vec<DecoderStage>,
    /// `upsample[i]` lifts stage `i + 1` to stage `i` resolution.
    upsample: Vec<Tensor>,
}

/// Encoder + projector + neck + decoder.
#[derive(Debug)]
pub struct Backbone {
    config: BackboneConfig,
    device: Device,
    encoder: Encoder,
    projector: Projector,
    neck: Neck,
    decoder: Decoder,
    projector_params: ParamStore,
    other_params: ParamStore,
    sizes: [usize; STAGES],
}

impl Backbone {
    /// Builds a model; trainable parameters are drawn from `init_seed`.
    pub fn new(config: BackboneConfig, init_seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config, device)?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let sizes = config.stage_sizes();
        let ch = config.stage_channels;

        let mut projector_params = ParamStore::default();
        let zero = config.projector_init == ProjectorInit::Identity;
        let mut blocks = Vec::with_capacity(STAGES);
        for (s, &c) in ch.iter().enumerate() {
            let stage = (0..config.projector_blocks)
                .map(|b| {
                    ConvBlock::new(
                        &mut projector_params,
                        &format!("projector.s{}.b{b}", s + 1),
                        &mut rng,
                        c,
                        c,
                        zero,
                        device,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(stage);
        }

        let mut other = ParamStore::default();
        let cb = config.bottleneck_channels;
        let deepest = sizes[STAGES - 1];
        let pool = (0..STAGES)
            .map(|s| resize_matrix(ResizeKind::Area, (sizes[s], sizes[s]), (deepest, deepest), device))
            .collect::<Result<Vec<_>>>()?;
        let neck = Neck {
            fuse: ConvBlock::new(&mut other, "neck.fuse", &mut rng, ch.iter().sum(), cb, false, device)?,
            compress: ConvBlock::new(&mut other, "neck.compress", &mut rng, cb, cb, false, device)?,
            pool,
        };

        let mut stages = Vec::with_capacity(STAGES);
        for s in (0..STAGES).rev() {
            let cin = if s == STAGES - 1 { cb } else { ch[s + 1] };
            let name = format!("decoder.s{}", s + 1);
            stages.push(DecoderStage {
                entry: ConvBlock::new(&mut other, &format!("{name}.entry"), &mut rng, cin, ch[s], false, device)?,
                refine: ConvBlock::new(&mut other, &format!("{name}.refine"), &mut rng, ch[s], ch[s], false, device)?,
                head: other.conv(&format!("{name}.head"), &mut rng, (ch[s], ch[s], 1), 1, false, device)?,
            });
        }
        let upsample = (0..STAGES - 1)
            .map(|s| {
                resize_matrix(
                    ResizeKind::Bilinear,
                    (sizes[s + 1], sizes[s + 1]),
                    (sizes[s], sizes[s]),
                    device,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            config,
            device: device.clone(),
            encoder,
            projector: Projector { blocks },
            neck,
            decoder: Decoder { stages, upsample },
            projector_params,
            other_params: other,
            sizes,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// `(h, w, c)` per stage.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        (0..STAGES)
            .map(|s| (self.sizes[s], self.sizes[s], self.config.stage_channels[s]))
            .collect()
    }

    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        self.encoder.encode(images)
    }

    pub fn project(&self, pyramid: &FeaturePyramid) -> Result<ProjectedPyramid> {
        let maps = pyramid
            .maps
            .iter()
            .zip(&self.projector.blocks)
            .map(|(m, blocks)| {
                let mut x = m.tensor.clone();
                for block in blocks {
                    x = (&x + block.forward(&x, true)?)?;
                }
                Ok(x)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProjectedPyramid { maps })
    }

    pub fn bottleneck(&self, projected: &ProjectedPyramid) -> Result<BottleneckFeatures> {
        if projected.maps.len() != STAGES {
            return Err(Error::ShapeMismatch(format!(
                "expected {STAGES} projected stages, got {}",
                projected.maps.len()
            )));
        }
        let deepest = self.sizes[STAGES - 1];
        let pooled = projected
            .maps
            .iter()
            .zip(&self.neck.pool)
            .map(|(m, pool)| resize(m, pool, (deepest, deepest)))
            .collect::<Result<Vec<_>>>()?;
        let fused = Tensor::cat(&pooled, 1)?;
        let x = self.neck.fuse.forward(&fused, true)?;
        let spatial = self.neck.compress.forward(&x, false)?;
        let global = l2_normalize(&spatial.mean(D::Minus1)?.mean(D::Minus1)?, 1)?;
        Ok(BottleneckFeatures { spatial, global })
    }

    pub fn decode(&self, bottleneck: &BottleneckFeatures) -> Result<FeaturePyramid> {
        let strides = self.config.strides();
        let mut x = bottleneck.spatial.clone();
        let mut maps = Vec::with_capacity(STAGES);
        for (i, stage) in self.decoder.stages.iter().enumerate() {
            let s = STAGES - 1 - i;
            if s < STAGES - 1 {
                x = resize(&x, &self.decoder.upsample[s], (self.sizes[s], self.sizes[s]))?;
            }
            x = stage.entry.forward(&x, true)?;
            x = stage.refine.forward(&x, true)?;
            maps.push(FeatureMap {
                stage: s + 1,
                stride: strides[s],
                tensor: stage.head.forward(&x)?,
            });
        }
        maps.reverse();
        Ok(FeaturePyramid { maps })
    }

    pub fn forward(&self, images: &Tensor) -> Result<ForwardOutput> {
        let encoder = self.encode(images)?;
        let projected = self.project(&encoder)?;
        let bottleneck = self.bottleneck(&projected)?;
        let decoder = self.decode(&bottleneck)?;
        Ok(ForwardOutput {
            encoder,
            projected,
            bottleneck,
            decoder,
        })
    }

    pub fn forward_images(&self, images: &[&Image]) -> Result<ForwardOutput> {
        self.forward(&images_to_tensor(images, &self.device)?)
    }

    pub(crate) fn projector_vars(&self) -> Vec<candle_core::Var> {
        self.projector_params.var_list()
    }

    pub(crate) fn other_vars(&self) -> Vec<candle_core::Var> {
        self.other_params.var_list()
    }

    pub fn projector_parameter_count(&self) -> usize {
        self.projector_params.parameter_count()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.projector_params.parameter_count() + self.other_params.parameter_count()
    }

    /// Named trainable tensors, projector first.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.projector_params
            .vars()
            .chain(self.other_params.vars())
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Deep copy of every trainable tensor.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.projector_params
            .vars()
            .chain(self.other_params.vars())
            .map(|(_, v)| Ok(v.as_tensor().copy()?))
            .collect()
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        let vars: Vec<_> = self.projector_params.vars().chain(self.other_params.vars()).collect();
        if vars.len() != snapshot.len() {
            return Err(Error::ShapeMismatch(format!(
                "snapshot has {} tensors, model has {}",
                snapshot.len(),
                vars.len()
            )));
        }
        for ((_, var), t) in vars.into_iter().zip(snapshot) {
            var.set(t)?;
        }
        Ok(())
    }

    /// Overwrites trainable tensors by name; every parameter must be present.
    pub fn load_named(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.projector_params.vars().chain(self.other_params.vars()) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// SHA-256 over all trainable parameter bytes in declaration order.
    pub fn parameter_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_parameters() {
            hasher.update(name.as_bytes());
            let v: Vec<f32> = t.flatten_all()?.to_vec1()?;
            for x in v {
                hasher.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}
