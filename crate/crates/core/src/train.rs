//! The optimization loop: class-aware batches, two learning-rate groups,
//! validation-based early stopping and run artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_with, AugmentConfig, BatchSampler, DatasetIndex, ImageSample, LabelSource};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{total_loss, LossConfig, LossTerms, Window};
use crate::model::{save_checkpoint, Backbone, BackboneConfig, CheckpointManifest};
use crate::seed::derive_seed;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub temperature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub window: Window,
    pub stages_used: Vec<usize>,
    /// Candidate positions kept per local anchor.
    pub negative_cap: usize,
    pub lr_projector: f64,
    pub lr_other: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Optimizer steps per epoch; `None` means one pass over the train pool.
    pub steps_per_epoch: Option<usize>,
    pub grad_clip: f64,
    pub validation_fraction: f64,
    pub label_source: LabelSource,
    pub seed: u64,
    pub resolution: usize,
    pub backbone: BackboneConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            batch_size: 16,
            temperature: loss.temperature,
            lambda1: loss.lambda1,
            lambda2: loss.lambda2,
            window: loss.window,
            stages_used: loss.stages_used,
            negative_cap: loss.negative_cap,
            lr_projector: 1e-3,
            lr_other: 5e-3,
            max_epochs: 100,
            patience: 10,
            steps_per_epoch: None,
            grad_clip: 5.0,
            validation_fraction: 0.1,
            label_source: LabelSource::Raw,
            seed: 0,
            resolution: 64,
            backbone: BackboneConfig::desk(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            window: self.window,
            stages_used: self.stages_used.clone(),
            negative_cap: self.negative_cap,
        }
    }

    /// The backbone configuration at this run's resolution.
    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            resolution: self.resolution,
            ..self.backbone.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size: must be at least 2"));
        }
        if self.patience < 1 {
            return Err(Error::invalid("patience: must be at least 1"));
        }
        if self.max_epochs < 1 {
            return Err(Error::invalid("max_epochs: must be at least 1"));
        }
        for (name, v) in [("lr_projector", self.lr_projector), ("lr_other", self.lr_other)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name}: must be positive")));
            }
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::invalid("grad_clip: must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("validation_fraction: must be in (0, 1)"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("steps_per_epoch: must be positive"));
        }
        self.loss_config().validate()?;
        self.backbone_config().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub terms: LossTerms,
    /// Set on the last step of each epoch.
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub initial_val_loss: Option<f64>,
    pub stopped_early: bool,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    /// Log as CSV: `step,epoch,l_kd,l_lcl,l_gcl,l_total,val_loss`.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,epoch,l_kd,l_lcl,l_gcl,l_total,val_loss\n");
        for r in &self.history {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let t = r.terms;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{val}",
                r.step, r.epoch, t.kd, t.local, t.global, t.total
            );
        }
        out
    }
}

/// Class-stratified train/validation split of the train samples (by raw
/// class id), deterministic in `seed`.
pub fn split_validation(index: &DatasetIndex, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = index.train_indices();
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for c in 0..index.class_count() {
        let mut members: Vec<usize> = train
            .iter()
            .copied()
            .filter(|&i| index.sample(i).class_id == c)
            .collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let n_val = if n >= 2 {
            ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        val.extend_from_slice(&members[..n_val]);
        fit.extend_from_slice(&members[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

/// Un-augmented validation anchors, each with one fixed-seed view.
pub struct ValidationSet {
    anchors: Vec<ImageSample>,
    views: Vec<ImageSample>,
    labels: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl ValidationSet {
    pub fn new(
        index: &DatasetIndex,
        pool: &[usize],
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::invalid("validation set is empty"));
        }
        let mut set = ValidationSet {
            anchors: Vec::new(),
            views: Vec::new(),
            labels: Vec::new(),
            batch_size: config.batch_size,
            seed,
        };
        for &i in pool {
            let s = index.sample(i);
            let label = s.label(config.label_source).ok_or_else(|| {
                Error::invalid(format!("sample {} has no pseudo-class label", s.source_path))
            })?;
            set.views.push(augment_with(s, &config.augment, derive_seed(seed, &s.source_path)));
            set.anchors.push(s.clone());
            set.labels.push(label);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Mean total loss over the validation batches.
    pub fn loss(&self, model: &Backbone, loss: &LossConfig) -> Result<f64> {
        let mut sum = 0.0;
        let mut batches = 0;
        for (k, start) in (0..self.len()).step_by(self.batch_size).enumerate() {
            let end = (start + self.batch_size).min(self.len());
            let images: Vec<&Image> = self.anchors[start..end]
                .iter()
                .chain(&self.views[start..end])
                .map(|s| &s.image)
                .collect();
            let mut labels = self.labels[start..end].to_vec();
            labels.extend_from_slice(&self.labels[start..end]);
            let out = model.forward_images(&images)?;
            let (_, terms) = total_loss(&out, &labels, loss, derive_seed(self.seed, &format!("local/{k}")))?;
            sum += terms.total;
            batches += 1;
        }
        Ok(sum / batches as f64)
    }
}

/// Mean validation loss of `model` on the held-out split implied by `config`.
pub fn validate(model: &Backbone, index: &DatasetIndex, config: &TrainConfig) -> Result<f64> {
    let (_, val) = split_validation(index, config.validation_fraction, derive_seed(config.seed, "split"));
    ValidationSet::new(index, &val, config, derive_seed(config.seed, "validation"))?
        .loss(model, &config.loss_config())
}

pub struct TrainOutcome {
    pub model: Backbone,
    pub state: TrainState,
}

fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0f64;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += f64::from(g.sqr()?.sum_all()?.to_scalar::<f32>()?);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v) {
                grads.insert(v, (g * scale)?);
            }
        }
    }
    Ok(norm)
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    let params = ParamsAdamW {
        lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    Ok(AdamW::new(vars, params)?)
}

/// Trains a fresh model on the train split of `index` and returns the
/// best-validation weights.
pub fn train(config: &TrainConfig, index: &DatasetIndex, device: &Device) -> Result<TrainOutcome> {
    config.validate()?;
    let (pool, val_pool) = split_validation(index, config.validation_fraction, derive_seed(config.seed, "split"));
    let validation = ValidationSet::new(index, &val_pool, config, derive_seed(config.seed, "validation"))?;
    if pool.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "batch_size: {} exceeds the {} training samples left after the validation split",
            config.batch_size,
            pool.len()
        )));
    }
    let loss_cfg = config.loss_config();
    let model = Backbone::new(config.backbone_config(), derive_seed(config.seed, "init"), device)?;
    let encoder_hash = model.encoder().parameter_hash()?;
    let mut sampler = BatchSampler::new(
        config.label_source,
        config.augment.clone(),
        derive_seed(config.seed, "sampler"),
    );
    let projector_vars = model.projector_vars();
    let other_vars = model.other_vars();
    let all_vars: Vec<Var> = projector_vars.iter().chain(&other_vars).cloned().collect();
    let mut opt_projector = adam(projector_vars, config.lr_projector)?;
    let mut opt_other = adam(other_vars, config.lr_other)?;
    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or_else(|| pool.len().div_ceil(config.batch_size));
    let local_seed = derive_seed(config.seed, "local");

    let mut state = TrainState {
        initial_val_loss: Some(validation.loss(&model, &loss_cfg)?),
        ..Default::default()
    };
    let mut best = model.snapshot()?;
    for epoch in 0..config.max_epochs {
        state.epoch = epoch;
        for _ in 0..steps_per_epoch {
            let batch = sampler.sample(index, &pool, config.batch_size)?;
            let images: Vec<&Image> = batch.images().map(|s| &s.image).collect();
            let out = model.forward_images(&images)?;
            let labels = batch.full_labels();
            let step_seed = derive_seed(local_seed, &state.step.to_string());
            let (loss, terms) = total_loss(&out, &labels, &loss_cfg, step_seed)?;
            if !terms.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: state.step,
                    samples: batch.describe(),
                });
            }
            let mut grads = loss.backward()?;
            clip_gradients(&mut grads, &all_vars, config.grad_clip)?;
            opt_projector.step(&grads)?;
            opt_other.step(&grads)?;
            state.history.push(StepRecord {
                step: state.step,
                epoch,
                terms,
                val_loss: None,
            });
            state.step += 1;
        }
        let val = validation.loss(&model, &loss_cfg)?;
        if let Some(last) = state.history.last_mut() {
            last.val_loss = Some(val);
        }
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                samples: "validation set".into(),
            });
        }
        log::info!("epoch {epoch}: validation loss {val:.6}");
        if state.best_val_loss.is_none_or(|b| val < b) {
            state.best_val_loss = Some(val);
            state.best_epoch = epoch;
            state.epochs_since_best = 0;
            best = model.snapshot()?;
        } else {
            state.epochs_since_best += 1;
            if state.epochs_since_best >= config.patience {
                state.stopped_early = true;
                break;
            }
        }
    }
    model.restore(&best)?;
    if model.encoder().parameter_hash()? != encoder_hash {
        return Err(Error::invalid("encoder weights changed during training"));
    }
    Ok(TrainOutcome { model, state })
}

/// Writes `checkpoint.bin`, `config.json` and `train_log.csv` into `dir`.
pub fn save_run(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest::for_model(&outcome.model, outcome.state.step, config.seed)?;
    save_checkpoint(&outcome.model, &manifest, &dir.join(CHECKPOINT_FILE))?;
    let resolved = TrainConfig {
        backbone: config.backbone_config(),
        ..config.clone()
    };
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(CONFIG_FILE, serde_json::to_string_pretty(&resolved)? + "\n")?;
    write(TRAIN_LOG_FILE, outcome.state.log_csv())?;
    Ok(vec![CHECKPOINT_FILE.into(), CONFIG_FILE.into(), TRAIN_LOG_FILE.into()])
}

/// Scalar value of a loss tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, DatasetIndex};

    fn tiny_index(per_class: usize) -> DatasetIndex {
        let mut samples = Vec::new();
        for c in 0..2 {
            for i in 0..per_class {
                let v = 0.2 + 0.5 * c as f32 + 0.01 * i as f32;
                samples.push(ImageSample {
                    image: Image::filled(16, 16, [v, 1.0 - v, 0.3]),
                    class_id: c,
                    pseudo_class_id: None,
                    split: Split::Train,
                    is_anomalous: false,
                    mask: None,
                    source_path: format!("c{c}/train/good/{i}.png"),
                });
            }
        }
        DatasetIndex::new(samples, vec!["a".into(), "b".into()]).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_epochs: 2,
            patience: 1,
            resolution: 16,
            backbone: BackboneConfig {
                stem_downsamples: 1,
                stem_channels: 4,
                stage_channels: [4, 8, 8],
                projector_blocks: 1,
                bottleneck_channels: 8,
                ..BackboneConfig::desk()
            },
            ..Default::default()
        }
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let index = tiny_index(10);
        let (fit, val) = split_validation(&index, 0.1, 3);
        assert_eq!((fit.len(), val.len()), (18, 2));
        assert_eq!(val.iter().map(|&i| index.sample(i).class_id).sum::<usize>(), 1);
        assert_eq!(split_validation(&index, 0.1, 3), (fit, val));
        let (_, none) = split_validation(&tiny_index(1), 0.1, 0);
        assert!(none.is_empty());
    }

    #[test]
    fn config_rejects_bad_fields() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { batch_size: 1, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("batch_size"));
        let bad = TrainConfig { lr_other: 0.0, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("lr_other"));
        assert!(TrainConfig::from_json(r#"{"batch_size": 8}"#).unwrap().batch_size == 8);
        assert!(TrainConfig::from_json(r#"{"batchsize": 8}"#).is_err());
    }

    #[test]
    fn baseline_logs_zero_contrast_terms() {
        let index = tiny_index(6);
        let config = TrainConfig { lambda1: 0.0, lambda2: 0.0, ..tiny_config() };
        let out = train(&config, &index, &Device::Cpu).unwrap();
        assert!(!out.state.history.is_empty());
        for r in &out.state.history {
            assert_eq!((r.terms.local, r.terms.global), (0.0, 0.0));
            assert_eq!(r.terms.total, r.terms.kd);
        }
        let v = validate(&out.model, &index, &config).unwrap();
        assert_eq!(Some(v), out.state.best_val_loss);
    }

    #[test]
    fn runs_are_reproducible() {
        let index = tiny_index(6);
        let a = train(&tiny_config(), &index, &Device::Cpu).unwrap();
        let b = train(&tiny_config(), &index, &Device::Cpu).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.model.parameter_hash().unwrap(), b.model.parameter_hash().unwrap());
    }
}
