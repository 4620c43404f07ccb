//! Training objectives: supervised contrast, local (dense) and global
//! contrast, feature reconstruction, and their weighted total.

mod contrastive;
mod local;
mod window;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use contrastive::{
    cosine_sim, global_cl_loss, supervised_contrastive_loss, GlobalContrast, PairSets,
    SupervisedGlobal,
};
pub use local::{local_cl_loss, local_cl_stage};
pub use window::{select_positive_index, windowed_similarity, Window};

use crate::error::{Error, Result};
use crate::model::{l2_normalize, ForwardOutput, STAGES};

fn default_negative_cap() -> usize {
    1024
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub window: Window,
    /// 1-based stage numbers.
    pub stages_used: Vec<usize>,
    #[serde(default = "default_negative_cap")]
    pub negative_cap: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
            window: Window::Size(1),
            stages_used: vec![1, 2, 3],
            negative_cap: default_negative_cap(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("temperature: must be positive"));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name}: must be non-negative")));
            }
        }
        if let Window::Size(k) = self.window {
            Window::size(k)?;
        }
        if self.stages_used.is_empty() {
            return Err(Error::invalid("stages_used: must not be empty"));
        }
        if let Some(s) = self.stages_used.iter().find(|&&s| s == 0 || s > STAGES) {
            return Err(Error::invalid(format!("stages_used: no stage {s}")));
        }
        if self.negative_cap < 2 {
            return Err(Error::invalid("negative_cap: must be at least 2"));
        }
        Ok(())
    }
}

/// Per stage, mean over positions of `1 - cos(enc, dec)`; summed over stages.
pub fn kd_loss(encoder: &[Tensor], decoder: &[Tensor]) -> Result<Tensor> {
    if encoder.len() != decoder.len() || encoder.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} encoder stages vs {} decoder stages",
            encoder.len(),
            decoder.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (e, d) in encoder.iter().zip(decoder) {
        if e.dims() != d.dims() {
            return Err(Error::ShapeMismatch(format!(
                "reconstruction {:?} vs target {:?}",
                d.dims(),
                e.dims()
            )));
        }
        let cos = (l2_normalize(e, 1)? * l2_normalize(d, 1)?)?.sum(1)?;
        let term = (1.0 - cos.mean_all()?.to_dtype(DType::F64)?)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Logged values of each term; `total` is recomputed from the others.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub kd: f64,
    pub local: f64,
    pub global: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn new(kd: f64, local: f64, global: f64, config: &LossConfig) -> Self {
        Self {
            kd,
            local,
            global,
            total: kd + config.lambda1 * local + config.lambda2 * global,
        }
    }
}

/// `L_kd + λ1·L_local + λ2·L_global` with the default global objective.
pub fn total_loss(
    out: &ForwardOutput,
    labels: &[usize],
    config: &LossConfig,
    seed: u64,
) -> Result<(Tensor, LossTerms)> {
    total_loss_with(out, labels, config, &SupervisedGlobal, seed)
}

/// As [`total_loss`] with a caller-chosen global objective. Terms whose weight
/// is zero are not evaluated and are logged as 0.
pub fn total_loss_with(
    out: &ForwardOutput,
    labels: &[usize],
    config: &LossConfig,
    global: &dyn GlobalContrast,
    seed: u64,
) -> Result<(Tensor, LossTerms)> {
    config.validate()?;
    let kd = kd_loss(&out.encoder.tensors(), &out.decoder.tensors())?;
    let mut total = kd.clone();
    let value = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let mut local_v = 0.0;
    if config.lambda1 > 0.0 {
        let l = local_cl_loss(
            &out.projected.maps,
            labels,
            &config.stages_used,
            config.temperature,
            config.window,
            config.negative_cap,
            seed,
        )?
        .to_dtype(DType::F64)?;
        local_v = value(&l)?;
        total = (total + (l * config.lambda1)?)?;
    }
    let mut global_v = 0.0;
    if config.lambda2 > 0.0 {
        let g = global
            .loss(&out.bottleneck.global, labels, config.temperature)?
            .to_dtype(DType::F64)?;
        global_v = value(&g)?;
        total = (total + (g * config.lambda2)?)?;
    }
    let terms = LossTerms::new(value(&kd)?, local_v, global_v, config);
    Ok((total, terms))
}
