use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::{aupro, auroc, pixel_auroc, v_measure, DEFAULT_FPR_LIMIT, DEFAULT_THRESHOLDS};
use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::model::Backbone;
use crate::pseudo::{fit_kmeans, KMeansOptions};
use crate::scoring::{score_batch, AnomalyMap, ScoreMap, DEFAULT_SIGMA};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub i_auroc: Option<f64>,
    pub p_auroc: Option<f64>,
    pub pro: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub test: usize,
    pub anomalous: usize,
    pub normal: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<String, ClassMetrics>,
    /// Unweighted mean over the classes where each metric is defined.
    pub mean: ClassMetrics,
    pub v_measure: Option<f64>,
    pub v_measure_definition: String,
    pub config_hash: String,
    pub sample_counts: BTreeMap<String, SampleCounts>,
}

impl MetricsReport {
    /// One row per class and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("class,i_auroc,p_auroc,pro\n");
        let rows = self.per_class.iter().map(|(k, v)| (k.as_str(), v)).chain([("mean", &self.mean)]);
        for (name, m) in rows {
            let _ = writeln!(out, "{name},{},{},{}", cell(m.i_auroc), cell(m.p_auroc), cell(m.pro));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub sigma: f64,
    pub batch_size: usize,
    pub fpr_limit: f64,
    pub thresholds: usize,
    /// Replace predicted maps with the ground-truth masks (sanity hook).
    pub masks_as_maps: bool,
    pub cluster_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            batch_size: 16,
            fpr_limit: DEFAULT_FPR_LIMIT,
            thresholds: DEFAULT_THRESHOLDS,
            masks_as_maps: false,
            cluster_seed: 0,
        }
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mask_map(mask: &Mask) -> ScoreMap {
    let data = mask.data().iter().map(|&v| f64::from(v.min(1))).collect();
    ScoreMap::new(mask.height(), mask.width(), data).expect("mask shape")
}

fn absent<T>(class: &str, metric: &str, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{metric} undefined for class {class}: {e}");
            None
        }
    }
}

/// Builds the report from per-test-sample maps and global vectors, both in
/// `index.test_indices()` order.
pub fn report_from_scores(
    index: &DatasetIndex,
    maps: &[AnomalyMap],
    globals: &[Vec<f64>],
    config_hash: &str,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let test = index.test_indices();
    if test.is_empty() {
        return Err(Error::invalid("the dataset has no test samples"));
    }
    if maps.len() != test.len() || globals.len() != test.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} maps and {} global vectors for {} test samples",
            maps.len(),
            globals.len(),
            test.len()
        )));
    }
    let mut per_class = BTreeMap::new();
    let mut sample_counts = BTreeMap::new();
    for (c, name) in index.class_names().iter().enumerate() {
        let members: Vec<usize> = (0..test.len())
            .filter(|&k| index.sample(test[k]).class_id == c)
            .collect();
        let labels: Vec<bool> = members.iter().map(|&k| index.sample(test[k]).is_anomalous).collect();
        let anomalous = labels.iter().filter(|&&l| l).count();
        sample_counts.insert(
            name.clone(),
            SampleCounts {
                test: members.len(),
                anomalous,
                normal: members.len() - anomalous,
            },
        );
        if members.is_empty() {
            log::warn!("class {name} has no test samples");
            per_class.insert(name.clone(), ClassMetrics::default());
            continue;
        }
        let masks: Vec<Mask> = members.iter().map(|&k| index.sample(test[k]).mask_or_empty()).collect();
        let class_maps: Vec<ScoreMap> = if opts.masks_as_maps {
            masks.iter().map(mask_map).collect()
        } else {
            members.iter().map(|&k| maps[k].map.clone()).collect()
        };
        let scores: Vec<f64> = class_maps.iter().map(ScoreMap::max).collect();
        per_class.insert(
            name.clone(),
            ClassMetrics {
                i_auroc: absent(name, "I-AUROC", auroc(&scores, &labels)),
                p_auroc: absent(name, "P-AUROC", pixel_auroc(&class_maps, &masks)),
                pro: absent(name, "PRO", aupro(&class_maps, &masks, opts.fpr_limit, opts.thresholds)),
            },
        );
    }
    let mean = ClassMetrics {
        i_auroc: mean_of(per_class.values().map(|m| m.i_auroc)),
        p_auroc: mean_of(per_class.values().map(|m| m.p_auroc)),
        pro: mean_of(per_class.values().map(|m| m.pro)),
    };

    let classes: Vec<usize> = test.iter().map(|&i| index.sample(i).class_id).collect();
    let k = index.class_count();
    let v = if k >= 2 && globals.len() >= k {
        let model = fit_kmeans(globals, k, opts.cluster_seed, KMeansOptions::default())?;
        Some(v_measure(&model.predict(globals), &classes)?)
    } else {
        None
    };
    Ok(MetricsReport {
        per_class,
        mean,
        v_measure: v,
        v_measure_definition: "V-measure of k-means (k = class count) clusters of test-time global \
                               bottleneck vectors against true class ids"
            .into(),
        config_hash: config_hash.to_string(),
        sample_counts,
    })
}

/// Per-test-sample anomaly maps and global vectors, in test order.
pub fn score_test_set(
    model: &Backbone,
    index: &DatasetIndex,
    opts: &EvalOptions,
) -> Result<(Vec<AnomalyMap>, Vec<Vec<f64>>)> {
    let images: Vec<&Image> = index.test_indices().into_iter().map(|i| &index.sample(i).image).collect();
    let mut maps = Vec::with_capacity(images.len());
    let mut globals = Vec::with_capacity(images.len());
    for chunk in images.chunks(opts.batch_size.max(1)) {
        let out = model.forward_images(chunk)?;
        maps.extend(score_batch(&out, model.config().resolution, opts.sigma)?);
        let g: Vec<Vec<f64>> = out.bottleneck.global.to_dtype(DType::F64)?.to_vec2()?;
        globals.extend(g);
    }
    Ok((maps, globals))
}

/// Scores every test sample with `model` and computes the full report.
pub fn evaluate(model: &Backbone, index: &DatasetIndex, opts: &EvalOptions) -> Result<MetricsReport> {
    let (maps, globals) = score_test_set(model, index, opts)?;
    report_from_scores(index, &maps, &globals, &model.config().config_hash(), opts)
}
