//! Pseudo-class labels from k-means over frozen-extractor features.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{images_to_tensor, Backbone, Encoder, STAGES};

/// A frozen network whose deepest feature map is used for clustering.
pub trait FeatureExtractor {
    /// `(N, C, h, w)` final-stage features for an `(N, 3, H, W)` batch.
    fn final_stage(&self, images: &Tensor) -> Result<Tensor>;
}

impl FeatureExtractor for Encoder {
    fn final_stage(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.encode(images)?.maps[STAGES - 1].tensor.clone())
    }
}

impl FeatureExtractor for Backbone {
    fn final_stage(&self, images: &Tensor) -> Result<Tensor> {
        self.encoder().final_stage(images)
    }
}

/// One L2-normalized, spatially pooled final-stage vector per image.
pub fn extract_clustering_features(
    images: &[&Image],
    extractor: &dyn FeatureExtractor,
    device: &Device,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Err(Error::invalid("no samples to extract features from"));
    }
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let feats = extractor.final_stage(&images_to_tensor(chunk, device)?)?;
        let pooled: Vec<Vec<f64>> = feats.mean((2, 3))?.to_dtype(DType::F64)?.to_vec2()?;
        rows.extend(pooled.into_iter().map(normalized));
    }
    Ok(rows)
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centers: Vec<Vec<f64>>,
    pub seed: u64,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    /// Nearest center; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (c, center) in self.centers.iter().enumerate() {
            let d = sq_dist(x, center);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Vec<usize> {
        features.iter().map(|x| self.nearest(x).0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

fn check_features(features: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::invalid("number of clusters must be at least 1"));
    }
    if features.len() < k {
        return Err(Error::invalid(format!(
            "{} clusters requested but only {} points (need n >= K_C)",
            k,
            features.len()
        )));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::ShapeMismatch("feature rows differ in length".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features contain non-finite values"));
    }
    Ok(d)
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn fit_kmeans(features: &[Vec<f64>], k: usize, seed: u64, opts: KMeansOptions) -> Result<ClusterModel> {
    check_features(features, k)?;
    let n = features.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = features.iter().map(|x| sq_dist(x, &features[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
            }
            pick
        } else {
            // all remaining points coincide with a center
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, x) in features.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &features[next]));
        }
    }
    let mut model = ClusterModel {
        centers: chosen.iter().map(|&i| features[i].clone()).collect(),
        seed,
        inertia: 0.0,
        iterations: 0,
        inertia_history: Vec::new(),
    };

    let mut labels = vec![0usize; n];
    let mut dists = vec![0f64; n];
    for iter in 0..opts.max_iter.max(1) {
        assign_all(&model, features, &mut labels, &mut dists);
        reseed_empty(&mut model, features, &mut labels, &mut dists);
        model.inertia_history.push(dists.iter().sum());
        model.iterations = iter + 1;

        let shift = update_centers(&mut model, features, &labels);
        if shift < opts.tol {
            break;
        }
    }
    assign_all(&model, features, &mut labels, &mut dists);
    model.inertia = dists.iter().sum();
    Ok(model)
}

fn assign_all(model: &ClusterModel, features: &[Vec<f64>], labels: &mut [usize], dists: &mut [f64]) {
    for (i, x) in features.iter().enumerate() {
        let (c, d) = model.nearest(x);
        labels[i] = c;
        dists[i] = d;
    }
}

/// Moves each empty cluster onto the point farthest from its own center,
/// taken from a cluster that keeps at least one member.
fn reseed_empty(model: &mut ClusterModel, features: &[Vec<f64>], labels: &mut [usize], dists: &mut [f64]) {
    let k = model.k();
    loop {
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let donor = (0..features.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            })
            .expect("n >= k guarantees a cluster with two members");
        model.centers[empty] = features[donor].clone();
        labels[donor] = empty;
        dists[donor] = 0.0;
    }
}

fn update_centers(model: &mut ClusterModel, features: &[Vec<f64>], labels: &[usize]) -> f64 {
    let d = model.dim();
    let mut sums = vec![vec![0f64; d]; model.k()];
    let mut counts = vec![0usize; model.k()];
    for (x, &l) in features.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    let mut shift = 0f64;
    for (c, (sum, count)) in sums.into_iter().zip(counts).enumerate() {
        if count == 0 {
            continue;
        }
        let mean: Vec<f64> = sum.into_iter().map(|s| s / count as f64).collect();
        shift = shift.max(sq_dist(&mean, &model.centers[c]).sqrt());
        model.centers[c] = mean;
    }
    shift
}

/// Attaches nearest-center labels to the train samples; `features` must be
/// in train order.
pub fn assign_pseudo_labels(
    index: &DatasetIndex,
    model: &ClusterModel,
    features: &[Vec<f64>],
) -> Result<DatasetIndex> {
    if features.len() != index.train_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} train samples",
            features.len(),
            index.train_count()
        )));
    }
    if features.iter().any(|f| f.len() != model.dim()) {
        return Err(Error::ShapeMismatch("feature dimension differs from the cluster centers".into()));
    }
    index.with_pseudo_labels(&model.predict(features))
}

/// Convenience: extract train features with `extractor`, fit `k` clusters
/// and label the index.
pub fn cluster_dataset(
    index: &DatasetIndex,
    extractor: &dyn FeatureExtractor,
    device: &Device,
    k: usize,
    seed: u64,
) -> Result<(DatasetIndex, ClusterModel)> {
    let images: Vec<&Image> = index
        .train_indices()
        .into_iter()
        .map(|i| &index.sample(i).image)
        .collect();
    if k > images.len() {
        return Err(Error::invalid(format!(
            "--kc {k} exceeds the {} train samples",
            images.len()
        )));
    }
    let features = extract_clustering_features(&images, extractor, device, 32)?;
    let model = fit_kmeans(&features, k, seed, KMeansOptions::default())?;
    let labeled = assign_pseudo_labels(index, &model, &features)?;
    Ok((labeled, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..12)
            .map(|i| {
                let c = if i % 2 == 0 { 0.0 } else { 10.0 };
                vec![c + rng.random_range(-0.07..0.07), c + rng.random_range(-0.07..0.07)]
            })
            .collect()
    }

    #[test]
    fn one_point_per_cluster_has_zero_inertia() {
        let pts = vec![vec![0.0, 1.0], vec![3.0, 1.0], vec![-2.0, 5.0]];
        let m = fit_kmeans(&pts, 3, 9, KMeansOptions::default()).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut labels = m.predict(&pts);
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2]);
    }

    #[test]
    fn two_blobs() {
        let pts = blobs();
        let m = fit_kmeans(&pts, 2, 1, KMeansOptions::default()).unwrap();
        let mut centers = m.centers.clone();
        centers.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!(centers[0].iter().all(|v| v.abs() < 0.2));
        assert!(centers[1].iter().all(|v| (v - 10.0).abs() < 0.2));
        assert!(m.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert_eq!(m, fit_kmeans(&pts, 2, 1, KMeansOptions::default()).unwrap());
    }

    #[test]
    fn duplicates_and_errors() {
        let pts = vec![vec![1.0, 1.0]; 4];
        let m = fit_kmeans(&pts, 2, 0, KMeansOptions::default()).unwrap();
        assert_eq!(m.inertia, 0.0);
        assert!(fit_kmeans(&pts, 5, 0, KMeansOptions::default()).is_err());
        assert!(fit_kmeans(&pts, 0, 0, KMeansOptions::default()).is_err());
        assert!(fit_kmeans(&[vec![1.0], vec![1.0, 2.0]], 1, 0, KMeansOptions::default()).is_err());
    }

    #[test]
    fn nearest_ties_prefer_lowest_index() {
        let m = ClusterModel {
            centers: vec![vec![-1.0], vec![1.0], vec![3.0]],
            seed: 0,
            inertia: 0.0,
            iterations: 0,
            inertia_history: vec![],
        };
        assert_eq!(m.nearest(&[0.0]).0, 0);
        assert_eq!(m.nearest(&[3.0]), (2, 0.0));
    }
}
