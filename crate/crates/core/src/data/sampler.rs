use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::{augment_with, AugmentConfig};
use super::{DatasetIndex, ImageSample, LabelSource};
use crate::error::{Error, Result};

/// Anchors, their augmented views and the labels used for contrast.
///
/// Row `i` of `views` is an augmented copy of row `i` of `anchors`.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub anchors: Vec<ImageSample>,
    pub augmented_views: Vec<ImageSample>,
    pub batch_labels: Vec<usize>,
    /// Dataset indices of the anchors, for diagnostics.
    pub source_indices: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn batch_size(&self) -> usize {
        self.anchors.len()
    }

    /// Labels for all `2B` images: anchors first, then views.
    pub fn full_labels(&self) -> Vec<usize> {
        let mut labels = self.batch_labels.clone();
        labels.extend_from_slice(&self.batch_labels);
        labels
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageSample> {
        self.anchors.iter().chain(&self.augmented_views)
    }

    pub fn describe(&self) -> String {
        self.anchors
            .iter()
            .map(|s| s.source_path.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Stratified draw of `b` pool entries.
///
/// At least two labels are represented whenever the pool holds two, and every
/// represented label gets at least two anchors when it has that many samples.
pub fn stratified_draw(
    pool: &[(usize, usize)],
    b: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    if pool.is_empty() {
        return Err(Error::invalid("cannot sample a batch from an empty pool"));
    }
    if b < 2 {
        return Err(Error::invalid("batch size must be at least 2"));
    }
    if b > pool.len() {
        return Err(Error::invalid(format!(
            "batch size {b} exceeds the {} available training samples",
            pool.len()
        )));
    }

    let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for &entry in pool {
        groups.entry(entry.1).or_default().push(entry);
    }
    for members in groups.values_mut() {
        members.shuffle(rng);
    }

    let mut labels: Vec<usize> = groups.keys().copied().collect();
    labels.shuffle(rng);
    // labels that can supply two anchors go first
    labels.sort_by_key(|l| usize::from(groups[l].len() < 2));
    let wanted = labels.len().min((b / 2).max(2));
    let chosen = &labels[..wanted];

    let mut taken: BTreeMap<usize, usize> = chosen.iter().map(|&l| (l, 1)).collect();
    let mut total = wanted;
    for &l in chosen {
        if total < b && groups[&l].len() >= 2 {
            taken.insert(l, 2);
            total += 1;
        }
    }
    // fill the rest proportionally to what remains in the chosen labels,
    // then spill over into unchosen labels
    let order: Vec<usize> = chosen.iter().chain(&labels[wanted..]).copied().collect();
    for pass in [&order[..wanted], &order[..]] {
        while total < b {
            let remaining: Vec<(usize, usize)> = pass
                .iter()
                .map(|l| (*l, groups[l].len() - taken.get(l).copied().unwrap_or(0)))
                .filter(|(_, r)| *r > 0)
                .collect();
            let free: usize = remaining.iter().map(|(_, r)| r).sum();
            if free == 0 {
                break;
            }
            let mut pick = rng.random_range(0..free);
            for (l, r) in remaining {
                if pick < r {
                    *taken.entry(l).or_insert(0) += 1;
                    total += 1;
                    break;
                }
                pick -= r;
            }
        }
    }

    let mut out: Vec<(usize, usize)> = taken
        .iter()
        .flat_map(|(l, &n)| groups[l][..n].iter().copied())
        .collect();
    out.shuffle(rng);
    Ok(out)
}

/// Seeded class-aware sampler; one instance per training loop.
#[derive(Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    label_source: LabelSource,
    augment: AugmentConfig,
}

impl BatchSampler {
    pub fn new(label_source: LabelSource, augment: AugmentConfig, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            label_source,
            augment,
        }
    }

    /// Draws a batch of `b` anchors from the dataset entries listed in `pool`.
    pub fn sample(&mut self, index: &DatasetIndex, pool: &[usize], b: usize) -> Result<ContrastiveBatch> {
        let labeled = labeled_pool(index, pool, self.label_source)?;
        let drawn = stratified_draw(&labeled, b, &mut self.rng)?;
        let mut batch = ContrastiveBatch {
            anchors: Vec::with_capacity(b),
            augmented_views: Vec::with_capacity(b),
            batch_labels: Vec::with_capacity(b),
            source_indices: Vec::with_capacity(b),
        };
        for (i, label) in drawn {
            let anchor = index.sample(i);
            let view_seed: u64 = self.rng.random();
            batch.augmented_views.push(augment_with(anchor, &self.augment, view_seed));
            batch.anchors.push(anchor.clone());
            batch.batch_labels.push(label);
            batch.source_indices.push(i);
        }
        Ok(batch)
    }
}

pub(crate) fn labeled_pool(
    index: &DatasetIndex,
    pool: &[usize],
    source: LabelSource,
) -> Result<Vec<(usize, usize)>> {
    pool.iter()
        .map(|&i| {
            let s = index.sample(i);
            s.label(source).map(|l| (i, l)).ok_or_else(|| {
                Error::invalid(format!("sample {} has no pseudo-class label", s.source_path))
            })
        })
        .collect()
}

/// Draws a class-aware batch from every train sample of `index`.
pub fn sample_batch(
    index: &DatasetIndex,
    b: usize,
    label_source: LabelSource,
    seed: u64,
) -> Result<ContrastiveBatch> {
    let pool = index.train_indices();
    BatchSampler::new(label_source, AugmentConfig::default(), seed).sample(index, &pool, b)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::data::Split;
    use crate::image::Image;

    fn index(per_class: &[usize]) -> DatasetIndex {
        let mut samples = Vec::new();
        for (class, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                samples.push(ImageSample {
                    image: Image::filled(4, 4, [class as f32 / 4.0; 3]),
                    class_id: class,
                    pseudo_class_id: None,
                    split: Split::Train,
                    is_anomalous: false,
                    mask: None,
                    source_path: format!("c{class}/{i}.png"),
                });
            }
        }
        let names = (0..per_class.len()).map(|c| format!("c{c}")).collect();
        DatasetIndex::new(samples, names).unwrap()
    }

    fn label_counts(labels: &[usize]) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &l in labels {
            *m.entry(l).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn three_classes_batch_of_sixteen() {
        let idx = index(&[20, 20, 20]);
        let batch = sample_batch(&idx, 16, LabelSource::Raw, 0).unwrap();
        assert_eq!(batch.batch_size(), 16);
        assert_eq!(batch.images().count(), 32);
        let counts = label_counts(&batch.batch_labels);
        assert!(counts.len() >= 2);
        assert!(counts.values().all(|&n| n >= 2));
    }

    #[test]
    fn single_class_batch() {
        let idx = index(&[6]);
        let batch = sample_batch(&idx, 4, LabelSource::Raw, 1).unwrap();
        assert!(batch.batch_labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn two_by_two_takes_everything() {
        let idx = index(&[2, 2]);
        for seed in 0..20 {
            let batch = sample_batch(&idx, 4, LabelSource::Raw, seed).unwrap();
            assert_eq!(label_counts(&batch.batch_labels), BTreeMap::from([(0, 2), (1, 2)]));
            let distinct: BTreeSet<_> = batch.source_indices.iter().collect();
            assert_eq!(distinct.len(), 4);
        }
    }

    #[test]
    fn views_match_anchor_labels() {
        let idx = index(&[5, 7, 3]);
        let batch = sample_batch(&idx, 8, LabelSource::Raw, 9).unwrap();
        for (a, v) in batch.anchors.iter().zip(&batch.augmented_views) {
            assert_eq!(a.class_id, v.class_id);
        }
        assert_eq!(batch.full_labels().len(), 16);
    }

    #[test]
    fn hundred_batches_always_mix_labels() {
        let idx = index(&[10, 3, 8]);
        let mut sampler = BatchSampler::new(LabelSource::Raw, AugmentConfig::identity(), 42);
        let pool = idx.train_indices();
        for _ in 0..100 {
            let batch = sampler.sample(&idx, &pool, 6).unwrap();
            assert!(label_counts(&batch.batch_labels).len() >= 2);
        }
    }

    #[test]
    fn batch_of_two_spans_two_labels() {
        let idx = index(&[5, 5, 5]);
        for seed in 0..20 {
            let batch = sample_batch(&idx, 2, LabelSource::Raw, seed).unwrap();
            assert_eq!(label_counts(&batch.batch_labels).len(), 2);
        }
    }

    #[test]
    fn errors() {
        let idx = index(&[2, 1]);
        assert!(sample_batch(&idx, 4, LabelSource::Raw, 0).is_err());
        assert!(sample_batch(&idx, 1, LabelSource::Raw, 0).is_err());
        assert!(sample_batch(&idx, 2, LabelSource::Pseudo, 0).is_err());
        assert!(stratified_draw(&[], 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn pseudo_labels_drive_the_batch() {
        let idx = index(&[4, 4]).with_pseudo_labels(&[1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        let batch = sample_batch(&idx, 4, LabelSource::Pseudo, 3).unwrap();
        for (a, &l) in batch.anchors.iter().zip(&batch.batch_labels) {
            assert_eq!(a.pseudo_class_id, Some(l));
        }
    }
}
