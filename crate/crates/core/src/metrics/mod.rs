//! Detection and localization metrics, plus the cluster-separation score.

mod report;

pub use report::{
    evaluate, report_from_scores, score_test_set, ClassMetrics, EvalOptions, MetricsReport,
    SampleCounts,
};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::scoring::ScoreMap;

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
pub const DEFAULT_THRESHOLDS: usize = 200;

/// Area under the ROC curve as the normalized Mann–Whitney statistic; tied
/// scores count one half.
///
/// Evaluated as an exact integer count, so `auroc(s) + auroc(-s) == 1`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUROC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the positives, with 1-based midranks
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group = (end - start) as u128;
        let positives = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        twice_rank_sum += positives * (2 * start as u128 + group + 1);
        start = end;
    }
    let twice_u = twice_rank_sum - pos * (pos + 1);
    let twice_total = 2 * pos * neg;
    let small = twice_u.min(twice_total - twice_u);
    let small_auc = small as f64 / twice_total as f64;
    Ok(if 2 * twice_u <= twice_total { small_auc } else { 1.0 - small_auc })
}

fn check_pairs(maps: &[ScoreMap], masks: &[Mask]) -> Result<()> {
    if maps.len() != masks.len() || maps.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} maps for {} masks",
            maps.len(),
            masks.len()
        )));
    }
    for (m, k) in maps.iter().zip(masks) {
        if (m.height(), m.width()) != (k.height(), k.width()) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} map with a {}x{} mask",
                m.height(),
                m.width(),
                k.height(),
                k.width()
            )));
        }
    }
    Ok(())
}

/// AUROC over the pooled pixels of all maps.
pub fn pixel_auroc(maps: &[ScoreMap], masks: &[Mask]) -> Result<f64> {
    check_pairs(maps, masks)?;
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    let labels: Vec<bool> = masks.iter().flat_map(|m| m.data().iter().map(|&v| v > 0)).collect();
    if !labels.iter().any(|&l| l) {
        return Err(Error::invalid("no anomalous pixels in the pool"));
    }
    auroc(&scores, &labels)
}

/// 8-connected components of a mask: one list of flat pixel indices per
/// region, in raster order of their first pixel.
pub fn connected_regions(mask: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.data()[start] == 0 {
            continue;
        }
        seen[start] = true;
        let mut region = vec![start];
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if !seen[q] && mask.data()[q] != 0 {
                        seen[q] = true;
                        region.push(q);
                        stack.push(q);
                    }
                }
            }
        }
        regions.push(region);
    }
    regions
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Trapezoid area under a piecewise-linear curve from `x = 0` to `limit`.
/// Points must be sorted by `x`; the curve is interpolated at `limit`.
pub fn area_to_limit(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 > limit {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area
}

/// `(fpr, mean region overlap)` for each threshold; a pixel is flagged when
/// its score is at least the threshold.
pub fn pro_curve(maps: &[ScoreMap], masks: &[Mask], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_pairs(maps, masks)?;
    let regions: Vec<(usize, Vec<usize>)> = masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| connected_regions(m).into_iter().map(move |r| (i, r)))
        .collect();
    if regions.is_empty() {
        return Err(Error::invalid("no anomalous region in the pool"));
    }
    let normal: Vec<f64> = maps
        .iter()
        .zip(masks)
        .flat_map(|(m, k)| {
            m.data()
                .iter()
                .zip(k.data())
                .filter(|(_, &v)| v == 0)
                .map(|(&s, _)| s)
        })
        .collect();
    if normal.is_empty() {
        return Err(Error::invalid("no normal pixels to measure false positives on"));
    }
    let mut sorted_normal = normal;
    sorted_normal.sort_by(f64::total_cmp);
    let region_scores: Vec<Vec<f64>> = regions
        .iter()
        .map(|(i, r)| {
            let mut s: Vec<f64> = r.iter().map(|&p| maps[*i].data()[p]).collect();
            s.sort_by(f64::total_cmp);
            s
        })
        .collect();
    let at_least = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&v| v < t);
    Ok(thresholds
        .iter()
        .map(|&t| {
            let fpr = at_least(&sorted_normal, t) as f64 / sorted_normal.len() as f64;
            let pro = region_scores
                .iter()
                .map(|s| at_least(s, t) as f64 / s.len() as f64)
                .sum::<f64>()
                / region_scores.len() as f64;
            (fpr, pro)
        })
        .collect())
}

/// Normalized area under the per-region-overlap curve up to `fpr_limit`,
/// over `thresholds` evenly spaced score thresholds.
pub fn aupro(maps: &[ScoreMap], masks: &[Mask], fpr_limit: f64, thresholds: usize) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::invalid(format!("fpr limit must be in (0, 1], got {fpr_limit}")));
    }
    if thresholds < 2 {
        return Err(Error::invalid("need at least two thresholds"));
    }
    check_pairs(maps, masks)?;
    let (lo, hi) = maps
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid("maps contain non-finite scores"));
    }
    let mut points = pro_curve(maps, masks, &linspace(lo, hi, thresholds))?;
    points.push((0.0, 0.0));
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok((area_to_limit(&points, fpr_limit) / fpr_limit).clamp(0.0, 1.0))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Harmonic mean of homogeneity and completeness.
pub fn v_measure(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} cluster ids for {} class ids",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::invalid("V-measure of an empty labelling"));
    }
    let n = predicted.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    for (&k, &c) in predicted.iter().zip(truth) {
        *joint.entry((c, k)).or_default() += 1;
        *by_class.entry(c).or_default() += 1;
        *by_cluster.entry(k).or_default() += 1;
    }
    let h_c = entropy(by_class.values().copied(), n);
    let h_k = entropy(by_cluster.values().copied(), n);
    let mut h_c_given_k = 0.0;
    let mut h_k_given_c = 0.0;
    for (&(c, k), &nck) in &joint {
        let p = nck as f64 / n;
        h_c_given_k -= p * (nck as f64 / by_cluster[&k] as f64).ln();
        h_k_given_c -= p * (nck as f64 / by_class[&c] as f64).ln();
    }
    let homogeneity = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let completeness = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    Ok(if homogeneity + completeness == 0.0 {
        0.0
    } else {
        (2.0 * homogeneity * completeness / (homogeneity + completeness)).clamp(0.0, 1.0)
    })
}
