//! Randomized comparisons between the library and the oracles in the parent
//! module. Each routine returns the worst error it saw so that both the
//! regular tests and the acceptance report can use it.

use candle_core::{DType, Device, Tensor, Var};
use ccl::grid::FeatureGrid;
use ccl::image::Mask;
use ccl::losses::{
    global_cl_loss, kd_loss, local_cl_stage, select_positive_index, supervised_contrastive_loss,
    windowed_similarity, PairSets, Window,
};
use ccl::metrics::{aupro, auroc, pixel_auroc, v_measure};
use ccl::scoring::ScoreMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Maps;

pub const STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-7;
pub const METRIC_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default)]
pub struct LossCheck {
    pub instances: usize,
    pub oracle_err: f64,
    pub grad_err: f64,
}

impl LossCheck {
    fn add(&mut self, oracle_err: f64, grad_err: f64) {
        self.instances += 1;
        self.oracle_err = self.oracle_err.max(oracle_err);
        self.grad_err = self.grad_err.max(grad_err);
    }

    pub fn passes(&self, min_instances: usize) -> bool {
        self.instances >= min_instances && self.oracle_err < ORACLE_TOL && self.grad_err < GRAD_TOL
    }
}

fn value(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Norm-wise relative error between the autograd gradient of `f` at `x` and
/// its central finite difference.
pub fn grad_error(x: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let dev = Device::Cpu;
    let var = Var::from_vec(x.to_vec(), shape, &dev).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let eval = |v: Vec<f64>| value(&f(&Tensor::from_vec(v, shape, &dev).unwrap()));
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[i] += STEP;
        minus[i] -= STEP;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * STEP);
        diff += (analytic[i] - numeric).powi(2);
        norm_a += analytic[i].powi(2);
        norm_n += numeric.powi(2);
    }
    diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-12)
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> PairSets {
    let mut sets = PairSets::default();
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let cand: Vec<usize> = others.iter().copied().filter(|_| rng.random_bool(0.7)).collect();
        let cand = if cand.is_empty() { others } else { cand };
        let pos: Vec<usize> = cand.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        let pos = if pos.is_empty() { vec![cand[0]] } else { pos };
        sets.anchors.push(i);
        sets.positives.push(pos);
        sets.candidates.push(cand);
    }
    sets
}

fn rows_of(x: &[f64], d: usize) -> Vec<Vec<f64>> {
    x.chunks(d).map(<[f64]>::to_vec).collect()
}

/// Generic supervised contrast with random positive/candidate sets.
pub fn supervised_contrast(instances: u64) -> LossCheck {
    let mut check = LossCheck::default();
    for seed in 0..instances {
        let mut rng = super::rng(seed);
        let n = rng.random_range(3..=4);
        let d = rng.random_range(2..=8);
        let tau = [0.07, 0.1, 0.5, 1.0][seed as usize % 4];
        let x = super::normal_vec(&mut rng, n * d);
        let pairs = random_pairs(&mut rng, n);
        let t = Tensor::from_vec(x.clone(), (n, d), &Device::Cpu).unwrap();
        let got = value(&supervised_contrastive_loss(&t, &pairs, tau).unwrap());
        let want = super::scl(&rows_of(&x, d), &pairs.anchors, &pairs.positives, &pairs.candidates, tau);
        let g = grad_error(&x, &[n, d], |t| supervised_contrastive_loss(t, &pairs, tau).unwrap());
        check.add((got - want).abs(), g);
    }
    check
}

pub fn global_contrast(instances: u64) -> LossCheck {
    let mut check = LossCheck::default();
    for seed in 0..instances {
        let mut rng = super::rng(100 + seed);
        let d = rng.random_range(2..=8);
        let labels = if rng.random_bool(0.5) { vec![0; 4] } else { vec![0, 1, 0, 1] };
        let x = super::normal_vec(&mut rng, 4 * d);
        let t = Tensor::from_vec(x.clone(), (4, d), &Device::Cpu).unwrap();
        let got = value(&global_cl_loss(&t, &labels, 0.1).unwrap());
        let want = super::global(&rows_of(&x, d), &labels, 0.1);
        let g = grad_error(&x, &[4, d], |t| global_cl_loss(t, &labels, 0.1).unwrap());
        check.add((got - want).abs(), g);
    }
    check
}

const WINDOWS: [(Window, Option<usize>); 3] =
    [(Window::Size(1), Some(1)), (Window::Size(3), Some(3)), (Window::Full, None)];

pub fn local_contrast(instances: u64) -> LossCheck {
    let mut check = LossCheck::default();
    for seed in 0..instances {
        let mut rng = super::rng(200 + seed);
        let n = [2, 4][seed as usize % 2];
        let h = rng.random_range(1..=2);
        let c = rng.random_range(2..=8);
        let labels = if n == 2 { vec![0, 0] } else { vec![0, 1, 0, 1] };
        let (window, k) = WINDOWS[seed as usize % 3];
        let maps = super::random_maps(&mut rng, n, h, 2, c);
        let (x, s) = super::maps_to_nchw(&maps);
        let dims = [s.0, s.1, s.2, s.3];
        let t = Tensor::from_vec(x.clone(), &dims, &Device::Cpu).unwrap();
        let got = value(&local_cl_stage(&t, &labels, 0.1, window, 1024, 0).unwrap());
        let want = super::local_stage(&maps, &labels, 0.1, k);
        let g = grad_error(&x, &dims, |t| local_cl_stage(t, &labels, 0.1, window, 1024, 0).unwrap());
        check.add((got - want).abs(), g);
    }
    check
}

pub fn reconstruction(instances: u64) -> LossCheck {
    let mut check = LossCheck::default();
    for seed in 0..instances {
        let mut rng = super::rng(300 + seed);
        let n = rng.random_range(1..=4);
        let c = rng.random_range(2..=8);
        let enc: Vec<Maps> = (0..2).map(|_| super::random_maps(&mut rng, n, 2, 2, c)).collect();
        let dec: Vec<Maps> = (0..2).map(|_| super::random_maps(&mut rng, n, 2, 2, c)).collect();
        let to_t = |m: &Maps| {
            let (x, s) = super::maps_to_nchw(m);
            Tensor::from_vec(x, (s.0, s.1, s.2, s.3), &Device::Cpu).unwrap()
        };
        let et: Vec<Tensor> = enc.iter().map(to_t).collect();
        let dt: Vec<Tensor> = dec.iter().map(to_t).collect();
        let got = value(&kd_loss(&et, &dt).unwrap());
        // gradient w.r.t. the first decoder stage, the rest held fixed
        let (x, s) = super::maps_to_nchw(&dec[0]);
        let g = grad_error(&x, &[s.0, s.1, s.2, s.3], |t| kd_loss(&et, &[t.clone(), dt[1].clone()]).unwrap());
        check.add((got - super::kd(&enc, &dec)).abs(), g);
    }
    check
}

/// Worst deviation from `log(1 + exp((s_n - s_p)/tau))` over a grid, and the
/// worst deviation from `log 2` on the diagonal.
pub fn two_candidate_closed_form() -> (f64, f64, usize) {
    let (mut worst, mut worst_diag, mut count) = (0f64, 0f64, 0);
    for &tau in &[0.05, 0.1, 0.5, 1.0, 2.0] {
        for i in 0..9 {
            for j in 0..9 {
                // anchor e0; positive at angle a, negative at angle b
                let (a, b) = (i as f64 * 0.35, j as f64 * 0.35);
                let x = vec![1.0, 0.0, a.cos(), a.sin(), b.cos(), b.sin()];
                let t = Tensor::from_vec(x, (3, 2), &Device::Cpu).unwrap();
                let pairs = PairSets {
                    anchors: vec![0],
                    positives: vec![vec![1]],
                    candidates: vec![vec![1, 2]],
                };
                let got = value(&supervised_contrastive_loss(&t, &pairs, tau).unwrap());
                let (sp, sn) = (a.cos(), b.cos());
                worst = worst.max((got - (1.0 + ((sn - sp) / tau).exp()).ln()).abs());
                if i == j {
                    worst_diag = worst_diag.max((got - 2f64.ln()).abs());
                }
                count += 1;
            }
        }
    }
    (worst, worst_diag, count)
}

fn grid_from(map: &[Vec<Vec<f64>>]) -> FeatureGrid {
    let (h, w, c) = (map.len(), map[0].len(), map[0][0].len());
    FeatureGrid::new(h, w, c, map.iter().flatten().flatten().copied().collect()).unwrap()
}

/// Number of (trial, window, position) lookups where the library's positive
/// differs from exhaustive search, and the number of lookups.
#[allow(clippy::needless_range_loop)]
pub fn windowed_argmax(trials: u64) -> (usize, usize) {
    let (mut mismatches, mut total) = (0, 0);
    for trial in 0..trials {
        let mut rng = super::rng(400 + trial);
        // small integer features make exact ties common
        let make = |rng: &mut ChaCha8Rng| -> Vec<Vec<Vec<f64>>> {
            (0..8)
                .map(|_| (0..8).map(|_| (0..3).map(|_| rng.random_range(-1..=1) as f64).collect()).collect())
                .collect()
        };
        let a = make(&mut rng);
        let b = make(&mut rng);
        let (ga, gb) = (grid_from(&a), grid_from(&b));
        for &(window, k) in &WINDOWS {
            for r in 0..8 {
                for c in 0..8 {
                    let sims = windowed_similarity(&ga, &gb, (r, c), window).unwrap();
                    let got = select_positive_index(&sims, (r, c)).unwrap();
                    if got != super::argmax_cell(&a[r][c], &b, r, c, k) {
                        mismatches += 1;
                    }
                    total += 1;
                }
            }
        }
    }
    (mismatches, total)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MetricCheck {
    pub instances: usize,
    pub auroc_err: f64,
    pub pixel_auroc_err: f64,
    pub aupro_err: f64,
    pub v_measure_err: f64,
    /// Instances where `auroc(s) + auroc(-s) != 1` exactly.
    pub symmetry_violations: usize,
}

impl MetricCheck {
    pub fn passes(&self) -> bool {
        self.symmetry_violations == 0
            && [self.auroc_err, self.pixel_auroc_err, self.aupro_err, self.v_measure_err]
                .iter()
                .all(|&e| e < METRIC_TOL)
    }
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    labels[n - 1] = false;
    labels
}

/// Random rectangles (possibly touching, so regions merge).
fn random_masks(rng: &mut ChaCha8Rng, count: usize, h: usize, w: usize) -> Vec<Vec<Vec<bool>>> {
    let mut masks = vec![vec![vec![false; w]; h]; count];
    for m in masks.iter_mut() {
        for _ in 0..rng.random_range(0..=3) {
            let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
            let (r1, c1) = ((r0 + rng.random_range(1..4)).min(h), (c0 + rng.random_range(1..4)).min(w));
            for row in &mut m[r0..r1] {
                for v in &mut row[c0..c1] {
                    *v = true;
                }
            }
        }
    }
    if masks.iter().flatten().flatten().all(|&v| !v) {
        masks[0][0][0] = true;
    }
    masks
}

fn to_library(maps: &[Vec<Vec<f64>>], masks: &[Vec<Vec<bool>>]) -> (Vec<ScoreMap>, Vec<Mask>) {
    let (h, w) = (maps[0].len(), maps[0][0].len());
    let sm = maps.iter().map(|m| ScoreMap::new(h, w, m.iter().flatten().copied().collect()).unwrap()).collect();
    let mk = masks
        .iter()
        .map(|m| {
            let mut mask = Mask::zeros(h, w);
            for (r, row) in m.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    mask.set(r, c, v);
                }
            }
            mask
        })
        .collect();
    (sm, mk)
}

pub fn metrics(instances: u64) -> MetricCheck {
    let mut check = MetricCheck::default();
    for seed in 0..instances {
        let mut rng = super::rng(500 + seed);

        let n = rng.random_range(2..=200);
        let levels = [3, 20, 1_000_000][seed as usize % 3];
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels = random_labels(&mut rng, n);
        let a = auroc(&scores, &labels).unwrap();
        check.auroc_err = check.auroc_err.max((a - super::auroc(&scores, &labels)).abs());
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        if a + auroc(&neg, &labels).unwrap() != 1.0 {
            check.symmetry_violations += 1;
        }

        // three 8x8 maps: 192 pixels; scores on the threshold grid
        let (h, w, count, grid) = (8, 8, 3, 200);
        let masks = random_masks(&mut rng, count, h, w);
        // dyadic step, so every grid level is exact and equals the
        // library's evenly spaced threshold bit for bit
        let step = 1.0 / 64.0;
        let lo = -(rng.random_range(0..64) as f64) * step;
        let hi = lo + (grid - 1) as f64 * step;
        let level = |j: usize| lo + (hi - lo) * j as f64 / (grid - 1) as f64;
        let mut maps: Vec<Vec<Vec<f64>>> = (0..count)
            .map(|_| (0..h).map(|_| (0..w).map(|_| level(rng.random_range(0..grid))).collect()).collect())
            .collect();
        maps[0][0][1] = level(0);
        maps[count - 1][h - 1][w - 1] = level(grid - 1);
        let (sm, mk) = to_library(&maps, &masks);
        let flat_scores: Vec<f64> = maps.iter().flatten().flatten().copied().collect();
        let flat_labels: Vec<bool> = masks.iter().flatten().flatten().copied().collect();
        if flat_labels.iter().any(|&l| !l) {
            let p = pixel_auroc(&sm, &mk).unwrap();
            check.pixel_auroc_err = check.pixel_auroc_err.max((p - super::auroc(&flat_scores, &flat_labels)).abs());
            let pro = aupro(&sm, &mk, 0.3, grid).unwrap();
            check.aupro_err = check.aupro_err.max((pro - super::aupro(&maps, &masks, 0.3)).abs());
        }

        let m = rng.random_range(2..=200);
        let truth: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.7) { t } else { rng.random_range(0..4) })
            .collect();
        let v = v_measure(&pred, &truth).unwrap();
        check.v_measure_err = check.v_measure_err.max((v - super::v_measure(&pred, &truth)).abs());
        check.instances += 1;
    }
    check
}

/// Report on a generated dataset with the ground-truth masks standing in for
/// predicted maps: the smallest per-class (P-AUROC, PRO).
pub fn mask_as_map(root: &std::path::Path) -> (f64, f64) {
    use ccl::data::{generate_synthetic_dataset, scan_dataset, SyntheticSpec};
    use ccl::metrics::{report_from_scores, EvalOptions};
    use ccl::scoring::AnomalyMap;

    generate_synthetic_dataset(root, &SyntheticSpec::new(3, 4, 6, 0.5, 3)).unwrap();
    let index = scan_dataset(root, 64).unwrap();
    let test = index.test_indices();
    let maps: Vec<AnomalyMap> = test.iter().map(|_| AnomalyMap::from_map(ScoreMap::filled(64, 64, 0.0))).collect();
    let globals: Vec<Vec<f64>> = test.iter().map(|&i| vec![index.sample(i).class_id as f64, 1.0]).collect();
    let opts = EvalOptions {
        masks_as_maps: true,
        ..EvalOptions::default()
    };
    let report = report_from_scores(&index, &maps, &globals, "oracle", &opts).unwrap();
    let worst = |f: fn(&ccl::metrics::ClassMetrics) -> Option<f64>| {
        report.per_class.values().map(|m| f(m).unwrap()).fold(f64::INFINITY, f64::min)
    };
    (worst(|m| m.p_auroc), worst(|m| m.pro))
}
