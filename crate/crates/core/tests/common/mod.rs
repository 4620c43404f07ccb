//! Brute-force reference implementations. Nothing here calls into the
//! library's math; every value is recomputed with plain loops and without
//! log-sum-exp stabilization.

#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box–Muller keeps the oracle free of distribution crates
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Supervised contrastive loss, term by term, with raw exponentials.
pub fn scl(features: &[Vec<f64>], anchors: &[usize], pos: &[Vec<usize>], cand: &[Vec<usize>], tau: f64) -> f64 {
    let mut total = 0.0;
    for (k, &i) in anchors.iter().enumerate() {
        let denom: f64 = cand[k].iter().map(|&a| (cos(&features[i], &features[a]) / tau).exp()).sum();
        let mut term = 0.0;
        for &p in &pos[k] {
            term += ((cos(&features[i], &features[p]) / tau).exp() / denom).ln();
        }
        total += -term / pos[k].len() as f64;
    }
    total / anchors.len() as f64
}

/// Every other same-label row is positive; every other row is a candidate.
pub fn supervised_sets(labels: &[usize]) -> (Vec<usize>, Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let n = labels.len();
    let anchors: Vec<usize> = (0..n).collect();
    let pos = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect())
        .collect();
    let cand = (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect();
    (anchors, pos, cand)
}

pub fn global(features: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let (a, p, c) = supervised_sets(labels);
    scl(features, &a, &p, &c, tau)
}

/// `maps[sample][row][col]` is a feature vector.
pub type Maps = Vec<Vec<Vec<Vec<f64>>>>;

/// Window cells (odd `k`, or `None` for the full map) kept inside the map.
pub fn window_cells(h: usize, w: usize, r: usize, c: usize, k: Option<usize>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for m in 0..h {
        for n in 0..w {
            let inside = match k {
                None => true,
                Some(k) => {
                    let rad = (k / 2) as i64;
                    (m as i64 - r as i64).abs() <= rad && (n as i64 - c as i64).abs() <= rad
                }
            };
            if inside {
                out.push((m, n));
            }
        }
    }
    out
}

/// Exhaustive argmax: collect all maxima, then nearest to the centre, then
/// smallest (row, col).
pub fn argmax_cell(anchor: &[f64], other: &[Vec<Vec<f64>>], r: usize, c: usize, k: Option<usize>) -> (usize, usize) {
    let cells = window_cells(other.len(), other[0].len(), r, c, k);
    let best = cells
        .iter()
        .map(|&(m, n)| cos(anchor, &other[m][n]))
        .fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<(usize, usize)> = cells
        .into_iter()
        .filter(|&(m, n)| cos(anchor, &other[m][n]) == best)
        .collect();
    let d = |(m, n): (usize, usize)| {
        let (dy, dx) = (m as i64 - r as i64, n as i64 - c as i64);
        dy * dy + dx * dx
    };
    let nearest = ties.iter().map(|&t| d(t)).min().unwrap();
    *ties.iter().filter(|&&t| d(t) == nearest).min().unwrap()
}

/// Dense contrast for one stage: samples `0..n/2` are anchors, all other
/// same-label samples supply one windowed-argmax positive each, and every
/// position of every other sample is a candidate.
pub fn local_stage(maps: &Maps, labels: &[usize], tau: f64, k: Option<usize>) -> f64 {
    let n = maps.len();
    let (h, w) = (maps[0].len(), maps[0][0].len());
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..n / 2 {
        for r in 0..h {
            for c in 0..w {
                let a = &maps[i][r][c];
                let mut denom = 0.0;
                for (j, m) in maps.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    for row in m {
                        for v in row {
                            denom += (cos(a, v) / tau).exp();
                        }
                    }
                }
                let mut term = 0.0;
                let mut np = 0;
                for j in 0..n {
                    if j == i || labels[j] != labels[i] {
                        continue;
                    }
                    let (m, q) = argmax_cell(a, &maps[j], r, c, k);
                    term += ((cos(a, &maps[j][m][q]) / tau).exp() / denom).ln();
                    np += 1;
                }
                total += -term / np as f64;
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn kd(encoder: &[Maps], decoder: &[Maps]) -> f64 {
    let mut total = 0.0;
    for (e, d) in encoder.iter().zip(decoder) {
        let mut sum = 0.0;
        let mut count = 0;
        for (es, ds) in e.iter().zip(d) {
            for (er, dr) in es.iter().zip(ds) {
                for (ev, dv) in er.iter().zip(dr) {
                    sum += 1.0 - cos(ev, dv);
                    count += 1;
                }
            }
        }
        total += sum / count as f64;
    }
    total
}

/// `(N, C, h, w)` row-major data from per-sample maps.
pub fn maps_to_nchw(maps: &Maps) -> (Vec<f64>, (usize, usize, usize, usize)) {
    let (n, h, w, c) = (maps.len(), maps[0].len(), maps[0][0].len(), maps[0][0][0].len());
    let mut out = vec![0.0; n * c * h * w];
    for s in 0..n {
        for r in 0..h {
            for q in 0..w {
                for ch in 0..c {
                    out[((s * c + ch) * h + r) * w + q] = maps[s][r][q][ch];
                }
            }
        }
    }
    (out, (n, c, h, w))
}

pub fn nchw_to_maps(data: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Maps {
    (0..n)
        .map(|s| {
            (0..h)
                .map(|r| {
                    (0..w)
                        .map(|q| (0..c).map(|ch| data[((s * c + ch) * h + r) * w + q]).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn random_maps(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Maps {
    (0..n)
        .map(|_| (0..h).map(|_| (0..w).map(|_| normal_vec(rng, c)).collect()).collect())
        .collect()
}

/// Pair-counting AUROC.
pub fn auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// 8-connected regions via repeated label propagation until a fixed point.
pub fn regions(mask: &[Vec<bool>]) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.len(), mask[0].len());
    let mut label: Vec<Vec<usize>> = (0..h).map(|r| (0..w).map(|c| r * w + c).collect()).collect();
    loop {
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                if !mask[r][c] {
                    continue;
                }
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if mask[nr][nc] && label[nr][nc] < label[r][c] {
                            label[r][c] = label[nr][nc];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut ids: Vec<usize> = Vec::new();
    let mut out: Vec<Vec<(usize, usize)>> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[r][c] {
                let id = label[r][c];
                match ids.iter().position(|&x| x == id) {
                    Some(k) => out[k].push((r, c)),
                    None => {
                        ids.push(id);
                        out.push(vec![(r, c)]);
                    }
                }
            }
        }
    }
    out
}

/// Normalized PRO area up to `limit`, sweeping every distinct score as a
/// threshold (plus one above the maximum).
pub fn aupro(maps: &[Vec<Vec<f64>>], masks: &[Vec<Vec<bool>>], limit: f64) -> f64 {
    let mut thresholds: Vec<f64> = maps.iter().flatten().flatten().copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let all_regions: Vec<(usize, Vec<(usize, usize)>)> = masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| regions(m).into_iter().map(move |r| (i, r)))
        .collect();
    let mut points: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let mut fp = 0.0;
        let mut normal = 0.0;
        for (m, k) in maps.iter().zip(masks) {
            for (mr, kr) in m.iter().zip(k) {
                for (&s, &a) in mr.iter().zip(kr) {
                    if !a {
                        normal += 1.0;
                        if s >= t {
                            fp += 1.0;
                        }
                    }
                }
            }
        }
        let pro = all_regions
            .iter()
            .map(|(i, reg)| reg.iter().filter(|&&(r, c)| maps[*i][r][c] >= t).count() as f64 / reg.len() as f64)
            .sum::<f64>()
            / all_regions.len() as f64;
        points.push((fp / normal, pro));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut area = 0.0;
    for p in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (p[0], p[1]);
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
    area / limit
}

/// V-measure from an explicit contingency table.
pub fn v_measure(pred: &[usize], truth: &[usize]) -> f64 {
    let nc = truth.iter().max().unwrap() + 1;
    let nk = pred.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0f64; nk]; nc];
    for (&k, &c) in pred.iter().zip(truth) {
        table[c][k] += 1.0;
    }
    let n = pred.len() as f64;
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..nk).map(|k| table.iter().map(|r| r[k]).sum()).collect();
    let h = |v: &[f64]| -> f64 { v.iter().filter(|&&x| x > 0.0).map(|&x| -(x / n) * (x / n).ln()).sum() };
    let (hc, hk) = (h(&row), h(&col));
    let mut hck = 0.0;
    let mut hkc = 0.0;
    for c in 0..nc {
        for k in 0..nk {
            let x = table[c][k];
            if x > 0.0 {
                hck -= x / n * (x / col[k]).ln();
                hkc -= x / n * (x / row[c]).ln();
            }
        }
    }
    let hom = if hc == 0.0 { 1.0 } else { 1.0 - hck / hc };
    let com = if hk == 0.0 { 1.0 } else { 1.0 - hkc / hk };
    if hom + com == 0.0 {
        0.0
    } else {
        2.0 * hom * com / (hom + com)
    }
}
