use candle_core::{DType, Tensor};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::contrastive::{check_temperature, masked_contrastive};
use super::window::{select_positive_index, Window};
use crate::error::{Error, Result};
use crate::model::l2_normalize;

/// Dense contrast for one stage.
///
/// `stage` is `(2B, c, h, w)`: rows `0..B` are anchors and row `B + i` is the
/// augmented view of anchor `i`. Every position of every anchor is matched
/// (windowed argmax) against each other same-label sample; candidates are all
/// positions of all other samples, capped at `negative_cap` per anchor
/// position with positives always kept.
pub fn local_cl_stage(
    stage: &Tensor,
    labels: &[usize],
    tau: f64,
    window: Window,
    negative_cap: usize,
    seed: u64,
) -> Result<Tensor> {
    check_temperature(tau)?;
    let (n, c, h, w) = stage.dims4()?;
    if n != labels.len() || n % 2 != 0 || n == 0 {
        return Err(Error::ShapeMismatch(format!(
            "local contrast needs 2B samples with one label each, got {n} samples and {} labels",
            labels.len()
        )));
    }
    let b = n / 2;
    let hw = h * w;
    let cols = n * hw;
    let rows = stage.permute((0, 2, 3, 1))?.contiguous()?.reshape((cols, c))?;
    let normed = l2_normalize(&rows, 1)?;
    let anchors = normed.narrow(0, 0, b * hw)?;
    let sim = anchors.matmul(&normed.t()?)?;
    let sim_vals: Vec<f64> = sim.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positives = Vec::with_capacity(b * hw);
    let mut candidates = Vec::with_capacity(b * hw);
    for i in 0..b {
        for p in 0..hw {
            let r = i * hw + p;
            let centre = (p / w, p % w);
            let row = &sim_vals[r * cols..(r + 1) * cols];
            let cells = window.cells(h, w, centre.0, centre.1);
            let pos: Vec<usize> = (0..n)
                .filter(|&j| j != i && labels[j] == labels[i])
                .filter_map(|j| {
                    let sims: Vec<_> = cells
                        .iter()
                        .map(|&(m, q)| ((m, q), row[j * hw + m * w + q]))
                        .collect();
                    select_positive_index(&sims, centre).map(|(m, q)| j * hw + m * w + q)
                })
                .collect();
            if pos.is_empty() {
                return Err(Error::EmptyPositives(r));
            }
            let others = (0..cols).filter(|&k| k / hw != i);
            let cand = if (n - 1) * hw <= negative_cap {
                others.collect()
            } else {
                let rest: Vec<usize> = others.filter(|k| !pos.contains(k)).collect();
                let keep = negative_cap.saturating_sub(pos.len()).min(rest.len());
                let mut cand = pos.clone();
                cand.extend(index::sample(&mut rng, rest.len(), keep).iter().map(|k| rest[k]));
                cand
            };
            positives.push(pos);
            candidates.push(cand);
        }
    }
    let logits = (sim / tau)?;
    let values: Vec<f64> = sim_vals.iter().map(|s| s / tau).collect();
    masked_contrastive(&logits, &values, &positives, &candidates)
}

/// Mean of [`local_cl_stage`] over the selected stages (1-based).
pub fn local_cl_loss(
    projected: &[Tensor],
    labels: &[usize],
    stages_used: &[usize],
    tau: f64,
    window: Window,
    negative_cap: usize,
    seed: u64,
) -> Result<Tensor> {
    if stages_used.is_empty() {
        return Err(Error::invalid("no stages selected for local contrast"));
    }
    let mut total: Option<Tensor> = None;
    for (k, &s) in stages_used.iter().enumerate() {
        let stage = projected
            .get(s.wrapping_sub(1))
            .ok_or_else(|| Error::invalid(format!("stage {s} not present")))?;
        let term = local_cl_stage(stage, labels, tau, window, negative_cap, seed.wrapping_add(k as u64))?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok((total.expect("non-empty") / stages_used.len() as f64)?)
}
