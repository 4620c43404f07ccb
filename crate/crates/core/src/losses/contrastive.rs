use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::model::l2_normalize;

/// Cosine similarity; a zero vector yields 0 and a logged warning.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity of a zero feature vector");
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Per-anchor positive set `P(i)` and candidate set `A(i)`, as row indices
/// into a feature matrix.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairSets {
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub candidates: Vec<Vec<usize>>,
}

impl PairSets {
    /// Every row is an anchor; positives share its label, candidates are all
    /// other rows.
    pub fn supervised(labels: &[usize]) -> Self {
        let n = labels.len();
        let mut sets = PairSets::default();
        for i in 0..n {
            sets.anchors.push(i);
            sets.positives
                .push((0..n).filter(|&j| j != i && labels[j] == labels[i]).collect());
            sets.candidates.push((0..n).filter(|&j| j != i).collect());
        }
        sets
    }

    pub fn validate(&self, rows: usize) -> Result<()> {
        if self.anchors.len() != self.positives.len() || self.anchors.len() != self.candidates.len() {
            return Err(Error::ShapeMismatch("pair set lists differ in length".into()));
        }
        if self.anchors.is_empty() {
            return Err(Error::invalid("pair sets contain no anchors"));
        }
        for (k, &i) in self.anchors.iter().enumerate() {
            if i >= rows {
                return Err(Error::invalid(format!("anchor row {i} out of range")));
            }
            let (pos, cand) = (&self.positives[k], &self.candidates[k]);
            if pos.is_empty() {
                return Err(Error::EmptyPositives(i));
            }
            if cand.contains(&i) {
                return Err(Error::invalid(format!("anchor {i} is its own candidate")));
            }
            if let Some(&bad) = cand.iter().find(|&&j| j >= rows) {
                return Err(Error::invalid(format!("candidate row {bad} out of range")));
            }
            if let Some(&p) = pos.iter().find(|p| !cand.contains(p)) {
                return Err(Error::invalid(format!(
                    "positive {p} of anchor {i} is not a candidate"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_temperature(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// Mean over anchor rows of
/// `logsumexp_{a in A(i)} l_ia - mean_{p in P(i)} l_ip`,
/// with the per-row candidate maximum subtracted before exponentiating.
///
/// `logits` is `(anchors, n)`; `values` holds the same numbers row-major.
/// Only the listed columns are gathered, so cost scales with the set sizes
/// rather than with `n`.
pub(crate) fn masked_contrastive(
    logits: &Tensor,
    values: &[f64],
    positives: &[Vec<usize>],
    candidates: &[Vec<usize>],
) -> Result<Tensor> {
    let (a, n) = logits.dims2()?;
    let dtype = logits.dtype();
    let device = logits.device();
    // ragged index lists padded with a valid column and a zero weight
    let padded = |sets: &[Vec<usize>], weight: &dyn Fn(usize) -> f64| -> Result<(Tensor, Tensor)> {
        let k = sets.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut idx = vec![0u32; a * k];
        let mut w = vec![0f64; a * k];
        for (r, set) in sets.iter().enumerate() {
            for (slot, &j) in set.iter().enumerate() {
                idx[r * k + slot] = j as u32;
                w[r * k + slot] = weight(set.len());
            }
        }
        Ok((
            Tensor::from_vec(idx, (a, k), device)?,
            Tensor::from_vec(w, (a, k), device)?.to_dtype(dtype)?,
        ))
    };
    let row_max: Vec<f64> = candidates
        .iter()
        .enumerate()
        .map(|(r, cand)| cand.iter().map(|&j| values[r * n + j]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let (cand_idx, cand_mask) = padded(candidates, &|_| 1.0)?;
    let (pos_idx, pos_weight) = padded(positives, &|len| 1.0 / len as f64)?;
    let max = Tensor::from_vec(row_max, (a, 1), device)?.to_dtype(dtype)?;

    let shifted = logits.gather(&cand_idx, 1)?.broadcast_sub(&max)?;
    let exp = ((shifted * &cand_mask)?.exp()? * &cand_mask)?;
    let lse = exp.sum_keepdim(1)?.log()?.broadcast_add(&max)?;
    let positive = (logits.gather(&pos_idx, 1)? * pos_weight)?.sum_keepdim(1)?;
    Ok((lse - positive)?.mean_all()?)
}

fn to_f64_rows(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}

/// Supervised contrastive loss over the rows of `features` (`(n, d)`).
///
/// Rows are L2-normalized first, so the similarity is cosine similarity.
pub fn supervised_contrastive_loss(features: &Tensor, pairs: &PairSets, tau: f64) -> Result<Tensor> {
    check_temperature(tau)?;
    let (n, _) = features.dims2()?;
    pairs.validate(n)?;
    let normed = l2_normalize(features, 1)?;
    let idx = Tensor::from_vec(
        pairs.anchors.iter().map(|&i| i as u32).collect::<Vec<_>>(),
        pairs.anchors.len(),
        features.device(),
    )?;
    let anchors = normed.index_select(&idx, 0)?;
    let logits = (anchors.matmul(&normed.t()?)? / tau)?;
    let values = to_f64_rows(&logits)?;
    masked_contrastive(&logits, &values, &pairs.positives, &pairs.candidates)
}

/// Interchangeable image-level contrastive objective.
pub trait GlobalContrast {
    fn loss(&self, globals: &Tensor, labels: &[usize], tau: f64) -> Result<Tensor>;
}

/// Supervised contrast over all `2B` global vectors: positives are every
/// other same-label row, candidates every other row.
#[derive(Clone, Copy, Debug, Default)]
pub struct SupervisedGlobal;

impl GlobalContrast for SupervisedGlobal {
    fn loss(&self, globals: &Tensor, labels: &[usize], tau: f64) -> Result<Tensor> {
        global_cl_loss(globals, labels, tau)
    }
}

pub fn global_cl_loss(globals: &Tensor, labels: &[usize], tau: f64) -> Result<Tensor> {
    let (n, _) = globals.dims2()?;
    if n != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{n} global vectors but {} labels",
            labels.len()
        )));
    }
    supervised_contrastive_loss(globals, &PairSets::supervised(labels), tau)
}
