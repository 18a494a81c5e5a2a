//! Memory bank of target embeddings and predictions, and the local k-NN
//! consensus target built from it.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{AdaptModel, ForwardRecord};
use crate::numerics::{dot, l2_normalize, l2_normalize_rows, soft_cross_entropy, soft_cross_entropy_grad, Matrix};

/// One entry per target sample, in dataset order. Features are stored
/// L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub features: Matrix,
    pub probs: Matrix,
    pub version: u64,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn from_records(records: &[ForwardRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("target set".into()));
        }
        let feats: Vec<&[f64]> = records.iter().map(|r| r.feature.as_slice()).collect();
        let probs: Vec<&[f64]> = records.iter().map(|r| r.probs.as_slice()).collect();
        Ok(Self {
            features: l2_normalize_rows(&Matrix::from_rows(&feats)?)?,
            probs: Matrix::from_rows(&probs)?,
            version: 0,
        })
    }

    /// Overwrites the listed entries with fresh records and bumps the
    /// version. Nothing is written unless every index is valid.
    pub fn update(&mut self, indices: &[usize], records: &[ForwardRecord]) -> Result<()> {
        if indices.len() != records.len() {
            return Err(Error::DimensionMismatch {
                expected: indices.len(),
                got: records.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.len(),
            });
        }
        let normalized: Vec<Vec<f64>> = records
            .iter()
            .map(|r| l2_normalize(&r.feature))
            .collect::<Result<_>>()?;
        for ((&i, rec), f) in indices.iter().zip(records).zip(normalized) {
            self.features.row_mut(i).copy_from_slice(&f);
            self.probs.row_mut(i).copy_from_slice(&rec.probs);
        }
        self.version += 1;
        Ok(())
    }
}

/// Full forward pass over the target rows.
pub fn bank_init(model: &AdaptModel, target: &Matrix) -> Result<MemoryBank> {
    if target.rows() == 0 {
        return Err(Error::Empty("target set".into()));
    }
    MemoryBank::from_records(&model.forward_rows(target)?)
}

/// The `k` bank entries most cosine-similar to `query`, most similar first,
/// never including `exclude`. Ties favor the smaller bank index.
pub fn nearest_neighbors(bank: &MemoryBank, query: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
    let q = l2_normalize(query)?;
    let mut scored: Vec<(usize, f64)> = (0..bank.len())
        .filter(|&j| Some(j) != exclude)
        .map(|j| (j, dot(&q, bank.features.row(j))))
        .collect();
    if k == 0 || k > scored.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} neighbors requested from {} candidates",
            scored.len()
        )));
    }
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    scored.select_nth_unstable_by(k - 1, cmp);
    scored.truncate(k);
    scored.sort_by(cmp);
    Ok(scored.into_iter().map(|(j, _)| j).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTargets {
    pub neighbors: Vec<Vec<usize>>,
    /// Mean neighbor probability row per query.
    pub targets: Vec<Vec<f64>>,
}

/// Local consensus targets for a batch of live query features.
/// `self_indices[i]` is the bank slot of query `i`, which is never its own
/// neighbor.
pub fn local_targets<F: AsRef<[f64]> + Sync>(
    bank: &MemoryBank,
    queries: &[F],
    k: usize,
    self_indices: &[usize],
) -> Result<LocalTargets> {
    if queries.len() != self_indices.len() {
        return Err(Error::DimensionMismatch {
            expected: queries.len(),
            got: self_indices.len(),
        });
    }
    let neighbors: Vec<Vec<usize>> = queries
        .par_iter()
        .zip(self_indices)
        .map(|(q, &own)| nearest_neighbors(bank, q.as_ref(), k, Some(own)))
        .collect::<Result<_>>()?;
    let targets = neighbors
        .iter()
        .map(|nbrs| {
            let mut l = vec![0.0; bank.probs.cols()];
            for &j in nbrs {
                for (a, &p) in l.iter_mut().zip(bank.probs.row(j)) {
                    *a += p;
                }
            }
            l.iter_mut().for_each(|a| *a /= nbrs.len() as f64);
            l
        })
        .collect();
    Ok(LocalTargets { neighbors, targets })
}

/// Batch mean of `-Σ_c l_c log p_c` plus per-sample logit gradients.
pub fn loss_local<P: AsRef<[f64]>, L: AsRef<[f64]>>(probs: &[P], targets: &[L]) -> (f64, Vec<Vec<f64>>) {
    debug_assert_eq!(probs.len(), targets.len());
    if probs.is_empty() {
        return (0.0, Vec::new());
    }
    let mut total = 0.0;
    let grads = probs
        .iter()
        .zip(targets)
        .map(|(p, l)| {
            total += soft_cross_entropy(p.as_ref(), l.as_ref());
            soft_cross_entropy_grad(p.as_ref(), l.as_ref())
        })
        .collect();
    (total / probs.len() as f64, grads)
}
