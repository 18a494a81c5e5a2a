//! Contrastive affinity: dataset-level positives from the memory bank,
//! batch-level hard negatives, and the stop-gradient similarity loss.
//!
//! Hard negatives skip the `ceil(B / C̃_t) - 1` in-batch samples most similar
//! to the anchor (the ones expected to share its class) and take the next
//! `n_pairs` down the ranking.

use rayon::prelude::*;

use crate::consensus::{nearest_neighbors, MemoryBank};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, norm};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    /// Position of the anchor inside the batch.
    pub anchor: usize,
    /// Bank slot of the anchor.
    pub anchor_index: usize,
    /// Bank indices.
    pub positives: Vec<usize>,
    /// Batch positions.
    pub negatives: Vec<usize>,
}

/// Number of most-similar in-batch samples presumed to share the anchor's
/// class: `ceil(batch / ct) - 1`.
pub fn expected_same_class(batch: usize, ct: usize) -> usize {
    batch.div_ceil(ct.max(1)).saturating_sub(1)
}

/// Other batch positions ranked by cosine similarity to `anchor`, most
/// similar first, ties by position.
pub fn rank_in_batch<F: AsRef<[f64]>>(batch: &[F], anchor: usize) -> Result<Vec<usize>> {
    let a = batch[anchor].as_ref();
    let mut scored: Vec<(usize, f64)> = batch
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != anchor)
        .map(|(j, f)| cosine_similarity(a, f.as_ref()).map(|s| (j, s)))
        .collect::<Result<_>>()?;
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    Ok(scored.into_iter().map(|(j, _)| j).collect())
}

/// Positives are the anchor's `n_pairs` nearest bank entries (own slot
/// excluded). Negatives come from the in-batch ranking after skipping the
/// expected same-class count, wrapping back to the top of the ranking when
/// the batch runs out.
pub fn mine_pairs<F: AsRef<[f64]> + Sync>(
    bank: &MemoryBank,
    batch_features: &[F],
    batch_indices: &[usize],
    n_pairs: usize,
    ct: usize,
) -> Result<Vec<PairSet>> {
    let b = batch_features.len();
    if batch_indices.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            got: batch_indices.len(),
        });
    }
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be at least 1".into()));
    }
    if b < 2 || b - 1 < n_pairs {
        return Err(Error::BatchTooSmall { batch: b, pairs: n_pairs });
    }
    let skip = expected_same_class(b, ct);
    (0..b)
        .into_par_iter()
        .map(|a| {
            let positives = nearest_neighbors(bank, batch_features[a].as_ref(), n_pairs, Some(batch_indices[a]))?;
            let ranking = rank_in_batch(batch_features, a)?;
            let negatives = (0..n_pairs).map(|j| ranking[(skip + j) % ranking.len()]).collect();
            Ok(PairSet {
                anchor: a,
                anchor_index: batch_indices[a],
                positives,
                negatives,
            })
        })
        .collect()
}

/// `∂S(a, b)/∂a` for cosine similarity, `b` held constant.
fn cosine_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let na = norm(a);
    let nb = norm(b);
    if na.is_nan() || nb.is_nan() || na <= 0.0 || nb <= 0.0 {
        return Err(Error::DegenerateFeature);
    }
    let s = crate::numerics::dot(a, b) / (na * nb);
    Ok(a.iter()
        .zip(b)
        .map(|(&ai, &bi)| (bi / nb - s * ai / na) / na)
        .collect())
}

/// Mean over anchors of `Σ_neg S(a, n) - Σ_pos S(a, p)`.
///
/// Pair-side features (`negative_source` rows and bank entries) are
/// constants: the returned gradients, one per entry of `anchors`, only carry
/// the anchor side. Anchors without a pair set get a zero gradient.
pub fn loss_contrastive<A: AsRef<[f64]>, N: AsRef<[f64]>>(
    anchors: &[A],
    pairs: &[PairSet],
    bank: &MemoryBank,
    negative_source: &[N],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let dim = anchors.first().map_or(0, |a| a.as_ref().len());
    let mut grads = vec![vec![0.0; dim]; anchors.len()];
    if pairs.is_empty() {
        return Ok((0.0, grads));
    }
    let mut total = 0.0;
    for ps in pairs {
        let a = anchors
            .get(ps.anchor)
            .ok_or(Error::IndexOutOfRange {
                index: ps.anchor,
                len: anchors.len(),
            })?
            .as_ref();
        let g = &mut grads[ps.anchor];
        for &n in &ps.negatives {
            let other = negative_source
                .get(n)
                .ok_or(Error::IndexOutOfRange {
                    index: n,
                    len: negative_source.len(),
                })?
                .as_ref();
            total += cosine_similarity(a, other)?;
            for (gi, d) in g.iter_mut().zip(cosine_grad(a, other)?) {
                *gi += d;
            }
        }
        for &p in &ps.positives {
            if p >= bank.len() {
                return Err(Error::IndexOutOfRange { index: p, len: bank.len() });
            }
            let other = bank.features.row(p);
            total -= cosine_similarity(a, other)?;
            for (gi, d) in g.iter_mut().zip(cosine_grad(a, other)?) {
                *gi -= d;
            }
        }
    }
    // the batch mean in backward divides by the anchor count
    let scale = anchors.len() as f64 / pairs.len() as f64;
    if scale != 1.0 {
        grads.iter_mut().flatten().for_each(|v| *v *= scale);
    }
    Ok((total / pairs.len() as f64, grads))
}
