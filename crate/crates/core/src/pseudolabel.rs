//! One-vs-all global clustering pseudo-labels with confidence-based
//! suppression of source-private classes.
//!
//! For every source class `c` the target set is split into the `K` samples
//! most confidently predicted as `c` (their mean is the positive prototype)
//! and everything else (clustered into `M` negative prototypes). A sample is
//! labeled `c` when its suppressed similarity to the positive prototype is at
//! least its similarity to the closest negative prototype. Samples claimed by
//! several classes keep the one with the highest suppressed similarity;
//! samples claimed by none get a uniform row and act as "unknown".

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::clustering::{kmeans, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, soft_cross_entropy, soft_cross_entropy_grad, Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    pub class_index: usize,
    pub positive: Vec<f64>,
    /// One row per negative prototype.
    pub negatives: Matrix,
    pub epsilon: f64,
    /// Set when fewer than the requested `M` negatives were available.
    pub reduced_from: Option<usize>,
}

/// A pseudo label is either a single class or the uniform "unknown" row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoLabel {
    Class(usize),
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMatrix {
    num_classes: usize,
    labels: Vec<PseudoLabel>,
}

impl PseudoLabelMatrix {
    pub fn new(num_classes: usize, labels: Vec<PseudoLabel>) -> Self {
        Self { num_classes, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[PseudoLabel] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        match self.labels[i] {
            PseudoLabel::Class(c) => {
                let mut r = vec![0.0; self.num_classes];
                r[c] = 1.0;
                r
            }
            PseudoLabel::Uniform => vec![1.0 / self.num_classes as f64; self.num_classes],
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..self.len()).map(|i| self.row(i)).collect();
        Matrix::from_rows(&rows).expect("rows share a width")
    }
}

/// Per-sample bookkeeping from [`assign_pseudo_labels_with_diagnostics`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignDiagnostics {
    pub fired: usize,
    /// Largest `ε_c · S(g, p_c)` among fired classes, `NaN` when none fired.
    pub max_score: f64,
}

/// `max(1, floor(n / ct))`.
pub fn topk_count(n: usize, ct: usize) -> usize {
    (n / ct.max(1)).max(1)
}

/// Indices (ascending) of the `k` largest entries of column `class` of
/// `probs`. Ties favor the smaller sample index.
pub fn select_topk(probs: &Matrix, class: usize, k: usize) -> Result<Vec<usize>> {
    let n = probs.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("top-K size {k} not in [1, {n}]")));
    }
    if class >= probs.cols() {
        return Err(Error::IndexOutOfRange {
            index: class,
            len: probs.cols(),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs.get(b, class).total_cmp(&probs.get(a, class)).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Builds the positive prototype, `M` K-means negative prototypes and the
/// suppression weight `ε = ρ + (1 - ρ)/K · Σ_topK p_c` for one class.
///
/// `features` must already be L2-normalized.
pub fn build_prototypes(
    features: &Matrix,
    probs: &Matrix,
    class: usize,
    k: usize,
    m: usize,
    rho: f64,
    rng: &mut Rng,
) -> Result<ClassPrototypes> {
    if m == 0 {
        return Err(Error::InvalidArgument("M must be at least 1".into()));
    }
    if features.rows() != probs.rows() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            got: probs.rows(),
        });
    }
    let top = select_topk(probs, class, k)?;
    let mut positive = vec![0.0; features.cols()];
    for &i in &top {
        for (p, &x) in positive.iter_mut().zip(features.row(i)) {
            *p += x;
        }
    }
    positive.iter_mut().for_each(|p| *p /= k as f64);

    let confidence: f64 = top.iter().map(|&i| probs.get(i, class)).sum();
    let epsilon = rho + (1.0 - rho) / k as f64 * confidence;

    let mut in_top = vec![false; features.rows()];
    top.iter().for_each(|&i| in_top[i] = true);
    let rest: Vec<usize> = (0..features.rows()).filter(|&i| !in_top[i]).collect();
    let m_eff = m.min(rest.len());
    let reduced_from = (m_eff < m).then(|| {
        log::warn!(
            "class {class}: only {} negative samples, reducing M from {m} to {m_eff}",
            rest.len()
        );
        m
    });
    let negatives = if m_eff == 0 {
        Matrix::zeros(0, features.cols())
    } else {
        kmeans(&features.select_rows(&rest), m_eff, rng, DEFAULT_MAX_ITER, DEFAULT_TOL)?.centroids
    };
    Ok(ClassPrototypes {
        class_index: class,
        positive,
        negatives,
        epsilon,
        reduced_from,
    })
}

/// Prototypes for every class; class `c` uses the `c`-th sub-stream of `rng`.
pub fn build_all_prototypes(
    features: &Matrix,
    probs: &Matrix,
    k: usize,
    m: usize,
    rho: f64,
    rng: &mut Rng,
) -> Result<Vec<ClassPrototypes>> {
    let streams: Vec<Rng> = (0..probs.cols()).map(|_| rng.split()).collect();
    streams
        .into_par_iter()
        .enumerate()
        .map(|(c, mut s)| build_prototypes(features, probs, c, k, m, rho, &mut s))
        .collect()
}

/// Cosine similarity that maps a zero-norm operand to 0 instead of failing;
/// a prototype can average to the origin.
fn similarity(a: &[f64], b: &[f64]) -> f64 {
    cosine_similarity(a, b).unwrap_or(0.0)
}

pub fn assign_pseudo_labels(features: &Matrix, prototypes: &[ClassPrototypes]) -> PseudoLabelMatrix {
    assign_pseudo_labels_with_diagnostics(features, prototypes).0
}

pub fn assign_pseudo_labels_with_diagnostics(
    features: &Matrix,
    prototypes: &[ClassPrototypes],
) -> (PseudoLabelMatrix, Vec<AssignDiagnostics>) {
    let (labels, diags): (Vec<_>, Vec<_>) = (0..features.rows())
        .into_par_iter()
        .map(|i| {
            let g = features.row(i);
            let mut best: Option<(usize, f64)> = None;
            let mut fired = 0;
            for proto in prototypes {
                let score = proto.epsilon * similarity(g, &proto.positive);
                let hardest = proto
                    .negatives
                    .iter_rows()
                    .map(|n| similarity(g, n))
                    .fold(f64::NEG_INFINITY, f64::max);
                if score >= hardest {
                    fired += 1;
                    if best.is_none_or(|(_, s)| score > s) {
                        best = Some((proto.class_index, score));
                    }
                }
            }
            let label = best.map_or(PseudoLabel::Uniform, |(c, _)| PseudoLabel::Class(c));
            let max_score = best.map_or(f64::NAN, |(_, s)| s);
            (label, AssignDiagnostics { fired, max_score })
        })
        .unzip();
    (PseudoLabelMatrix::new(prototypes.len(), labels), diags)
}

/// Plain-text dump, one line per sample:
/// `idx pseudo_class(-1 for uniform) fired_count max_score`.
pub fn debug_dump(labels: &PseudoLabelMatrix, diags: &[AssignDiagnostics]) -> String {
    let mut s = String::new();
    for (i, (l, d)) in labels.labels().iter().zip(diags).enumerate() {
        let class = match l {
            PseudoLabel::Class(c) => *c as i64,
            PseudoLabel::Uniform => -1,
        };
        writeln!(s, "{i} {class} {} {:?}", d.fired, d.max_score).unwrap();
    }
    s
}

/// Batch mean of `-Σ_c q_c log p_c` plus per-sample logit gradients (not
/// divided by the batch size).
pub fn loss_global<P: AsRef<[f64]>, Q: AsRef<[f64]>>(probs: &[P], targets: &[Q]) -> (f64, Vec<Vec<f64>>) {
    debug_assert_eq!(probs.len(), targets.len());
    if probs.is_empty() {
        return (0.0, Vec::new());
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(probs.len());
    for (p, q) in probs.iter().zip(targets) {
        total += soft_cross_entropy(p.as_ref(), q.as_ref());
        grads.push(soft_cross_entropy_grad(p.as_ref(), q.as_ref()));
    }
    (total / probs.len() as f64, grads)
}
