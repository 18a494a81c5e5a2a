//! Entropy-threshold rejection at inference time and the evaluation metrics:
//! closed accuracy, H-score, and novel-category-discovery accuracy.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::clustering::{kmeans, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::model::AdaptModel;
use crate::numerics::{argmax, l2_normalize_rows, normalized_entropy, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Known(usize),
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Label,
    /// Normalized entropy of the predicted distribution.
    pub entropy: f64,
}

/// Rejects a probability row as unknown when its normalized entropy is at
/// least `omega`, otherwise takes the argmax.
pub fn predict_probs(probs: &[f64], omega: f64) -> Result<Prediction> {
    let entropy = normalized_entropy(probs, probs.len())?;
    let label = if entropy >= omega {
        Label::Unknown
    } else {
        Label::Known(argmax(probs))
    };
    Ok(Prediction { label, entropy })
}

pub fn predict(model: &AdaptModel, features: &Matrix, omega: f64) -> Result<Vec<Prediction>> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::InvalidArgument(format!("omega {omega} outside (0, 1]")));
    }
    (0..features.rows())
        .into_par_iter()
        .map(|i| predict_probs(&model.forward(features.row(i))?.probs, omega))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HScore {
    pub known_acc: f64,
    pub unknown_acc: f64,
    pub h_score: f64,
}

/// Harmonic mean of known-class accuracy and unknown rejection rate.
/// `truth[i]` is `None` for target-private samples.
pub fn h_score(preds: &[Prediction], truth: &[Option<usize>]) -> Result<HScore> {
    if preds.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: preds.len(),
        });
    }
    let (mut known, mut known_hit, mut unknown, mut unknown_hit) = (0usize, 0usize, 0usize, 0usize);
    for (p, t) in preds.iter().zip(truth) {
        match t {
            Some(c) => {
                known += 1;
                known_hit += usize::from(p.label == Label::Known(*c));
            }
            None => {
                unknown += 1;
                unknown_hit += usize::from(p.label == Label::Unknown);
            }
        }
    }
    if known == 0 || unknown == 0 {
        return Err(Error::HScoreUndefined(format!(
            "{known} known and {unknown} unknown ground-truth samples"
        )));
    }
    let a = known_hit as f64 / known as f64;
    let b = unknown_hit as f64 / unknown as f64;
    Ok(HScore {
        known_acc: a,
        unknown_acc: b,
        h_score: harmonic_mean(a, b),
    })
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Minimum-cost perfect matching `row -> column` on a square cost matrix,
/// with its total cost. Among optimal matchings the lexicographically
/// smallest is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = cost.len();
    if let Some(row) = cost.iter().find(|r| r.len() != n) {
        return Err(Error::InvalidArgument(format!(
            "cost matrix must be square: {n} rows, a row of length {}",
            row.len()
        )));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix must be finite".into()));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let (_, optimum) = solve_assignment(cost);
    let scale = cost.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale * n as f64;

    // Fix rows one at a time to the smallest column that still admits an
    // optimal completion.
    let mut perm = vec![usize::MAX; n];
    let mut used = vec![false; n];
    let mut fixed_cost = 0.0;
    for r in 0..n {
        let rest_rows: Vec<usize> = (r + 1..n).collect();
        for c in 0..n {
            if used[c] {
                continue;
            }
            let rest_cols: Vec<usize> = (0..n).filter(|&j| !used[j] && j != c).collect();
            let sub: Vec<Vec<f64>> = rest_rows
                .iter()
                .map(|&i| rest_cols.iter().map(|&j| cost[i][j]).collect())
                .collect();
            let completion = if sub.is_empty() { 0.0 } else { solve_assignment(&sub).1 };
            if fixed_cost + cost[r][c] + completion <= optimum + tol {
                perm[r] = c;
                used[c] = true;
                fixed_cost += cost[r][c];
                break;
            }
        }
        debug_assert!(perm[r] != usize::MAX);
    }
    let total = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((perm, total))
}

/// Shortest augmenting path Hungarian method with row/column potentials,
/// O(n^3).
fn solve_assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[col_owner[j] - 1] = j - 1;
    }
    let total = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (perm, total)
}

/// Accuracy of `clusters` against `truth` after the best one-to-one matching
/// of cluster ids to label ids. Both sides may use arbitrary ids; the count
/// table is padded square with zeros.
pub fn cluster_accuracy(truth: &[usize], clusters: &[usize]) -> Result<f64> {
    if truth.len() != clusters.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: clusters.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    let compact = |ids: &[usize]| {
        let mut uniq = ids.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        let mapped: Vec<usize> = ids.iter().map(|x| uniq.binary_search(x).unwrap()).collect();
        (uniq.len(), mapped)
    };
    let (n_labels, t) = compact(truth);
    let (n_clusters, k) = compact(clusters);
    let n = n_labels.max(n_clusters);
    let mut counts = vec![vec![0usize; n]; n];
    for (&ti, &ki) in t.iter().zip(&k) {
        counts[ki][ti] += 1;
    }
    let max_count = counts.iter().flatten().copied().max().unwrap_or(0);
    let cost: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| (max_count - c) as f64).collect())
        .collect();
    let (perm, _) = hungarian(&cost)?;
    let matched: usize = perm.iter().enumerate().map(|(i, &j)| counts[i][j]).sum();
    Ok(matched as f64 / truth.len() as f64)
}

/// Clusters the ground-truth unknown samples into `n_private` groups with
/// k-means (on L2-normalized rows) and scores the clustering with
/// [`cluster_accuracy`].
pub fn ncd_accuracy(unknown_features: &Matrix, true_labels: &[usize], n_private: usize, rng: &mut Rng) -> Result<f64> {
    if n_private < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 private classes, got {n_private}")));
    }
    if unknown_features.rows() < n_private {
        return Err(Error::TooManyClusters {
            k: n_private,
            n: unknown_features.rows(),
        });
    }
    let points = l2_normalize_rows(unknown_features)?;
    let km = kmeans(&points, n_private, rng, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    cluster_accuracy(true_labels, &km.assignment)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub known_correct: usize,
    pub known_misclassified: usize,
    pub known_rejected: usize,
    pub unknown_rejected: usize,
    pub unknown_accepted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_samples: usize,
    pub omega: f64,
    /// `None` when the target has no unknown samples.
    pub known_acc: Option<f64>,
    pub unknown_acc: Option<f64>,
    pub h_score: Option<f64>,
    pub closed_acc: f64,
    pub ncd_acc: Option<f64>,
    pub confusion: Confusion,
}

/// Fixed report keys, in output order.
pub const REPORT_KEYS: [&str; 13] = [
    "n_samples",
    "omega",
    "known_acc",
    "unknown_acc",
    "h_score",
    "closed_acc",
    "ncd_acc",
    "known_correct",
    "known_misclassified",
    "known_rejected",
    "unknown_rejected",
    "unknown_accepted",
    "rejection_rate",
];

/// Splits global target labels into known classes (`< num_source_classes`)
/// and target-private ones (`None`).
pub fn known_truth(labels: &[usize], num_source_classes: usize) -> Vec<Option<usize>> {
    labels
        .iter()
        .map(|&l| (l < num_source_classes).then_some(l))
        .collect()
}

/// Closed accuracy counts `Unknown` predictions as errors.
pub fn closed_accuracy(preds: &[Prediction], truth: &[Option<usize>]) -> f64 {
    let hits = preds
        .iter()
        .zip(truth)
        .filter(|(p, t)| matches!((p.label, t), (Label::Known(a), Some(b)) if a == *b))
        .count();
    hits as f64 / preds.len().max(1) as f64
}

pub fn confusion(preds: &[Prediction], truth: &[Option<usize>]) -> Confusion {
    let mut c = Confusion::default();
    for (p, t) in preds.iter().zip(truth) {
        match (t, p.label) {
            (Some(a), Label::Known(b)) if *a == b => c.known_correct += 1,
            (Some(_), Label::Known(_)) => c.known_misclassified += 1,
            (Some(_), Label::Unknown) => c.known_rejected += 1,
            (None, Label::Unknown) => c.unknown_rejected += 1,
            (None, Label::Known(_)) => c.unknown_accepted += 1,
        }
    }
    c
}

/// Which metrics [`evaluate`] must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// H-score is required; one-sided ground truth is an error.
    Open,
    /// Closed accuracy only.
    Closed,
}

/// Runs the model over the target and builds a report. `ncd` requests
/// novel-category discovery with the given true private count; its k-means
/// draws from `rng`.
pub fn evaluate(
    model: &AdaptModel,
    target: &Matrix,
    labels: &[usize],
    omega: f64,
    mode: EvalMode,
    ncd: Option<usize>,
    rng: &mut Rng,
) -> Result<EvalReport> {
    let c_s = model.dims.num_classes;
    let preds = predict(model, target, omega)?;
    let truth = known_truth(labels, c_s);
    let hs = match mode {
        EvalMode::Open => Some(h_score(&preds, &truth)?),
        EvalMode::Closed => h_score(&preds, &truth).ok(),
    };
    let ncd_acc = match ncd {
        Some(n_private) => {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| truth[i].is_none()).collect();
            let feats: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| model.forward(target.row(i)).map(|r| r.feature))
                .collect::<Result<_>>()?;
            let feats = Matrix::from_rows(&feats)?;
            let true_private: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            Some(ncd_accuracy(&feats, &true_private, n_private, rng)?)
        }
        None => None,
    };
    Ok(EvalReport {
        n_samples: preds.len(),
        omega,
        known_acc: hs.map(|h| h.known_acc),
        unknown_acc: hs.map(|h| h.unknown_acc),
        h_score: hs.map(|h| h.h_score),
        closed_acc: closed_accuracy(&preds, &truth),
        ncd_acc,
        confusion: confusion(&preds, &truth),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn rejection_rate(&self) -> f64 {
        let c = &self.confusion;
        (c.known_rejected + c.unknown_rejected) as f64 / self.n_samples.max(1) as f64
    }

    /// `(key, rendered value)` pairs in [`REPORT_KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.confusion;
        let vals = [
            self.n_samples.to_string(),
            format!("{}", self.omega),
            fmt_opt(self.known_acc),
            fmt_opt(self.unknown_acc),
            fmt_opt(self.h_score),
            format!("{:.6}", self.closed_acc),
            fmt_opt(self.ncd_acc),
            c.known_correct.to_string(),
            c.known_misclassified.to_string(),
            c.known_rejected.to_string(),
            c.unknown_rejected.to_string(),
            c.unknown_accepted.to_string(),
            format!("{:.6}", self.rejection_rate()),
        ];
        REPORT_KEYS.iter().copied().zip(vals).collect()
    }

    /// Tab-separated `metric<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k}\t{v}").unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<22} {:>12}", "metric", "value").unwrap();
        writeln!(s, "{}", "-".repeat(35)).unwrap();
        for (k, v) in self.entries() {
            writeln!(s, "{k:<22} {v:>12}").unwrap();
        }
        s
    }
}

/// Parses a `metric<TAB>value` block back into pairs; `na` becomes `None`.
pub fn parse_tsv(text: &str) -> Result<Vec<(String, Option<f64>)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (k, v) = l.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected `metric<TAB>value`".into(),
            })?;
            let v = if v.trim() == "na" {
                None
            } else {
                Some(v.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: format!("value `{v}`: {e}"),
                })?)
            };
            Ok((k.to_string(), v))
        })
        .collect()
}
