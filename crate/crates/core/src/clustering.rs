//! K-means, the silhouette criterion, and estimation of how many classes the
//! target set contains.
//!
//! Distances are Euclidean. Callers clustering embeddings pass L2-normalized
//! rows, which makes Euclidean distance a monotone function of cosine
//! distance.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{euclidean, l2_normalize_rows, squared_distance, Matrix, Rng};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Independent k-means++ starts per call; the lowest inertia wins.
pub const N_INIT: usize = 10;
/// Silhouette is quadratic in N; larger sets are uniformly subsampled.
pub const SILHOUETTE_MAX_POINTS: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

/// Best of [`N_INIT`] runs of k-means++ seeding followed by Lloyd iterations
/// until the largest centroid shift drops below `tol` or `max_iter` is
/// reached. Runs draw from `rng` in sequence; ties keep the earlier run.
///
/// Empty clusters are repaired by moving the point farthest from its
/// centroid (among clusters with at least two members) into the empty one, so
/// the result never contains an empty cluster.
pub fn kmeans(points: &Matrix, k: usize, rng: &mut Rng, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::TooManyClusters { k, n });
    }
    let mut best = lloyd(points, k, rng, max_iter, tol);
    for _ in 1..N_INIT {
        let run = lloyd(points, k, rng, max_iter, tol);
        if run.inertia < best.inertia {
            best = run;
        }
    }
    Ok(best)
}

fn lloyd(points: &Matrix, k: usize, rng: &mut Rng, max_iter: usize, tol: f64) -> KMeansResult {
    let mut centroids = seed_plus_plus(points, k, rng);
    let mut assignment = assign(points, &centroids);
    repair_empty(points, &mut centroids, &mut assignment, k);
    centroids = means(points, &assignment, k);
    let mut inertia = total_inertia(points, &centroids, &assignment);
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut next_assignment = assign(points, &centroids);
        let mut next_centroids = centroids.clone();
        repair_empty(points, &mut next_centroids, &mut next_assignment, k);
        let next_centroids = means(points, &next_assignment, k);
        let next_inertia = total_inertia(points, &next_centroids, &next_assignment);
        assert!(
            next_inertia <= inertia * (1.0 + 1e-12) + 1e-12,
            "k-means inertia increased: {inertia} -> {next_inertia}"
        );
        let shift = (0..k)
            .map(|j| euclidean(centroids.row(j), next_centroids.row(j)))
            .fold(0.0, f64::max);
        centroids = next_centroids;
        assignment = next_assignment;
        inertia = next_inertia;
        if shift < tol {
            break;
        }
    }
    KMeansResult {
        centroids,
        assignment,
        inertia,
        iterations,
    }
}

fn seed_plus_plus(points: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just above the running sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            rng.below(n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

/// Nearest centroid per point, smallest index on ties.
fn assign(points: &Matrix, centroids: &Matrix) -> Vec<usize> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| nearest(points.row(i), centroids).0)
        .collect()
}

fn nearest(p: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centroids.rows() {
        let d = squared_distance(p, centroids.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn repair_empty(points: &Matrix, centroids: &mut Matrix, assignment: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &a) in assignment.iter().enumerate() {
            if sizes[a] < 2 {
                continue;
            }
            let d = squared_distance(points.row(i), centroids.row(a));
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        // k <= n guarantees a cluster with two or more members exists
        let donor = far.expect("no cluster large enough to donate a point");
        assignment[donor] = empty;
        centroids.row_mut(empty).copy_from_slice(points.row(donor));
    }
}

fn means(points: &Matrix, assignment: &[usize], k: usize) -> Matrix {
    let mut sums = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, &x) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        let inv = 1.0 / c as f64;
        sums.row_mut(j).iter_mut().for_each(|v| *v *= inv);
    }
    sums
}

fn total_inertia(points: &Matrix, centroids: &Matrix, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| squared_distance(points.row(i), centroids.row(a)))
        .sum()
}

/// Per-point silhouette values `(b - a) / max(a, b)`.
///
/// Points alone in their cluster score 0, as do points with `a = b = 0`.
/// Cluster labels need not be contiguous; only non-empty labels count.
pub fn silhouette(points: &Matrix, assignment: &[usize]) -> Result<Vec<f64>> {
    let n = points.rows();
    if assignment.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: assignment.len(),
        });
    }
    let num_labels = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; num_labels];
    for &a in assignment {
        sizes[a] += 1;
    }
    let live = sizes.iter().filter(|&&s| s > 0).count();
    if live < 2 {
        return Err(Error::TooFewClusters(live));
    }
    let scores = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = assignment[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; num_labels];
            for j in 0..n {
                if j != i {
                    sums[assignment[j]] += euclidean(points.row(i), points.row(j));
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..num_labels)
                .filter(|&l| l != own && sizes[l] > 0)
                .map(|l| sums[l] / sizes[l] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect();
    Ok(scores)
}

pub fn mean_silhouette(points: &Matrix, assignment: &[usize]) -> Result<f64> {
    let s = silhouette(points, assignment)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtEstimate {
    pub candidates: Vec<usize>,
    pub mean_silhouettes: Vec<f64>,
    pub chosen: usize,
}

/// `round_half_up(C/3), round_half_up(C/2), C, 2C, 3C`, clamped to
/// `[2, n - 1]` and deduplicated, ascending.
pub fn ct_candidates(num_source_classes: usize, n: usize) -> Vec<usize> {
    let c = num_source_classes;
    let raw = [(2 * c + 3) / 6, c.div_ceil(2), c, 2 * c, 3 * c];
    let hi = n.saturating_sub(1);
    if hi < 2 {
        return Vec::new();
    }
    let mut out: Vec<usize> = raw.iter().map(|&v| v.clamp(2, hi)).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Picks the candidate class count with the highest mean silhouette (ties go
/// to the smaller count). Features are L2-normalized here; each candidate's
/// k-means gets its own sub-stream of `rng`.
pub fn estimate_ct(features: &Matrix, num_source_classes: usize, rng: &mut Rng) -> Result<CtEstimate> {
    let n = features.rows();
    let candidates = ct_candidates(num_source_classes, n);
    if candidates.is_empty() {
        return Err(Error::NoFeasibleCandidate(n));
    }
    let points = l2_normalize_rows(features)?;
    let streams: Vec<Rng> = candidates.iter().map(|_| rng.split()).collect();
    let mut subsample_rng = rng.split();
    let subsample = (n > SILHOUETTE_MAX_POINTS).then(|| {
        let mut idx = subsample_rng.permutation(n);
        idx.truncate(SILHOUETTE_MAX_POINTS);
        idx.sort_unstable();
        idx
    });
    let scores: Vec<f64> = candidates
        .par_iter()
        .zip(streams)
        .map(|(&k, mut stream)| -> Result<f64> {
            let km = kmeans(&points, k, &mut stream, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
            match &subsample {
                Some(idx) => {
                    let sub = points.select_rows(idx);
                    let labels: Vec<usize> = idx.iter().map(|&i| km.assignment[i]).collect();
                    // a subsample can miss whole clusters
                    mean_silhouette(&sub, &labels).or(Ok(f64::NEG_INFINITY))
                }
                None => mean_silhouette(&points, &km.assignment),
            }
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(CtEstimate {
        chosen: candidates[best],
        candidates,
        mean_silhouettes: scores,
    })
}
