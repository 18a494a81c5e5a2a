//! Brute-force reference implementations shared by the integration tests
//! and the acceptance suite. Each is written from the definitions, without
//! reusing library internals.

#![allow(dead_code)]

use ufd::numerics::{Matrix, Rng};

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_simplex(rng: &mut Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| rng.uniform() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

/// Silhouette straight from the cohesion / separation definitions.
pub fn silhouette_oracle(points: &Matrix, labels: &[usize]) -> Vec<f64> {
    let n = points.rows();
    (0..n)
        .map(|i| {
            let own: Vec<usize> = (0..n).filter(|&j| labels[j] == labels[i] && j != i).collect();
            if own.is_empty() {
                return 0.0;
            }
            let a = own.iter().map(|&j| dist(points.row(i), points.row(j))).sum::<f64>() / own.len() as f64;
            let mut b = f64::INFINITY;
            let mut others: Vec<usize> = labels.iter().copied().filter(|&l| l != labels[i]).collect();
            others.sort_unstable();
            others.dedup();
            for l in others {
                let members: Vec<usize> = (0..n).filter(|&j| labels[j] == l).collect();
                let m = members.iter().map(|&j| dist(points.row(i), points.row(j))).sum::<f64>() / members.len() as f64;
                b = b.min(m);
            }
            if a.max(b) == 0.0 {
                0.0
            } else {
                (b - a) / a.max(b)
            }
        })
        .collect()
}

/// Every permutation of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn rec(n: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(n, cur, used, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    rec(n, &mut cur, &mut used, &mut out);
    out
}

/// Minimum assignment cost by enumeration, plus the first (lexicographically
/// smallest) permutation reaching it within `tol`.
pub fn assignment_oracle(cost: &[Vec<f64>], tol: f64) -> (Vec<usize>, f64) {
    let n = cost.len();
    let perms = permutations(n);
    let totals: Vec<f64> = perms
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum())
        .collect();
    let best = totals.iter().copied().fold(f64::INFINITY, f64::min);
    let idx = totals.iter().position(|&t| t <= best + tol).unwrap();
    (perms[idx].clone(), best)
}

/// Indices of the `k` rows of `bank` most cosine-similar to `query`, ties to
/// the smaller index, skipping `exclude`.
pub fn knn_oracle(bank: &Matrix, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = (0..bank.rows())
        .filter(|&j| Some(j) != exclude)
        .map(|j| (j, cos(query, bank.row(j))))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(j, _)| j).collect()
}

/// Within-cluster sum of squared distances to the cluster means.
pub fn partition_inertia(points: &Matrix, labels: &[usize], k: usize) -> f64 {
    let d = points.cols();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<usize> = (0..points.rows()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; d];
        for &i in &members {
            for (m, &x) in mean.iter_mut().zip(points.row(i)) {
                *m += x / members.len() as f64;
            }
        }
        for &i in &members {
            total += points.row(i).iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>();
        }
    }
    total
}

/// Best inertia over every partition into exactly `k` non-empty clusters.
pub fn kmeans_optimum(points: &Matrix, k: usize) -> f64 {
    optimal_partition(points, k).0
}

/// The partition reaching [`kmeans_optimum`], first in enumeration order.
pub fn optimal_partition(points: &Matrix, k: usize) -> (f64, Vec<usize>) {
    let n = points.rows();
    let mut labels = vec![0usize; n];
    let mut best = (f64::INFINITY, Vec::new());
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let mut seen = vec![false; k];
        labels.iter().for_each(|&l| seen[l] = true);
        if seen.iter().all(|&s| s) {
            let v = partition_inertia(points, &labels, k);
            if v < best.0 {
                best = (v, labels.clone());
            }
        }
    }
    best
}

/// Mean of the selected rows.
pub fn mean_rows(points: &Matrix, rows: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; points.cols()];
    for &i in rows {
        for (a, &x) in m.iter_mut().zip(points.row(i)) {
            *a += x / rows.len() as f64;
        }
    }
    m
}

/// `|a - b|` relative to the larger magnitude, with an absolute floor for
/// values near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central-difference derivative of `f` along coordinate `i` of `x`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut up = x.to_vec();
    let mut down = x.to_vec();
    up[i] += eps;
    down[i] -= eps;
    (f(&up) - f(&down)) / (2.0 * eps)
}

/// Unsuppressed one-vs-all rule: class `c` fires when the positive
/// prototype is at least as similar as the closest negative; the most
/// similar firing positive wins, ties to the smaller class. Uses the
/// library cosine so results can be compared bit for bit.
pub fn unsuppressed_rule(feature: &[f64], positives: &[Vec<f64>], negatives: &[Vec<Vec<f64>>]) -> Option<usize> {
    let s = |a: &[f64], b: &[f64]| ufd::numerics::cosine_similarity(a, b).unwrap_or(0.0);
    let mut best: Option<(usize, f64)> = None;
    for (c, p) in positives.iter().enumerate() {
        let sp = s(feature, p);
        let sn = negatives[c].iter().map(|n| s(feature, n)).fold(f64::NEG_INFINITY, f64::max);
        if sp >= sn && best.is_none_or(|(_, s)| sp > s) {
            best = Some((c, sp));
        }
    }
    best.map(|(c, _)| c)
}
