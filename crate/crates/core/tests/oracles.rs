//! Library results against brute-force or hand-derived references.

mod common;

use common::*;
use ufd::adaptation::{pretrain_source, AdaptConfig};
use ufd::clustering::{ct_candidates, kmeans, silhouette};
use ufd::consensus::MemoryBank;
use ufd::contrastive::{expected_same_class, mine_pairs};
use ufd::datagen::{generate, ScenarioSpec};
use ufd::evaluation::{cluster_accuracy, hungarian, ncd_accuracy};
use ufd::model::ModelDims;
use ufd::numerics::{argmax, cosine_similarity, l2_normalize_rows, Matrix, Rng};
use ufd::pseudolabel::{assign_pseudo_labels, build_all_prototypes, topk_count, PseudoLabel};

fn unit(deg: f64) -> [f64; 2] {
    let r = deg.to_radians();
    [r.cos(), r.sin()]
}

#[test]
fn six_point_instance_matches_hand_evaluation() {
    let feats = Matrix::from_rows(&[unit(0.0), unit(6.0), unit(90.0), unit(86.0), unit(180.0), unit(177.0)]).unwrap();
    let probs = Matrix::from_rows(&[[0.9, 0.1], [0.8, 0.2], [0.1, 0.9], [0.2, 0.8], [0.55, 0.45], [0.45, 0.55]]).unwrap();
    let (ct, rho) = (3, 0.75);
    let k = topk_count(6, ct);
    assert_eq!(k, 2);

    // reference: sort by confidence, average the top K, optimally partition
    // the rest into M = C̃_t groups, apply the suppressed rule
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut eps = Vec::new();
    for c in 0..2 {
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| probs.get(b, c).partial_cmp(&probs.get(a, c)).unwrap().then(a.cmp(&b)));
        let top = &order[..k];
        let rest: Vec<usize> = order[k..].to_vec();
        positives.push(mean_rows(&feats, top));
        eps.push(rho + (1.0 - rho) / k as f64 * top.iter().map(|&i| probs.get(i, c)).sum::<f64>());
        let sub = feats.select_rows(&rest);
        let (_, part) = optimal_partition(&sub, ct);
        negatives.push(
            (0..ct)
                .map(|g| {
                    let members: Vec<usize> = (0..rest.len()).filter(|&i| part[i] == g).collect();
                    mean_rows(&sub, &members)
                })
                .collect::<Vec<_>>(),
        );
    }
    let expected: Vec<PseudoLabel> = (0..6)
        .map(|i| {
            let g = feats.row(i);
            let mut best: Option<(usize, f64)> = None;
            for c in 0..2 {
                let score = eps[c] * cos(g, &positives[c]);
                let hardest = negatives[c].iter().map(|n| cos(g, n)).fold(f64::NEG_INFINITY, f64::max);
                if score >= hardest && best.is_none_or(|(_, s)| score > s) {
                    best = Some((c, score));
                }
            }
            best.map_or(PseudoLabel::Uniform, |(c, _)| PseudoLabel::Class(c))
        })
        .collect();
    use PseudoLabel::*;
    assert_eq!(expected, vec![Class(0), Class(0), Class(1), Class(1), Uniform, Uniform]);

    for seed in 0..10 {
        let protos = build_all_prototypes(&feats, &probs, k, ct, rho, &mut Rng::new(seed)).unwrap();
        assert_eq!(assign_pseudo_labels(&feats, &protos).labels(), expected.as_slice());
    }
}

#[test]
fn suppressed_rule_matches_reference_on_random_prototypes() {
    let mut rng = Rng::new(40);
    for _ in 0..200 {
        let (n, d, c) = (8 + rng.below(30), 2 + rng.below(4), 2 + rng.below(4));
        let feats = l2_normalize_rows(&random_matrix(&mut rng, n, d, 1.0)).unwrap();
        let probs: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, c)).collect();
        let probs = Matrix::from_rows(&probs).unwrap();
        let ct = 2 + rng.below(3);
        let rho = rng.uniform_range(0.5, 1.0);
        let protos = build_all_prototypes(&feats, &probs, topk_count(n, ct), ct, rho, &mut rng).unwrap();
        let labels = assign_pseudo_labels(&feats, &protos);
        for i in 0..n {
            let g = feats.row(i);
            let s = |a: &[f64], b: &[f64]| cosine_similarity(a, b).unwrap_or(0.0);
            let mut best: Option<(usize, f64)> = None;
            for p in &protos {
                let score = p.epsilon * s(g, &p.positive);
                let hardest = p.negatives.iter_rows().map(|r| s(g, r)).fold(f64::NEG_INFINITY, f64::max);
                if score >= hardest && best.is_none_or(|(_, b)| score > b) {
                    best = Some((p.class_index, score));
                }
            }
            let want = best.map_or(PseudoLabel::Uniform, |(c, _)| PseudoLabel::Class(c));
            assert_eq!(labels.labels()[i], want);
        }
    }
}

#[test]
fn silhouette_line_example() {
    let pts = Matrix::from_rows(&[[0.0], [1.0], [10.0], [11.0]]).unwrap();
    let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
    let oracle = silhouette_oracle(&pts, &[0, 0, 1, 1]);
    assert!((s[0] - 0.904_762).abs() < 1e-6);
    for (a, b) in s.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn kmeans_line_example_is_optimal() {
    let pts = Matrix::from_rows(&[[0.0], [1.0], [10.0], [11.0]]).unwrap();
    let km = kmeans(&pts, 2, &mut Rng::new(3), 100, 1e-6).unwrap();
    assert!((km.inertia - 1.0).abs() < 1e-12);
    assert!((kmeans_optimum(&pts, 2) - 1.0).abs() < 1e-12);
}

#[test]
fn hungarian_small_example_and_random_integers() {
    let (perm, cost) = hungarian(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
    assert_eq!(perm, vec![1, 0]);
    assert_eq!(cost, 3.0);
    let mut rng = Rng::new(41);
    for _ in 0..100 {
        let cost: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| rng.below(10) as f64).collect()).collect();
        let (perm, total) = hungarian(&cost).unwrap();
        let (want_perm, want_total) = assignment_oracle(&cost, 1e-9);
        assert_eq!(total, want_total);
        assert_eq!(perm, want_perm);
    }
}

#[test]
fn cluster_accuracy_matches_enumeration() {
    assert_eq!(cluster_accuracy(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.5);
    let mut rng = Rng::new(42);
    for _ in 0..100 {
        let n = 1 + rng.below(20);
        let (kt, kc) = (1 + rng.below(4), 1 + rng.below(4));
        let truth: Vec<usize> = (0..n).map(|_| rng.below(kt)).collect();
        let clusters: Vec<usize> = (0..n).map(|_| rng.below(kc)).collect();
        let size = kt.max(kc);
        let best = permutations(size)
            .into_iter()
            .map(|p| (0..n).filter(|&i| p[clusters[i]] == truth[i]).count())
            .max()
            .unwrap();
        let acc = cluster_accuracy(&truth, &clusters).unwrap();
        assert!((acc - best as f64 / n as f64).abs() < 1e-12);
    }
}

#[test]
fn separated_private_clusters_are_fully_discovered() {
    let centers = [[5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]];
    for seed in 0..5 {
        let mut rng = Rng::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, m) in centers.iter().enumerate() {
            for _ in 0..20 {
                rows.push(m.iter().map(|v| v + 0.1 * rng.normal()).collect::<Vec<_>>());
                labels.push(6 + c);
            }
        }
        let feats = Matrix::from_rows(&rows).unwrap();
        assert_eq!(ncd_accuracy(&feats, &labels, 3, &mut rng).unwrap(), 1.0);
    }
}

#[test]
fn knn_line_instance() {
    let xs = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.2], [1.0, 0.5], [0.3, 1.0], [-1.0, 0.4]]).unwrap();
    let bank = MemoryBank {
        features: l2_normalize_rows(&xs).unwrap(),
        probs: Matrix::from_rows(&[[0.5, 0.5]; 5]).unwrap(),
        version: 0,
    };
    for i in 0..5 {
        let got = ufd::consensus::nearest_neighbors(&bank, xs.row(i), 2, Some(i)).unwrap();
        assert_eq!(got, knn_oracle(&xs, xs.row(i), 2, Some(i)));
    }
}

#[test]
fn negative_mining_matches_rank_skip_reference() {
    let mut rng = Rng::new(43);
    for _ in 0..50 {
        let b = 6;
        let batch: Vec<Vec<f64>> = (0..b).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let bank_feats = l2_normalize_rows(&random_matrix(&mut rng, 10, 3, 1.0)).unwrap();
        let bank = MemoryBank {
            probs: Matrix::from_rows(&[[0.5, 0.5]; 10]).unwrap(),
            features: bank_feats.clone(),
            version: 0,
        };
        let idx: Vec<usize> = (0..b).collect();
        let (n_pairs, ct) = (1 + rng.below(5), 1 + rng.below(4));
        let pairs = mine_pairs(&bank, &batch, &idx, n_pairs, ct).unwrap();
        let skip = expected_same_class(b, ct);
        for (a, ps) in pairs.iter().enumerate() {
            let mut others: Vec<(usize, f64)> = (0..b).filter(|&j| j != a).map(|j| (j, cos(&batch[a], &batch[j]))).collect();
            others.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
            let want: Vec<usize> = (0..n_pairs).map(|j| others[(skip + j) % others.len()].0).collect();
            assert_eq!(ps.negatives, want);
            assert_eq!(ps.positives, knn_oracle(&bank_feats, &batch[a], n_pairs, Some(a)));
        }
    }
}

#[test]
fn candidate_lists() {
    assert_eq!(ct_candidates(6, 1000), vec![2, 3, 6, 12, 18]);
    assert_eq!(ct_candidates(65, 10_000), vec![22, 33, 65, 130, 195]);
}

#[test]
fn pretraining_separates_two_gaussians() {
    let mut rng = Rng::new(44);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..100 {
        let c = i % 2;
        let mx = if c == 0 { -3.0 } else { 3.0 };
        rows.push(vec![mx + 0.5 * rng.normal(), 0.5 * rng.normal()]);
        labels.push(c);
    }
    let xs = Matrix::from_rows(&rows).unwrap();
    let cfg = AdaptConfig {
        pretrain_epochs: 50,
        ..AdaptConfig::default()
    };
    let dims = ModelDims {
        d_in: 2,
        d_hidden: 16,
        d_feat: 8,
        num_classes: 2,
    };
    let model = pretrain_source(&xs, &labels, dims, &cfg).unwrap();
    let recs = model.forward_rows(&xs).unwrap();
    let correct = recs.iter().zip(&labels).filter(|(r, &y)| argmax(&r.probs) == y).count();
    assert_eq!(correct, labels.len());
}

#[test]
fn well_separated_source_is_nearest_neighbor_separable() {
    let mut spec = ScenarioSpec::preset("opda-toy").unwrap();
    spec.separation = 10.0 * spec.noise_sigma;
    let (source, _) = generate(&spec).unwrap();
    let xs = &source.features;
    let n = xs.rows();
    let correct = (0..n)
        .filter(|&i| {
            let nearest = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da: f64 = xs.row(i).iter().zip(xs.row(a)).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 = xs.row(i).iter().zip(xs.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            source.labels[nearest] == source.labels[i]
        })
        .count();
    assert!(correct as f64 / n as f64 >= 0.99, "{correct}/{n}");
}
