//! Property tests over randomized inputs.

mod common;

use common::{random_matrix, random_simplex};
use proptest::prelude::*;
use ufd::adaptation::{pretrain_source, pseudo_labels_for, AdaptConfig};
use ufd::clustering::estimate_ct;
use ufd::consensus::{loss_local, nearest_neighbors, MemoryBank};
use ufd::contrastive::{loss_contrastive, mine_pairs};
use ufd::datagen::{generate, Regime, ScenarioSpec};
use ufd::evaluation::{cluster_accuracy, evaluate, h_score, known_truth, predict_probs, EvalMode, Label, Prediction};
use ufd::model::{AdaptModel, ModelDims};
use ufd::numerics::{cosine_similarity, l2_normalize_rows, normalized_entropy, Matrix, Rng};
use ufd::pseudolabel::{assign_pseudo_labels, build_all_prototypes, topk_count, ClassPrototypes, PseudoLabel};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 64,
        ..ProptestConfig::default()
    }
}

fn bank_from(rng: &mut Rng, n: usize, d: usize, c: usize) -> MemoryBank {
    let probs: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(rng, c)).collect();
    MemoryBank {
        features: l2_normalize_rows(&random_matrix(rng, n, d, 1.0)).unwrap(),
        probs: Matrix::from_rows(&probs).unwrap(),
        version: 0,
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn pseudo_label_rows_are_one_hot_or_uniform(seed in any::<u64>(), n in 6usize..40, d in 2usize..6, c in 2usize..6, ct in 2usize..5) {
        let mut rng = Rng::new(seed);
        let feats = l2_normalize_rows(&random_matrix(&mut rng, n, d, 1.0)).unwrap();
        let probs: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, c)).collect();
        let probs = Matrix::from_rows(&probs).unwrap();
        let protos = build_all_prototypes(&feats, &probs, topk_count(n, ct), ct, 0.75, &mut rng).unwrap();
        let m = assign_pseudo_labels(&feats, &protos).to_matrix();
        for row in m.iter_rows() {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            let one_hot = row.iter().filter(|&&v| v == 1.0).count() == 1 && row.iter().filter(|&&v| v == 0.0).count() == c - 1;
            let uniform = row.iter().all(|&v| v == 1.0 / c as f64);
            prop_assert!(one_hot || uniform);
        }
    }

    #[test]
    fn raising_epsilon_never_unfires(seed in any::<u64>(), bump in 0.0f64..0.5) {
        let mut rng = Rng::new(seed);
        let feats = l2_normalize_rows(&random_matrix(&mut rng, 12, 3, 1.0)).unwrap();
        let proto = ClassPrototypes {
            class_index: 0,
            positive: (0..3).map(|_| rng.normal()).collect(),
            negatives: random_matrix(&mut rng, 2, 3, 1.0),
            epsilon: rng.uniform_range(0.5, 1.0),
            reduced_from: None,
        };
        let higher = ClassPrototypes { epsilon: proto.epsilon + bump, ..proto.clone() };
        let positive = proto.positive.clone();
        let before = assign_pseudo_labels(&feats, &[proto]);
        let after = assign_pseudo_labels(&feats, &[higher]);
        for (i, (b, a)) in before.labels().iter().zip(after.labels()).enumerate() {
            // scaling a negative similarity up lowers the score
            let aligned = cosine_similarity(feats.row(i), &positive).unwrap() >= 0.0;
            if aligned && *b == PseudoLabel::Class(0) {
                prop_assert_eq!(*a, PseudoLabel::Class(0));
            }
        }
    }

    #[test]
    fn local_loss_is_at_least_target_entropy(seed in any::<u64>(), c in 2usize..8) {
        let mut rng = Rng::new(seed);
        let p = random_simplex(&mut rng, c);
        let l = random_simplex(&mut rng, c);
        let entropy: f64 = -l.iter().map(|v| v * v.ln()).sum::<f64>();
        let (loss, _) = loss_local(&[p], &[l]);
        prop_assert!(loss >= entropy - 1e-12);
    }

    #[test]
    fn neighbors_never_include_self(seed in any::<u64>(), n in 3usize..60, k in 1usize..5) {
        let mut rng = Rng::new(seed);
        let bank = bank_from(&mut rng, n, 3, 2);
        let k = k.min(n - 1);
        for i in 0..n {
            let nb = nearest_neighbors(&bank, bank.features.row(i), k, Some(i)).unwrap();
            prop_assert_eq!(nb.len(), k);
            prop_assert!(!nb.contains(&i));
        }
    }

    #[test]
    fn contrastive_values_are_bounded_and_negatives_exclude_the_anchor(seed in any::<u64>(), b in 3usize..12, n_pairs in 1usize..4, ct in 1usize..5) {
        prop_assume!(b > n_pairs);
        let mut rng = Rng::new(seed);
        let bank = bank_from(&mut rng, 20, 4, 2);
        let batch: Vec<Vec<f64>> = (0..b).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let idx: Vec<usize> = (0..b).collect();
        let pairs = mine_pairs(&bank, &batch, &idx, n_pairs, ct).unwrap();
        let n = n_pairs as f64;
        for ps in &pairs {
            prop_assert!(!ps.negatives.contains(&ps.anchor));
            let (v, _) = loss_contrastive(&batch, std::slice::from_ref(ps), &bank, &batch).unwrap();
            prop_assert!(v.abs() <= 2.0 * n + 1e-12);
        }
        // with every feature in the positive orthant cosines are in [0, 1]
        // and each anchor's term lies in [-|pos|, |neg|]
        let abs_rows = |m: &Matrix| Matrix::from_rows(&m.iter_rows().map(|r| r.iter().map(|v| v.abs()).collect::<Vec<_>>()).collect::<Vec<_>>()).unwrap();
        let bank = MemoryBank { features: abs_rows(&bank.features), ..bank };
        let batch: Vec<Vec<f64>> = batch.iter().map(|r| r.iter().map(|v| v.abs()).collect()).collect();
        for ps in mine_pairs(&bank, &batch, &idx, n_pairs, ct).unwrap() {
            let (v, _) = loss_contrastive(&batch, &[ps], &bank, &batch).unwrap();
            prop_assert!(v >= -n - 1e-12 && v <= n + 1e-12);
        }
    }

    #[test]
    fn cluster_accuracy_ignores_cluster_names(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = Rng::new(seed);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let clusters: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let rename = rng.permutation(4);
        let renamed: Vec<usize> = clusters.iter().map(|&c| rename[c] + 10).collect();
        prop_assert_eq!(cluster_accuracy(&truth, &clusters).unwrap(), cluster_accuracy(&truth, &renamed).unwrap());
    }

    #[test]
    fn h_score_is_bounded(seed in any::<u64>(), n in 2usize..50) {
        let mut rng = Rng::new(seed);
        let mut truth: Vec<Option<usize>> = (0..n).map(|_| (rng.below(2) == 0).then(|| rng.below(3))).collect();
        truth[0] = Some(0);
        truth[1] = None;
        let preds: Vec<Prediction> = (0..n)
            .map(|_| Prediction {
                label: if rng.below(3) == 0 { Label::Unknown } else { Label::Known(rng.below(3)) },
                entropy: rng.uniform(),
            })
            .collect();
        let h = h_score(&preds, &truth).unwrap();
        prop_assert!(h.h_score <= 1.0);
        prop_assert!(h.h_score <= 2.0 * h.known_acc.min(h.unknown_acc) + 1e-12);
    }

    #[test]
    fn threshold_boundaries(seed in any::<u64>(), c in 2usize..8) {
        let mut rng = Rng::new(seed);
        let p = random_simplex(&mut rng, c);
        let i = normalized_entropy(&p, c).unwrap();
        if i < 1.0 {
            prop_assert!(matches!(predict_probs(&p, 1.0).unwrap().label, Label::Known(_)));
        }
        if i > 0.0 {
            prop_assert_eq!(predict_probs(&p, 1e-9).unwrap().label, Label::Unknown);
        }
    }

    #[test]
    fn ct_estimate_is_deterministic(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let feats = random_matrix(&mut rng, 40, 4, 1.0);
        let a = estimate_ct(&feats, 6, &mut Rng::new(seed)).unwrap();
        let b = estimate_ct(&feats, 6, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn generated_pairs_respect_their_regime(seed in any::<u64>(), preset in prop::sample::select(vec!["opda-toy", "osda-toy", "pda-toy", "clda-toy"])) {
        let spec = ScenarioSpec { seed, source_per_class: 5, target_per_class: 5, ..ScenarioSpec::preset(preset).unwrap() };
        let (s, t) = generate(&spec).unwrap();
        let (s_set, t_set) = (s.label_set(), t.label_set());
        let shared = s_set.iter().filter(|l| t_set.contains(l)).count();
        prop_assert_eq!(shared, spec.n_shared);
        match spec.regime {
            Regime::Clda => prop_assert_eq!(&s_set, &t_set),
            Regime::Pda => prop_assert!(t_set.iter().all(|l| s_set.contains(l)) && s_set.len() > t_set.len()),
            Regime::Osda => prop_assert!(s_set.iter().all(|l| t_set.contains(l)) && t_set.len() > s_set.len()),
            Regime::Opda => prop_assert!(shared < s_set.len() && shared < t_set.len()),
        }
        let (s2, t2) = generate(&spec).unwrap();
        prop_assert_eq!(s.to_text(), s2.to_text());
        prop_assert_eq!(t.to_text(), t2.to_text());
    }

    #[test]
    fn pseudo_labels_depend_only_on_model_state(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let dims = ModelDims { d_in: 4, d_hidden: 8, d_feat: 4, num_classes: 3 };
        let model = AdaptModel::new(dims, &mut rng).unwrap();
        let target = random_matrix(&mut rng, 30, 4, 1.0);
        let a = pseudo_labels_for(&model, &target, 3, 0.75, &mut Rng::new(seed)).unwrap();
        let b = pseudo_labels_for(&model, &target, 3, 0.75, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn source_only_ceiling_without_shift() {
    // no covariate shift and huge separation: known samples are classified
    // perfectly, so only the rejection threshold limits the H-score
    let spec = ScenarioSpec {
        separation: 60.0,
        shift_translation: 0.0,
        shift_angle: 0.0,
        source_per_class: 40,
        target_per_class: 40,
        ..ScenarioSpec::preset("opda-toy").unwrap()
    };
    let (source, target) = generate(&spec).unwrap();
    let cfg = AdaptConfig::default();
    let dims = ModelDims {
        d_in: spec.d_in,
        d_hidden: cfg.d_hidden,
        d_feat: cfg.d_feat,
        num_classes: spec.num_source_classes(),
    };
    let model = pretrain_source(&source.features, &source.labels, dims, &cfg).unwrap();
    let report = evaluate(&model, &target.features, &target.labels, cfg.omega, EvalMode::Open, None, &mut Rng::new(0)).unwrap();
    let truth = known_truth(&target.labels, spec.num_source_classes());
    let c = report.confusion;
    assert_eq!(c.known_misclassified, 0);
    assert_eq!(c.known_correct + c.known_rejected, truth.iter().filter(|t| t.is_some()).count());
    assert_eq!(report.known_acc.unwrap(), 1.0 - c.known_rejected as f64 / (c.known_correct + c.known_rejected) as f64);
}
