//! Training-stack contracts: exact loss decomposition, the untrained
//! loss anchor through the real training loop, scheduling-independent
//! determinism, divergence handling, and metric invariances.

use geosegnet::autodiff::{Graph, Mode, ParamStore};
use geosegnet::network::{Network, NetworkConfig, STAGES};
use geosegnet::pointcloud::LabeledCloud;
use geosegnet::training::{
    build_supervision, evaluate, multi_stage_loss, train, ConfusionMatrix, TrainOptions,
    LOG_CSV_HEADER,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn tiny_config(class_count: usize) -> NetworkConfig {
    let mut cfg = NetworkConfig::new(class_count);
    cfg.ratios = [1, 2, 2, 2, 2];
    cfg.widths = [8, 8, 8, 8, 8];
    cfg.k1 = 4;
    cfg.k2 = 6;
    cfg.eigen_k = 3;
    cfg.seed = 21;
    cfg
}

fn random_cloud(n: usize, classes: usize, seed: u64) -> LabeledCloud {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let positions = (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..0.6),
            ]
        })
        .collect();
    let colors = (0..n)
        .map(|_| {
            [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ]
        })
        .collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    LabeledCloud::new(positions, colors, labels, classes).unwrap()
}

fn jitter_params(store: &mut ParamStore, seed: u64, amplitude: f64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let names: Vec<String> = store
        .iter()
        .filter(|(_, _, trainable)| *trainable)
        .map(|(name, _, _)| name.to_string())
        .collect();
    for name in &names {
        for v in &mut store.get_mut(name).unwrap().data {
            *v += rng.gen_range(-amplitude..amplitude);
        }
    }
}

/// Mean cross-entropy computed with plain floating-point arithmetic.
fn hand_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let mut sum = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        sum += lse - row[label];
    }
    sum / labels.len() as f64
}

#[test]
fn loss_decomposes_into_its_reported_terms() {
    let classes = 3;
    let net = Network::new(tiny_config(classes)).unwrap();
    let mut store = net.init_params().unwrap();
    jitter_params(&mut store, 31, 0.2);
    let cloud = random_cloud(80, classes, 8);
    let mut stages = net.encode(&cloud).unwrap();
    let sup = build_supervision(&mut stages, &cloud.labels, classes).unwrap();

    let g = Graph::new();
    let mut stats = Vec::new();
    let out = net
        .forward(&g, &store, &cloud, &stages, Mode::Train, &mut stats)
        .unwrap();
    let (lambda1, lambda2) = (0.3, 0.25);
    let (report, total, diag) =
        multi_stage_loss(&g, &out, &stages, &sup, lambda1, lambda2, 0.9).unwrap();

    let recomposed = report.l_final
        + lambda1 * report.l_pred.iter().sum::<f64>()
        + lambda2 * report.l_cbl;
    assert!(
        (report.total - recomposed).abs() < 1e-9,
        "total {} vs recomposed {recomposed}",
        report.total
    );
    assert!((g.scalar_value(total).unwrap() - report.total).abs() < 1e-12);
    assert!(diag.scored > 0, "contrastive term scored no anchors");

    // Every cross-entropy component matches hand arithmetic on the raw
    // logits the graph produced.
    let final_logits = g.data(out.final_logits);
    let by_hand = hand_cross_entropy(&final_logits, &sup.stage_labels[0], classes);
    assert!((report.l_final - by_hand).abs() < 1e-9);
    for n in 0..STAGES {
        let logits = g.data(out.stage_logits[n]);
        let by_hand = hand_cross_entropy(&logits, &sup.stage_labels[n], classes);
        assert!(
            (report.l_pred[n] - by_hand).abs() < 1e-9,
            "stage {n}: {} vs {by_hand}",
            report.l_pred[n]
        );
    }
}

#[test]
fn zero_weights_reduce_the_total_to_the_final_loss_bitwise() {
    let classes = 2;
    let net = Network::new(tiny_config(classes)).unwrap();
    let mut store = net.init_params().unwrap();
    jitter_params(&mut store, 32, 0.2);
    let cloud = random_cloud(72, classes, 9);
    let mut stages = net.encode(&cloud).unwrap();
    let sup = build_supervision(&mut stages, &cloud.labels, classes).unwrap();

    let run = |lambda1: f64, lambda2: f64| {
        let g = Graph::new();
        let mut stats = Vec::new();
        let out = net
            .forward(&g, &store, &cloud, &stages, Mode::Train, &mut stats)
            .unwrap();
        multi_stage_loss(&g, &out, &stages, &sup, lambda1, lambda2, 0.9)
            .unwrap()
            .0
    };

    let zero = run(0.0, 0.0);
    assert_eq!(zero.total.to_bits(), zero.l_final.to_bits());
    assert_eq!(zero.l_cbl, 0.0);
    // The components are still reported when their weight is zero.
    assert!(zero.l_pred.iter().all(|&v| v > 0.0));

    // The final term itself is unchanged by the weights: same forward,
    // same value, bit for bit.
    let weighted = run(0.4, 0.3);
    assert_eq!(zero.l_final.to_bits(), weighted.l_final.to_bits());
    assert!(weighted.total > weighted.l_final);
}

#[test]
fn first_epoch_loss_sits_at_the_untrained_anchor() {
    // With zero-initialized heads the first batch's loss is exactly
    // (1 + 5 lambda1) ln C; one epoch of updates keeps the logged mean
    // well within 30 percent of that anchor.
    let mut cfg = tiny_config(2);
    cfg.lambda1 = 0.1;
    cfg.lambda2 = 0.0;
    let net = Network::new(cfg).unwrap();
    let scenes = vec![random_cloud(200, 2, 10), random_cloud(200, 2, 11)];
    let holdout = random_cloud(120, 2, 12);
    let opts = TrainOptions {
        epochs: 1,
        batch_size: 2,
        batches_per_epoch: 2,
        column_points: 64,
        column_section: 1.5,
        threads: 1,
        ..TrainOptions::default()
    };
    let run = train(&net, &scenes, &holdout, &opts).unwrap();
    assert!(!run.aborted);
    assert_eq!(run.log.len(), 1);
    let anchor = 1.5 * 2.0f64.ln();
    let got = run.log[0].report.total;
    assert!(
        (got - anchor).abs() < 0.3 * anchor,
        "first-epoch loss {got} strays from the untrained anchor {anchor}"
    );
    assert_eq!(run.log[0].report.l_cbl, 0.0);
}

#[test]
fn training_is_deterministic_across_worker_counts() {
    let mut cfg = tiny_config(2);
    cfg.lambda1 = 0.1;
    cfg.lambda2 = 0.2;
    let scenes = vec![random_cloud(200, 2, 13), random_cloud(200, 2, 14)];
    let holdout = random_cloud(100, 2, 15);
    let opts = |threads: usize| TrainOptions {
        epochs: 2,
        batch_size: 3,
        batches_per_epoch: 2,
        column_points: 64,
        column_section: 1.5,
        threads,
        ..TrainOptions::default()
    };

    let net = Network::new(cfg).unwrap();
    let serial = train(&net, &scenes, &holdout, &opts(1)).unwrap();
    let parallel = train(&net, &scenes, &holdout, &opts(3)).unwrap();

    assert_eq!(serial.log.len(), parallel.log.len());
    for (a, b) in serial.log.iter().zip(&parallel.log) {
        assert_eq!(a.csv_row(), b.csv_row());
    }
    for ((na, ta, _), (nb, tb, _)) in serial.store.iter().zip(parallel.store.iter()) {
        assert_eq!(na, nb);
        let bits_a: Vec<u64> = ta.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = tb.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "tensor {na} differs across worker counts");
    }
    assert_eq!(
        LOG_CSV_HEADER.split(',').count(),
        serial.log[0].csv_row().split(',').count()
    );
}

#[test]
fn divergence_aborts_and_returns_the_last_good_state() {
    let mut cfg = tiny_config(2);
    cfg.lambda1 = 0.1;
    cfg.lambda2 = 0.0;
    let net = Network::new(cfg).unwrap();
    let scenes = vec![random_cloud(200, 2, 16)];
    let holdout = random_cloud(100, 2, 17);
    let opts = TrainOptions {
        epochs: 3,
        batch_size: 2,
        batches_per_epoch: 2,
        learning_rate: 1e308,
        column_points: 64,
        column_section: 1.5,
        threads: 1,
        ..TrainOptions::default()
    };
    let run = train(&net, &scenes, &holdout, &opts).unwrap();
    assert!(run.aborted, "absurd learning rate failed to diverge");
    assert!(run.log.len() < 3);

    // The abort happened before any epoch completed, so the returned
    // state is the initialization, bit for bit.
    let fresh = net.init_params().unwrap();
    for ((na, ta, _), (nb, tb, _)) in run.store.iter().zip(fresh.iter()) {
        assert_eq!(na, nb);
        let bits_a: Vec<u64> = ta.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = tb.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "tensor {na} moved before the abort");
    }
}

#[test]
fn class_count_mismatches_are_rejected() {
    let net = Network::new(tiny_config(2)).unwrap();
    let store = net.init_params().unwrap();
    let wrong = random_cloud(64, 3, 18);
    let err = evaluate(&net, &store, std::slice::from_ref(&wrong)).unwrap_err();
    assert!(matches!(
        err,
        geosegnet::Error::ClassCountMismatch {
            expected: 2,
            actual: 3
        }
    ));

    let scenes = vec![random_cloud(200, 2, 19)];
    let err = train(&net, &scenes, &wrong, &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, geosegnet::Error::ClassCountMismatch { .. }));

    let err = train(&net, &[], &random_cloud(64, 2, 20), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, geosegnet::Error::InvalidArgument(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Relabeling the classes by any permutation permutes per-class IoU
    /// and leaves the aggregate metrics unchanged.
    #[test]
    fn metrics_are_invariant_under_class_relabeling(
        seed in 0u64..1_000,
        classes in 2usize..6,
        len in 1usize..200,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let gt: Vec<usize> = (0..len).map(|_| rng.gen_range(0..classes)).collect();
        let pred: Vec<usize> = (0..len).map(|_| rng.gen_range(0..classes)).collect();
        let mut perm: Vec<usize> = (0..classes).collect();
        for i in (1..classes).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }

        let mut base = ConfusionMatrix::new(classes);
        base.tally(&gt, &pred).unwrap();
        let gt_p: Vec<usize> = gt.iter().map(|&c| perm[c]).collect();
        let pred_p: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        let mut relabeled = ConfusionMatrix::new(classes);
        relabeled.tally(&gt_p, &pred_p).unwrap();

        prop_assert!((base.overall_accuracy() - relabeled.overall_accuracy()).abs() < 1e-12);
        prop_assert!((base.mean_iou() - relabeled.mean_iou()).abs() < 1e-12);
        prop_assert!((base.mean_accuracy() - relabeled.mean_accuracy()).abs() < 1e-12);
        for c in 0..classes {
            prop_assert_eq!(base.class_iou(c), relabeled.class_iou(perm[c]));
        }
    }
}
