use super::*;
use crate::data::{make_synthetic, SyntheticShapeSpec};
use crate::networks::{build, NetworkConfig};

fn tiny_data(seed: u64) -> Dataset {
    make_synthetic(&SyntheticShapeSpec {
        points: 64,
        train_per_class: 4,
        test_per_class: 2,
        seed,
        ..SyntheticShapeSpec::default()
    })
    .unwrap()
}

fn tiny_net(seed: u64) -> Network {
    let mut c = NetworkConfig::classification(4, 2, 4);
    c.input_points = 64;
    build(&c, seed).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        votes: 1,
        eval_each_epoch: false,
        ..TrainConfig::default()
    }
}

fn values(net: &Network) -> Vec<f64> {
    net.store.named_tensors().flat_map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let data = tiny_data(0);
    let mut net = tiny_net(0);
    let mut cfg = quick(1);
    cfg.adam.lr = 0.0;
    let before: Vec<f64> = net.store.params().iter().flat_map(|p| p.value.data().to_vec()).collect();
    train(&mut net, &data, &cfg, &mut |_| {}).unwrap();
    let after: Vec<f64> = net.store.params().iter().flat_map(|p| p.value.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn training_is_deterministic_and_moves_the_loss() {
    let data = tiny_data(1);
    let run = || {
        let mut net = tiny_net(3);
        let logs = train(&mut net, &data, &quick(2), &mut |_| {}).unwrap();
        (values(&net), logs.iter().map(|l| l.train_loss).collect::<Vec<_>>())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_ne!(values(&tiny_net(3)), a);
    assert!(la.iter().all(|l| l.is_finite()));
}

#[test]
fn single_vote_without_scaling_matches_plain_eval() {
    let data = tiny_data(2);
    let net = tiny_net(1);
    let idx = data.indices(Split::Test);
    let ev = evaluate_voting(&net, &data, &idx, 1, &AugmentParams::IDENTITY, 9, 3).unwrap();
    let clouds: Vec<PointCloud> = idx.iter().map(|&i| data.samples[i].clone()).collect();
    let geo = idx.iter().map(|&i| rng::derive(9, &[VOTE_GEOMETRY, i as u64, 0])).collect();
    let mut tape = Tape::new();
    let f = net.forward(&mut tape, &clouds, false, &mut rng::seeded(0), geo).unwrap();
    let probs = softmax_rows(tape.value(f.output).data(), 4);
    for (p, row) in ev.predictions.iter().zip(probs.chunks_exact(4)) {
        for (a, b) in p.probs.iter().zip(row) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn voting_ignores_order_and_batching() {
    let data = tiny_data(3);
    let net = tiny_net(2);
    let idx = data.indices(Split::Test);
    let scaling = TrainConfig::default().vote_scaling();
    let a = evaluate_voting(&net, &data, &idx, 3, &scaling, 4, 8).unwrap();
    let mut rev = idx.clone();
    rev.reverse();
    let b = evaluate_voting(&net, &data, &rev, 3, &scaling, 4, 3).unwrap();
    for p in &a.predictions {
        let q = b.predictions.iter().find(|q| q.id == p.id).unwrap();
        for (x, y) in p.probs.iter().zip(&q.probs) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
    assert_eq!(a.metrics.accuracy, b.metrics.accuracy);
    assert!(evaluate_voting(&net, &data, &idx, 0, &scaling, 4, 8).is_err());
}

#[test]
fn miou_hand_example() {
    // Class 0 has parts {0, 1}; class 1 has parts {2, 3}.
    let sets = vec![vec![0, 1], vec![2, 3]];
    let preds = vec![vec![0, 0, 1, 1], vec![2, 2, 2, 2]];
    let labels = vec![vec![0, 1, 1, 1], vec![2, 2, 2, 2]];
    // Instance 0: part 0 IoU 1/2, part 1 IoU 2/3. Instance 1: part 2 IoU 1,
    // part 3 absent from both so it scores 1.
    let i0 = (0.5 + 2.0 / 3.0) / 2.0;
    let (class, inst) = compute_miou(&preds, &labels, &[0, 1], &sets).unwrap();
    assert!((inst - (i0 + 1.0) / 2.0).abs() <= 1e-12);
    assert!((class - (i0 + 1.0) / 2.0).abs() <= 1e-12);

    let (class, inst) = compute_miou(&[preds[0].clone(), preds[0].clone(), preds[1].clone()], &[labels[0].clone(), labels[0].clone(), labels[1].clone()], &[0, 0, 1], &sets).unwrap();
    assert!((class - (i0 + 1.0) / 2.0).abs() <= 1e-12);
    assert!((inst - (2.0 * i0 + 1.0) / 3.0).abs() <= 1e-12);
    assert!(compute_miou(&[], &[], &[], &sets).is_err());
}

#[test]
fn segmentation_and_normal_objectives_train() {
    let mut data = tiny_data(4);
    data.task = Task::PartSegmentation;
    let parts = data.num_part_labels();
    let mut c = NetworkConfig::segmentation(4, 2, parts, 4);
    c.input_points = 64;
    let mut net = build(&c, 0).unwrap();
    let logs = train(&mut net, &data, &quick(1), &mut |_| {}).unwrap();
    assert!(logs[0].train_loss.is_finite());
    let idx = data.indices(Split::Test);
    let ev = evaluate_voting(&net, &data, &idx, 2, &TrainConfig::default().vote_scaling(), 0, 4).unwrap();
    let m = ev.metrics;
    assert!(m.class_miou.unwrap() >= 0.0 && m.class_miou.unwrap() <= 1.0);
    assert!(m.instance_miou.unwrap() >= 0.0 && m.accuracy.unwrap() <= 1.0);

    let mut c = NetworkConfig::normal_estimation(4, 2, 4);
    c.input_points = 64;
    let mut net = build(&c, 0).unwrap();
    data.task = Task::NormalEstimation;
    let logs = train(&mut net, &data, &quick(1), &mut |_| {}).unwrap();
    assert!(logs[0].train_loss >= 0.0 && logs[0].train_loss <= 2.0);
    let ev = evaluate_voting(&net, &data, &idx, 2, &TrainConfig::default().vote_scaling(), 0, 4).unwrap();
    let deg = ev.metrics.normal_angle_deg.unwrap();
    assert!((0.0..=180.0).contains(&deg));
}

#[test]
fn non_finite_loss_names_a_layer() {
    let data = tiny_data(5);
    let mut net = tiny_net(0);
    let id = net.store.id("stage1.ppool.slp.weight").unwrap();
    net.store.value_mut(id).data_mut()[0] = f64::NAN;
    let err = train(&mut net, &data, &quick(1), &mut |_| {}).unwrap_err();
    match err {
        Error::NonFinite { layer } => assert_eq!(layer, "stage1.ppool"),
        other => panic!("{other}"),
    }
}

#[test]
fn epoch_log_line() {
    let log = EpochLog {
        epoch: 3,
        train_loss: 0.5,
        train_acc: 0.25,
        test_acc: None,
        wall_seconds: 1.0,
    };
    assert_eq!(log.tsv(), "3\t0.500000\t0.250000\tnan\t1.000");
    assert_eq!(EpochLog::HEADER.split('\t').count(), log.tsv().split('\t').count());
}

#[test]
fn stop_at_ends_training_early() {
    let data = tiny_data(6);
    let mut net = tiny_net(0);
    let cfg = TrainConfig {
        eval_each_epoch: true,
        stop_at: Some(0.0),
        ..quick(3)
    };
    let logs = train(&mut net, &data, &cfg, &mut |_| {}).unwrap();
    assert_eq!(logs.len(), 1);
    let cfg = TrainConfig {
        eval_each_epoch: false,
        stop_at: Some(0.5),
        ..quick(1)
    };
    assert!(train(&mut net, &data, &cfg, &mut |_| {}).is_err());
}
