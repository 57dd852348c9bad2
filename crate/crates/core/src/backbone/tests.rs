use super::*;
use crate::config::RunConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(seed: u64, n: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[f64; 3]> = (0..n).map(|_| [rng.random_range(0.0..4.0), rng.random_range(0.0..3.0), rng.random_range(0.0..2.5)]).collect();
    let mut features = Vec::with_capacity(n * 6);
    for c in &coords {
        features.extend_from_slice(c);
        features.extend((0..3).map(|_| rng.random::<f64>()));
    }
    let labels = (0..n).map(|_| rng.random_range(0..5)).collect();
    PointCloud::new(coords, features, 6, labels).unwrap()
}

fn randomize_trainable(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.get(id).trainable {
            model.store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
}

fn logits(model: &Model, cloud: &PointCloud) -> Tensor {
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, cloud).unwrap();
    tape.value(out.logits).clone()
}

#[test]
fn single_point_single_stage() {
    let mut cfg = RunConfig::default();
    cfg.backbone.stages.truncate(1);
    cfg.peft.bases.truncate(1);
    let model = Model::build(&cfg.backbone, &cfg.peft, 0, BuildMode::Finetune).unwrap();
    let cloud = random_cloud(1, 1);
    let l = logits(&model, &cloud);
    assert_eq!(l.shape(), &[1, 5]);
    assert!(l.is_finite());
}

#[test]
fn logits_shape_is_points_by_classes() {
    let cfg = RunConfig::default();
    let model = Model::build(&cfg.backbone, &cfg.peft, 0, BuildMode::Finetune).unwrap();
    for n in [1, 2, 17, 300] {
        assert_eq!(logits(&model, &random_cloud(n as u64, n)).shape(), &[n, 5]);
    }
    let mut bad = random_cloud(3, 10);
    bad.feature_dim = 3;
    bad.features.truncate(30);
    let mut tape = Tape::inference();
    assert!(model.forward(&mut tape, &bad).unwrap_err().to_string().contains("feature width"));
}

#[test]
fn fresh_overlay_leaves_logits_unchanged() {
    let cfg = RunConfig::default();
    let cloud = random_cloud(4, 257);
    let mut probe_cfg = cfg.peft.clone();
    probe_cfg.strategy = InsertionStrategy::LinearProbe;
    let probe = Model::build(&cfg.backbone, &probe_cfg, 9, BuildMode::Finetune).unwrap();
    let reference = logits(&probe, &cloud);
    for strategy in InsertionStrategy::ALL {
        let mut peft = cfg.peft.clone();
        peft.strategy = strategy;
        let model = Model::build(&cfg.backbone, &peft, 9, BuildMode::Finetune).unwrap();
        assert_eq!(logits(&model, &cloud).data(), reference.data(), "{strategy}");
    }
    // zero scale with non-trivial overlay weights
    let mut peft = cfg.peft.clone();
    peft.scale = 0.0;
    peft.adapter_scale = 0.0;
    let mut model = Model::build(&cfg.backbone, &peft, 9, BuildMode::Finetune).unwrap();
    randomize_trainable(&mut model, 1);
    let head = model.store.id("head.weight").unwrap();
    let head_b = model.store.id("head.bias").unwrap();
    model.store.get_mut(head).tensor = probe.store.get(probe.store.id("head.weight").unwrap()).tensor.clone();
    model.store.get_mut(head_b).tensor = probe.store.get(probe.store.id("head.bias").unwrap()).tensor.clone();
    assert_eq!(logits(&model, &cloud).data(), reference.data());
}

#[test]
fn permuting_points_permutes_logits() {
    let cfg = RunConfig::default();
    let mut model = Model::build(&cfg.backbone, &cfg.peft, 2, BuildMode::Finetune).unwrap();
    randomize_trainable(&mut model, 5);
    let cloud = random_cloud(6, 300);
    // first-stage codes must be distinct for the orders to agree
    for curve in CurveKind::MIXED {
        let order = sfc::serialize(&cloud.coords, curve, cfg.backbone.order_bits).unwrap();
        assert!(order.codes.windows(2).all(|w| w[0] < w[1]));
    }
    let base = logits(&model, &cloud);
    let mut perm: Vec<usize> = (0..cloud.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    let permuted = PointCloud::new(
        perm.iter().map(|&i| cloud.coords[i]).collect(),
        perm.iter().flat_map(|&i| cloud.feature_row(i).to_vec()).collect(),
        6,
        perm.iter().map(|&i| cloud.labels[i]).collect(),
    )
    .unwrap();
    let moved = logits(&model, &permuted);
    let mut worst: f64 = 0.0;
    for (k, &i) in perm.iter().enumerate() {
        for c in 0..5 {
            worst = worst.max((moved.row(k)[c] - base.row(i)[c]).abs());
        }
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn grid_pool_examples() {
    let mut tape = Tape::inference();
    let coords = [[0.1, 0.1, 0.1], [0.2, 0.3, 0.05], [0.15, 0.2, 0.3]];
    let x = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 5.0], [5.0, -1.0]]));
    let (p, map) = grid_pool(&mut tape, x, &coords, [0.0; 3], 1.0).unwrap();
    assert_eq!(map.assign, vec![0, 0, 0]);
    assert_eq!(tape.value(p).data(), &[3.0, 2.0]);
    assert!((map.centroids[0][0] - 0.15).abs() < 1e-15);

    // distinct cells: identity up to the lexicographic cell order
    let coords = [[2.5, 0.0, 0.0], [0.5, 0.0, 0.0], [1.5, 3.0, 0.0]];
    let (p, map) = grid_pool(&mut tape, x, &coords, [0.0; 3], 1.0).unwrap();
    assert_eq!(map.assign, vec![2, 0, 1]);
    assert_eq!(tape.value(p).data(), &[3.0, 5.0, 5.0, -1.0, 1.0, 2.0]);

    // a two-point cell averages exactly
    let coords = [[0.1, 0.1, 0.1], [5.0, 5.0, 5.0], [0.9, 0.9, 0.9]];
    let (p, map) = grid_pool(&mut tape, x, &coords, [0.0; 3], 2.0).unwrap();
    assert_eq!(map.assign, vec![0, 1, 0]);
    let v = tape.value(p);
    assert_eq!(v.row(0), &[(1.0 + 5.0) / 2.0, (2.0 + -1.0) / 2.0]);
    assert_eq!(v.row(1), &[3.0, 5.0]);
    assert!(map.centroids.iter().all(|c| c.iter().all(|v| v.is_finite())));
}

#[test]
fn census_matches_closed_form_and_trainable_set() {
    let cfg = RunConfig::default();
    for strategy in InsertionStrategy::ALL {
        let mut peft = cfg.peft.clone();
        peft.strategy = strategy;
        let model = Model::build(&cfg.backbone, &peft, 0, BuildMode::Finetune).unwrap();
        let (trainable, _) = model.census();
        assert_eq!(trainable, model.closed_form_trainable(), "{strategy}");
        for (_, p) in model.store.iter() {
            assert_eq!(p.trainable, !Model::is_backbone(&p.name), "{}", p.name);
        }
    }
    let model = Model::build(&cfg.backbone, &cfg.peft, 0, BuildMode::Finetune).unwrap();
    assert_eq!(model.plan.count(SiteKind::Dpp), 3);
    assert!(model.store.by_name("stage2.block2.dpp.bases").is_some());
    assert!(model.store.by_name("stage2.block1.adapter.down.weight").is_some());
    let pre = Model::build(&cfg.backbone, &cfg.peft, 0, BuildMode::Pretrain).unwrap();
    assert_eq!(pre.census().1, 0);
}

#[test]
fn load_reports_mismatched_names() {
    let cfg = RunConfig::default();
    let a = Model::build(&cfg.backbone, &cfg.peft, 0, BuildMode::Finetune).unwrap();
    let mut b = Model::build(&cfg.backbone, &cfg.peft, 1, BuildMode::Finetune).unwrap();
    let backbone = a.frozen_backbone();
    b.load(&backbone).unwrap();
    assert_eq!(crate::autodiff::frozen_blob(&a.store), crate::autodiff::frozen_blob(&b.store));

    let mut wrong = backbone.clone();
    wrong[0].tensor = Tensor::zeros(&[1, 1]);
    wrong.pop();
    wrong.push(Parameter { name: "stage9.block1.x".into(), tensor: Tensor::zeros(&[1]), trainable: false });
    let err = b.load(&wrong).unwrap_err().to_string();
    assert!(err.contains("embed.weight (shape"), "{err}");
    assert!(err.contains("stage9.block1.x (not in model)"), "{err}");
    assert!(err.contains("missing from checkpoint"), "{err}");
}
