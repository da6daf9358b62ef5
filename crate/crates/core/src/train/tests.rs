use super::*;
use crate::data::{generate, SynthConfig, CATEGORY_NAMES};
use crate::model::ParamGroup;

fn dataset(n: usize, seed: u64) -> Dataset {
    let images = generate(&SynthConfig::default(), seed, n).unwrap();
    let cats = CATEGORY_NAMES.iter().map(|s| s.to_string()).collect();
    Dataset::new(images, cats, seed, [8, 1, 1]).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        val_every: 0,
        ..TrainConfig::default()
    }
}

fn group_snapshot(model: &Model, group: ParamGroup) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = model
        .params
        .iter()
        .filter(|(n, _)| ParamGroup::of(n) == group)
        .map(|(n, t)| (n.clone(), t.data().to_vec()))
        .collect();
    for (n, s) in &model.stats {
        if ParamGroup::of(n) == group {
            out.push((n.clone(), s.mean.iter().chain(&s.var).copied().collect()));
        }
    }
    out
}

#[test]
fn classification_stage_leaves_trunk_and_detection_bitwise_unchanged() {
    let ds = dataset(10, 3);
    let mut t = Trainer::new(&ds, quick(), ObjectiveConfig::default(), InferConfig::default(), 3).unwrap();
    let cfg = ModelConfig::desk();
    let mut model = t.initial_model(&cfg, RegimeKind::OpiFull).unwrap();
    let before = model.clone();
    let cls_stage = Stage {
        kind: StageKind::Classification,
        epochs: 1,
    };
    // A closed gate would leave classification untouched as well, so lower it.
    t.objective.t_p = 1e-6;
    t.run_stage(&mut model, cls_stage, 2).unwrap();
    for g in [ParamGroup::Trunk, ParamGroup::Detection] {
        assert_eq!(group_snapshot(&before, g), group_snapshot(&model, g), "{g:?} changed");
    }
    assert_ne!(
        group_snapshot(&before, ParamGroup::Classification),
        group_snapshot(&model, ParamGroup::Classification)
    );
}

#[test]
fn gradients_reach_exactly_the_trainable_groups() {
    let ds = dataset(6, 5);
    let mut t = Trainer::new(&ds, quick(), ObjectiveConfig::default(), InferConfig::default(), 5).unwrap();
    t.objective.t_p = 1e-6;
    let model = t.initial_model(&ModelConfig::desk(), RegimeKind::OpiFull).unwrap();
    let patches = t.epoch_patches(&model, StageKind::Joint, 0).unwrap();
    let batch = &patches[..4];
    for kind in [StageKind::Detection, StageKind::Classification, StageKind::Joint] {
        let mut m = model.clone();
        let mut opt = Sgd::new(0.0);
        let w = (2.0, vec![1.0; 5]);
        t.train_step(&mut m, kind, batch, 0.1, &w, &mut opt).unwrap();
        let trainable = kind.trainable();
        for (name, p) in model.params.iter() {
            let moved = m.params.get(name).unwrap().data() != p.data();
            let group = ParamGroup::of(name);
            if trainable.contains(&group) {
                assert!(opt.velocity(name).is_some(), "{kind:?}: {name} not optimized");
            } else {
                assert!(!moved && opt.velocity(name).is_none(), "{kind:?}: frozen {name} moved");
            }
        }
        // Detection-only training must leave every head weight of the
        // classification branch without a velocity entry.
        if kind == StageKind::Detection {
            assert!(model.params.names().filter(|n| n.starts_with("cls.")).all(|n| opt.velocity(n).is_none()));
        }
    }
}

#[test]
fn fifty_steps_on_a_fixed_batch_halve_the_detection_loss() {
    let ds = dataset(6, 7);
    let mut t = Trainer::new(&ds, quick(), ObjectiveConfig::default(), InferConfig::default(), 7).unwrap();
    let mut model = t.initial_model(&ModelConfig::desk(), RegimeKind::OpiFull).unwrap();
    let patches = t.epoch_patches(&model, StageKind::Detection, 0).unwrap();
    let batch = patches[..4].to_vec();
    let mut opt = Sgd::new(0.9);
    let w = (3.0, vec![1.0; 5]);
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(t.train_step(&mut model, StageKind::Detection, &batch, 0.01, &w, &mut opt).unwrap().loss_det);
    }
    assert!(losses[49] <= 0.5 * losses[0], "{} -> {}", losses[0], losses[49]);
    assert!(t.log.windows(2).all(|w| w[1].step == w[0].step + 1));
}

#[test]
fn identical_seeds_train_identically() {
    let ds = dataset(6, 11);
    let mut cfg = quick();
    cfg.budgets = StageBudgets {
        detection: 1,
        classification: 1,
        joint: 1,
    };
    let run = || {
        run_regime(
            RegimeKind::OpiFull,
            &ds,
            &ModelConfig::desk(),
            &ObjectiveConfig::default(),
            &cfg,
            &InferConfig::default(),
            11,
            None,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let stages: Vec<&str> = a.log.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(stages.first(), Some(&"detection"));
    assert_eq!(stages.last(), Some(&"joint"));
    assert!(a.log.windows(2).all(|w| w[1].step > w[0].step));
}

#[test]
fn shared_stage_prefix_trains_identically_across_regimes() {
    let ds = dataset(6, 12);
    let mut cfg = quick();
    cfg.budgets = StageBudgets {
        detection: 1,
        classification: 1,
        joint: 1,
    };
    let log_of = |r| {
        run_regime(r, &ds, &ModelConfig::desk(), &ObjectiveConfig::default(), &cfg, &InferConfig::default(), 12, None)
            .unwrap()
            .log
    };
    let a = log_of(RegimeKind::OpiStage1Only);
    let b = log_of(RegimeKind::OpiFull);
    let det = |l: &[LogRow]| l.iter().filter(|r| r.stage == "detection").cloned().collect::<Vec<_>>();
    assert!(!det(&a).is_empty());
    assert_eq!(det(&a), det(&b));
}

#[test]
fn non_finite_loss_stops_training() {
    let mut ds = dataset(6, 13);
    for im in &mut ds.images {
        im.pixels.data_mut()[0] = f64::NAN;
    }
    let mut cfg = quick();
    cfg.augment.probability = 0.0;
    let err = run_regime(
        RegimeKind::Sfcn,
        &ds,
        &ModelConfig::desk(),
        &ObjectiveConfig::default(),
        &cfg,
        &InferConfig::default(),
        13,
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 1, .. }), "{err}");
}

#[test]
fn five_class_regime_has_no_detection_parameters() {
    let ds = dataset(6, 17);
    let mut cfg = quick();
    cfg.budgets = StageBudgets {
        detection: 0,
        classification: 0,
        joint: 1,
    };
    let out = run_regime(
        RegimeKind::Fcn5cls,
        &ds,
        &ModelConfig::desk(),
        &ObjectiveConfig::default(),
        &cfg,
        &InferConfig::default(),
        17,
        None,
    )
    .unwrap();
    assert!(out.model.params.names().all(|n| ParamGroup::of(n) != ParamGroup::Detection));
    assert!(out.log.iter().all(|r| r.stage == "five_class" && r.loss_det == 0.0));
}

#[test]
fn checkpoints_are_written_per_stage_and_for_best_validation() {
    let ds = dataset(10, 19);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick();
    cfg.val_every = 1;
    cfg.budgets = StageBudgets {
        detection: 1,
        classification: 1,
        joint: 0,
    };
    let out = run_regime(
        RegimeKind::OpiStage1Only,
        &ds,
        &ModelConfig::desk(),
        &ObjectiveConfig::default(),
        &cfg,
        &InferConfig::default(),
        19,
        Some(dir.path()),
    )
    .unwrap();
    for f in ["stage1_detection.ckpt", "stage2_classification.ckpt", "stage1_detection_best.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert_eq!(out.validation.len(), 2);
    let loaded = crate::model::load_checkpoint(&dir.path().join("stage2_classification.ckpt"), &out.model.config).unwrap();
    assert_eq!(loaded, out.model);
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = dataset(4, 1);
    let bad = TrainConfig {
        batch_size: 1,
        ..TrainConfig::default()
    };
    assert!(Trainer::new(&ds, bad, ObjectiveConfig::default(), InferConfig::default(), 1).is_err());
}
