use daod_core::augment::TransformKind;
use daod_core::datamodel::{make_synthetic_shift, SyntheticConfig};
use daod_core::detector::{init_params, DetectorConfig};
use daod_core::distill::{DistillConfig, DistillMode};
use daod_core::trainer::{
    burn_in, run_training, BurnIn, MethodPreset, RunOptions, TeacherUpdate, TrainConfig, Trainer, ALIGN_IMAGE_NAME,
    ALIGN_INSTANCE_NAME,
};
use daod_core::{DomainPair, Error};

fn tiny_pair(seed: u64) -> DomainPair {
    let cfg = SyntheticConfig {
        image_size: 32,
        source_train: 20,
        target_train: 12,
        target_test: 6,
        target_train_labeled: 12,
        min_object_size: 8.0,
        max_object_size: 14.0,
        ..Default::default()
    };
    make_synthetic_shift(&cfg, seed).unwrap()
}

fn tiny_detector() -> DetectorConfig {
    DetectorConfig {
        backbone_channels: vec![4, 6],
        feature_stride: 4,
        rpn_channels: 6,
        anchor_sizes: vec![8.0, 14.0],
        anchor_aspect_ratios: vec![1.0],
        rpn_samples: 24,
        roi_samples: 12,
        pre_nms_proposals: 40,
        train_proposals: 10,
        test_proposals: 10,
        roi_pool_size: 2,
        roi_hidden: 8,
        ..Default::default()
    }
}

fn tiny_base() -> TrainConfig {
    TrainConfig {
        detector: tiny_detector(),
        total_batch: 4,
        learning_rate: 0.02,
        iterations: 6,
        eval_every: 3,
        ..Default::default()
    }
}

fn preset(p: MethodPreset) -> TrainConfig {
    p.apply(&tiny_base(), 32).unwrap()
}

#[test]
fn source_only_logs_only_supervised_terms() {
    let pair = tiny_pair(1);
    let run = run_training(&preset(MethodPreset::SourceOnly), &pair, &RunOptions::default()).unwrap();
    assert!(run.completed);
    assert_eq!(run.metric_curve.iter().map(|c| c.0).collect::<Vec<_>>(), vec![3, 6, 9]);
    for log in &run.loss_log {
        let names: Vec<&str> = log.losses.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["loss_rpn_obj", "loss_rpn_reg", "loss_roi_cls", "loss_roi_reg"]);
        assert_eq!((log.n_source, log.n_target), (4, 0));
    }
}

#[test]
fn enabled_objectives_are_logged_every_iteration() {
    let pair = tiny_pair(2);
    let mut cfg = preset(MethodPreset::SadaStyle);
    cfg.target_fraction = 0.25;
    let run = run_training(&cfg, &pair, &RunOptions::default()).unwrap();
    for log in &run.loss_log {
        assert_eq!((log.n_source, log.n_target), (3, 1));
        assert!(log.losses.iter().any(|(n, _)| n == ALIGN_IMAGE_NAME));
        assert!(log.losses.iter().any(|(n, _)| n == ALIGN_INSTANCE_NAME));
        assert!(!log.losses.iter().any(|(n, _)| n.starts_with("distill")));
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let pair = tiny_pair(3);
    let cfg = preset(MethodPreset::AldiPp);
    let a = run_training(&cfg, &pair, &RunOptions::default()).unwrap();
    let b = run_training(&cfg, &pair, &RunOptions::default()).unwrap();
    assert_eq!(a.loss_log, b.loss_log);
    assert_eq!(a.final_teacher, b.final_teacher);
    assert_eq!(a.metric_curve, b.metric_curve);

    let mut other = cfg.clone();
    other.seed = 1;
    let c = run_training(&other, &pair, &RunOptions::default()).unwrap();
    assert_ne!(a.loss_log, c.loss_log);
}

fn distill_config(mode: DistillMode) -> TrainConfig {
    let mut cfg = tiny_base();
    cfg.distill = Some(DistillConfig {
        mode,
        confidence_threshold: 0.3,
        ..Default::default()
    });
    cfg
}

#[test]
fn frozen_ema_keeps_teacher_bit_identical() {
    let pair = tiny_pair(4);
    let mut cfg = distill_config(DistillMode::Soft);
    cfg.ema.alpha = 1.0;
    let trainer = Trainer::new(&cfg, &pair.source_train, &pair.target_train, None).unwrap();
    let mut state = trainer.init_state(init_params(&cfg.detector, 7).unwrap(), None).unwrap();
    let before = state.teacher.clone().unwrap();
    for _ in 0..3 {
        trainer.step(&mut state).unwrap();
        assert_eq!(state.teacher.as_ref().unwrap(), &before);
    }
    assert_ne!(state.student, before);
}

#[test]
fn student_is_teacher_after_every_step() {
    let pair = tiny_pair(5);
    let mut cfg = distill_config(DistillMode::Hard);
    cfg.teacher_update = TeacherUpdate::StudentIsTeacher;
    let trainer = Trainer::new(&cfg, &pair.source_train, &pair.target_train, None).unwrap();
    let mut state = trainer.init_state(init_params(&cfg.detector, 7).unwrap(), None).unwrap();
    for _ in 0..3 {
        trainer.step(&mut state).unwrap();
        assert_eq!(state.teacher.as_ref().unwrap(), &state.student);
    }
}

#[test]
fn teacher_update_none_freezes_teacher() {
    let pair = tiny_pair(5);
    let mut cfg = distill_config(DistillMode::Hard);
    cfg.teacher_update = TeacherUpdate::None;
    let trainer = Trainer::new(&cfg, &pair.source_train, &pair.target_train, None).unwrap();
    let init = init_params(&cfg.detector, 7).unwrap();
    let mut state = trainer.init_state(init.clone(), None).unwrap();
    trainer.step(&mut state).unwrap();
    trainer.step(&mut state).unwrap();
    assert_eq!(state.teacher.as_ref().unwrap(), &init);
    assert!(!cfg.teacher_evolves());
    assert_eq!(state.kept(&cfg), &state.student);
}

#[test]
fn gradients_never_reach_the_teacher() {
    let pair = tiny_pair(6);
    for mode in [DistillMode::Soft, DistillMode::Hard] {
        let mut cfg = distill_config(mode);
        cfg.target_fraction = 1.0;
        let trainer = Trainer::new(&cfg, &pair.source_train, &pair.target_train, None).unwrap();
        let student = init_params(&cfg.detector, 8).unwrap();
        let teacher = init_params(&cfg.detector, 9).unwrap();
        let mut state = trainer.init_state(student.clone(), Some(teacher.clone())).unwrap();
        let out = trainer.gradient_step(&mut state).unwrap();
        assert_eq!(out.n_source, 0);
        assert!(out.losses.terms.iter().all(|(n, _)| n.starts_with("distill")));
        assert_eq!(state.teacher.as_ref().unwrap(), &teacher);
        assert_ne!(state.student, student);
    }
}

#[test]
fn burn_in_modes() {
    let pair = tiny_pair(7);
    let init = init_params(&tiny_detector(), 3).unwrap();
    let mut cfg = tiny_base();

    cfg.burn_in = BurnIn::None;
    let r = burn_in(&pair.source_train, &cfg, init.clone()).unwrap();
    assert_eq!(r.params, init);
    assert_eq!(r.stop_iteration, 0);

    cfg.burn_in = BurnIn::Fixed { iterations: 100 };
    let r = burn_in(&pair.source_train, &cfg, init.clone()).unwrap();
    assert_eq!(r.stop_iteration, 100);
    assert_ne!(r.params, init);
    r.ema_params.check_compatible(&r.params).unwrap();
}

#[test]
fn robust_burn_in_stops_early_and_returns_best_snapshot() {
    let pair = tiny_pair(8);
    let mut cfg = tiny_base();
    cfg.eval_every = 2;
    cfg.burn_in = BurnIn::Robust {
        max_iterations: 400,
        patience: 3,
        val_fraction: 0.2,
    };
    let r = burn_in(&pair.source_train, &cfg, init_params(&cfg.detector, 3).unwrap()).unwrap();
    assert!(r.stop_iteration < 400, "stopped at {}", r.stop_iteration);
    let best = r.val_curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let tail: Vec<f64> = r.val_curve.iter().rev().take(3).map(|c| c.1).collect();
    assert!(tail.iter().all(|&v| v <= best));
    assert_eq!(r.val_curve.last().unwrap().0, r.stop_iteration);
}

#[test]
fn robust_burn_in_needs_a_validation_split() {
    let pair = tiny_pair(8);
    let mut cfg = tiny_base();
    cfg.burn_in = BurnIn::Robust {
        max_iterations: 10,
        patience: 3,
        val_fraction: 0.0,
    };
    assert!(burn_in(&pair.source_train, &cfg, init_params(&cfg.detector, 3).unwrap()).is_err());
}

#[test]
fn presets_encode_the_settings_table() {
    let so = preset(MethodPreset::SourceOnly);
    assert_eq!(so.target_fraction, 0.0);
    assert!(so.distill.is_none());
    assert!(!so.align.image_level && !so.align.instance_level && !so.align.img2img);

    let oracle = preset(MethodPreset::Oracle);
    assert_eq!(oracle.target_fraction, 1.0);
    assert!(oracle.target_supervised && oracle.ema.enabled);

    let mt = preset(MethodPreset::MeanTeacherBase);
    let d = mt.distill.as_ref().unwrap();
    assert_eq!((d.mode, d.confidence_threshold), (DistillMode::Hard, 0.8));
    assert_eq!(mt.target_fraction, 0.5);
    assert!(!mt.align.image_level && !mt.align.instance_level);
    assert_eq!(mt.teacher_update, TeacherUpdate::Ema);

    let aldi = preset(MethodPreset::AldiPp);
    assert!(matches!(aldi.burn_in, BurnIn::Robust { .. }));
    assert_eq!(aldi.distill.as_ref().unwrap().mode, DistillMode::Soft);
    assert_eq!(aldi.target_fraction, 0.5);
    assert!(!aldi.align.image_level && !aldi.align.instance_level && !aldi.align.img2img);
    let has = |kinds: &[TransformKind], f: fn(&TransformKind) -> bool| kinds.iter().any(f);
    for kinds in [&aldi.pipelines.source.kinds, &aldi.pipelines.target.kinds] {
        assert!(has(kinds, |k| matches!(k, TransformKind::HFlip)));
        assert!(has(kinds, |k| matches!(k, TransformKind::MultiScale { .. })));
        assert!(has(kinds, |k| matches!(k, TransformKind::ColorJitter { .. })));
    }
    assert!(has(&aldi.pipelines.source.kinds, |k| matches!(k, TransformKind::Cutout { .. })));
    assert!(has(&aldi.pipelines.target.kinds, |k| matches!(k, TransformKind::MicMask { .. })));

    for p in MethodPreset::ALL {
        let c = preset(p);
        c.validate().unwrap();
        assert_eq!(p.to_string().parse::<MethodPreset>().unwrap(), p);
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let pair = tiny_pair(9);
    let cfg = preset(MethodPreset::MeanTeacherBase);
    let full = run_training(&cfg, &pair, &RunOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(3),
        ..Default::default()
    };
    let partial = run_training(&cfg, &pair, &opts).unwrap();
    assert!(!partial.completed);
    let resumed = run_training(
        &cfg,
        &pair,
        &RunOptions {
            resume: true,
            stop_after: None,
            ..opts
        },
    )
    .unwrap();
    assert!(resumed.completed);
    assert_eq!(resumed.loss_log, full.loss_log);
    assert_eq!(resumed.metric_curve, full.metric_curve);
    assert_eq!(resumed.final_teacher, full.final_teacher);
}

#[test]
fn resume_rejects_a_different_config() {
    let pair = tiny_pair(9);
    let cfg = preset(MethodPreset::SourceOnly);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(3),
        ..Default::default()
    };
    run_training(&cfg, &pair, &opts).unwrap();
    let mut other = cfg.clone();
    other.learning_rate *= 2.0;
    let opts = RunOptions { resume: true, ..opts };
    assert!(run_training(&other, &pair, &opts).is_err());
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let pair = tiny_pair(10);
    let mut cfg = preset(MethodPreset::SourceOnly);
    cfg.learning_rate = 1e200;
    cfg.grad_clip = 0.0;
    match run_training(&cfg, &pair, &RunOptions::default()) {
        Err(Error::NonFiniteLoss { iteration, terms }) => {
            assert!(iteration < cfg.iterations);
            assert!(!terms.is_empty());
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}
