use super::*;
use crate::data::seed::{derive, tags};
use crate::data::{
    make_views, synth_digits, synth_domain_pair, DigitSpec, Domain, EpochSampler, ImageSet, ImageShape, Shift,
    Transform,
};
use crate::losses::cda_contrastive;
use crate::model::{EncoderKind, EncoderSpec, Mode, Norm, ProjectorSpec};
use crate::numerics::Graph;
use alloc::vec;
use alloc::vec::Vec;

fn toy_pair(count: usize) -> (ImageSet, ImageSet) {
    let base = synth_digits(&DigitSpec {
        count,
        classes: 2,
        size: 8,
        seed: 3,
    })
    .unwrap();
    synth_domain_pair(&base, Shift::Invert, 4).unwrap()
}

fn toy_model(norm: Norm) -> Model {
    Model::new(
        EncoderSpec {
            input: ImageShape::new(8, 8, 1),
            kind: EncoderKind::Mlp { hidden: vec![24] },
            norm,
            output_dim: 12,
        },
        ProjectorSpec {
            hidden: [16, 16],
            output_dim: 8,
            normalize: true,
        },
    )
    .unwrap()
}

fn toy_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        batch_size: 8,
        epochs: 2,
        fnr_k: 1,
        mmd_weight: 1.0,
        seed: 17,
        optimizer: OptimizerSpec {
            learning_rate: 0.05,
            ..OptimizerSpec::default()
        },
        ..TrainConfig::default()
    }
}

fn run(model: Model, cfg: TrainConfig, s: &ImageSet, t: &ImageSet) -> (Checkpoint, Vec<LossReport>) {
    let mut reports = Vec::new();
    let ckpt = pretrain(model, cfg, s, t, &mut |r| reports.push(*r)).unwrap();
    (ckpt, reports)
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!(matches!(
        "cda_fancy".parse::<Variant>(),
        Err(Error::Unknown { kind: "variant", .. })
    ));
    assert_eq!(Variant::CdaX4augFnrMmd.views(), 4);
    assert!(Variant::CdaX4augFnrMmd.uses_fnr() && Variant::CdaX4augFnrMmd.uses_mmd());
    assert!(!Variant::SimclrBase.uses_target());
}

#[test]
fn inactive_terms_have_zero_weight() {
    let cfg = toy_config(Variant::CdaBase);
    assert_eq!((cfg.removal(), cfg.mmd_lambda()), (0, 0.0));
    let cfg = toy_config(Variant::CdaFnrMmd);
    assert_eq!((cfg.removal(), cfg.mmd_lambda()), (1, 1.0));
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig {
            batch_size: 1,
            ..toy_config(Variant::CdaBase)
        },
        TrainConfig {
            epochs: 0,
            ..toy_config(Variant::CdaBase)
        },
        TrainConfig {
            temperature: 0.0,
            ..toy_config(Variant::CdaBase)
        },
        TrainConfig {
            mmd_weight: -1.0,
            ..toy_config(Variant::CdaMmd)
        },
        TrainConfig {
            fnr_k: 14,
            ..toy_config(Variant::CdaFnr)
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    assert!(TrainConfig {
        fnr_k: 13,
        ..toy_config(Variant::CdaFnr)
    }
    .validate()
    .is_ok());
}

#[test]
fn first_step_total_is_the_domain_contrastive_loss() {
    let (s, t) = toy_pair(32);
    let model = toy_model(Norm::None);
    let cfg = TrainConfig {
        epochs: 1,
        ..toy_config(Variant::CdaMmd)
    };
    let cfg = TrainConfig { mmd_weight: 0.0, ..cfg };
    let (_, reports) = run(model.clone(), cfg.clone(), &s, &t);

    let params = model.init_params(cfg.seed).unwrap();
    let (s_idx, t_idx) = EpochSampler::new(cfg.seed).next_epoch(32, 32, 8).remove(0);
    let step_seed = derive(cfg.seed, &[tags::STEP, 0]);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| true);
    let mut z = |set: &ImageSet, idx: &[usize], domain| {
        let b = make_views(set, idx, 2, &cfg.augmentation, step_seed, domain).unwrap();
        let h = model
            .encode(&mut g, &bound, &params, b.data(), 16, Mode::Train)
            .unwrap();
        model.project(&mut g, &bound, h.features).unwrap()
    };
    let zs = z(&s, &s_idx, Domain::Source);
    let zt = z(&t, &t_idx, Domain::Target);
    let expected = cda_contrastive(&mut g, zs, zt, 8, cfg.temperature).unwrap();
    assert_eq!(reports[0].total, g.value(expected.total).item());
    assert!(reports[0].mmd > 0.0);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (s, t) = toy_pair(32);
    for variant in [Variant::CdaFnrMmd, Variant::CdaX4aug] {
        let (a, ra) = run(toy_model(Norm::Batch), toy_config(variant), &s, &t);
        let (b, rb) = run(toy_model(Norm::Batch), toy_config(variant), &s, &t);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let (c, _) = run(
            toy_model(Norm::Batch),
            TrainConfig {
                seed: 18,
                ..toy_config(variant)
            },
            &s,
            &t,
        );
        assert_ne!(a.params, c.params);
    }
}

#[test]
fn reductions_reproduce_base_trajectory() {
    let (s, t) = toy_pair(32);
    let (base, base_reports) = run(toy_model(Norm::Batch), toy_config(Variant::CdaBase), &s, &t);
    for cfg in [
        TrainConfig {
            fnr_k: 0,
            ..toy_config(Variant::CdaFnr)
        },
        TrainConfig {
            mmd_weight: 0.0,
            ..toy_config(Variant::CdaMmd)
        },
    ] {
        let (other, reports) = run(toy_model(Norm::Batch), cfg, &s, &t);
        assert_eq!(other.params, base.params);
        assert_eq!(other.optimizer, base.optimizer);
        let totals = |r: &[LossReport]| r.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(totals(&reports), totals(&base_reports));
    }
}

#[test]
fn simclr_ignores_the_target_set() {
    let (s, t) = toy_pair(32);
    let (_, other_t) = toy_pair(48);
    let (a, ra) = run(toy_model(Norm::None), toy_config(Variant::SimclrBase), &s, &t);
    let (b, _) = run(toy_model(Norm::None), toy_config(Variant::SimclrBase), &s, &other_t);
    assert_eq!(a.params, b.params);
    assert!(ra
        .iter()
        .all(|r| r.cont_t == 0.0 && r.mmd == 0.0 && r.total == r.cont_s));
}

#[test]
fn step_and_epoch_accounting() {
    let (s, t) = toy_pair(36);
    let (ckpt, reports) = run(toy_model(Norm::None), toy_config(Variant::CdaFnr), &s, &t);
    // 36 images in batches of 8: four batches plus a trailing one of four.
    assert_eq!(reports.len(), 10);
    assert_eq!((ckpt.epoch, ckpt.step), (2, 10));
    assert!(reports
        .iter()
        .enumerate()
        .all(|(i, r)| r.step == i as u64 && r.removed_per_anchor == 1.0));
    assert_eq!(reports[5].epoch, 1);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (s, t) = toy_pair(32);
    for variant in [Variant::CdaFnrMmd, Variant::CdaX4augFnr] {
        let cfg = TrainConfig {
            epochs: 3,
            optimizer: OptimizerSpec {
                schedule: Schedule::Cosine,
                ..OptimizerSpec::default()
            },
            ..toy_config(variant)
        };
        let (full, _) = run(toy_model(Norm::Batch), cfg.clone(), &s, &t);
        let mut first = Trainer::new(toy_model(Norm::Batch), cfg).unwrap();
        first.run_epoch(&s, &t, &mut |_| {}).unwrap();
        let saved = first.checkpoint();
        drop(first);
        let mut resumed = Trainer::from_checkpoint(saved).unwrap();
        resumed.run(&s, &t, &mut |_| {}).unwrap();
        assert_eq!(resumed.into_checkpoint(), full);
    }
}

#[test]
fn every_variant_descends_on_toy_pair() {
    let (s, t) = toy_pair(64);
    let mild = AugmentationPolicy::new(vec![
        Transform::RandomResizedCrop { scale: [0.7, 1.0] },
        Transform::GaussianNoise { sigma: 0.05 },
    ])
    .unwrap();
    for variant in Variant::ALL {
        let cfg = TrainConfig {
            epochs: 25,
            augmentation: mild.clone(),
            ..toy_config(variant)
        };
        let (_, reports) = run(toy_model(Norm::Batch), cfg, &s, &t);
        assert_eq!(reports.len(), 200);
        let median = |r: &[LossReport]| {
            let mut v: Vec<f64> = r.iter().map(|r| r.total).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let early = median(&reports[..20]);
        let late = median(&reports[180..]);
        assert!(late < early, "{variant}: {early} -> {late}");
    }
}

#[test]
fn non_finite_loss_aborts_with_report() {
    let (s, t) = toy_pair(16);
    let cfg = TrainConfig {
        temperature: 1e-310,
        ..toy_config(Variant::CdaBase)
    };
    let err = pretrain(toy_model(Norm::None), cfg, &s, &t, &mut |_| {}).unwrap_err();
    match err {
        Error::NonFiniteLoss(report) => assert_eq!(report.step, 0),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn mismatched_image_shape_is_a_data_error() {
    let (s, t) = toy_pair(16);
    let rgb = t.to_rgb();
    let err = pretrain(
        toy_model(Norm::None),
        toy_config(Variant::CdaBase),
        &s,
        &rgb,
        &mut |_| {},
    )
    .unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

/// Class 0 dark, class 1 bright: separable under any random encoder.
fn brightness_set(count: usize) -> ImageSet {
    let shape = ImageShape::new(8, 8, 1);
    let mut rng = crate::data::seed::rng(5);
    let mut pixels = Vec::new();
    let labels: Vec<u32> = (0..count).map(|i| (i % 2) as u32).collect();
    for &l in &labels {
        let base = if l == 0 { 0.1 } else { 0.9 };
        pixels.extend((0..shape.len()).map(|_| base + rand::Rng::random_range(&mut rng, -0.05..0.05)));
    }
    ImageSet::new(shape, pixels, Some(labels), Domain::Source, "brightness").unwrap()
}

#[test]
fn separable_features_are_classified_perfectly() {
    let set = brightness_set(40);
    let model = toy_model(Norm::None);
    let params = model.init_params(2).unwrap();
    let before = params.clone();
    let report = linear_evaluate(&model, &params, &set, &set, &EvalConfig::default()).unwrap();
    assert_eq!(report.target_accuracy, 1.0);
    assert_eq!(report.source_accuracy, 1.0);
    assert_eq!(report.source_holdout, 4);
    assert_eq!(params, before);
}

#[test]
fn relabeling_by_a_bijection_keeps_accuracy() {
    let (s, t) = toy_pair(60);
    let base = synth_digits(&DigitSpec {
        count: 60,
        classes: 3,
        size: 8,
        seed: 9,
    })
    .unwrap();
    let (s3, t3) = synth_domain_pair(&base, Shift::Invert, 1).unwrap();
    let model = toy_model(Norm::None);
    let params = model.init_params(4).unwrap();
    let cfg = EvalConfig {
        steps: 60,
        ..EvalConfig::default()
    };
    let perm = [2u32, 0, 1];
    let relabel = |set: &ImageSet| {
        let labels = set.labels().unwrap().iter().map(|&l| perm[l as usize]).collect();
        set.clone().with_labels(Some(labels)).unwrap()
    };
    let a = linear_evaluate(&model, &params, &s3, &t3, &cfg).unwrap();
    let b = linear_evaluate(&model, &params, &relabel(&s3), &relabel(&t3), &cfg).unwrap();
    assert_eq!(a, b);
    let _ = (s, t);
}

#[test]
fn majority_prediction_scores_one_over_c() {
    let labels: Vec<u32> = (0..40).map(|i| i % 4).collect();
    assert_eq!(accuracy(&[1; 40], &labels), 0.25);
    assert_eq!(accuracy(&labels, &labels), 1.0);
}

#[test]
fn evaluation_errors() {
    let set = brightness_set(10);
    let model = toy_model(Norm::None);
    let params = model.init_params(0).unwrap();
    let unlabeled = set.clone().with_labels(None).unwrap();
    let cfg = EvalConfig::default();
    assert!(matches!(
        linear_evaluate(&model, &params, &unlabeled, &set, &cfg),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        linear_evaluate(&model, &params, &set, &unlabeled, &cfg),
        Err(Error::Data(_))
    ));
    let labels = (0..10).map(|i| i % 3).collect();
    let three = set.clone().with_labels(Some(labels)).unwrap();
    assert!(matches!(
        linear_evaluate(&model, &params, &set, &three, &cfg),
        Err(Error::Data(_))
    ));
}

#[test]
fn checkpoint_lists_all_tensors() {
    let (s, t) = toy_pair(16);
    let (ckpt, _) = run(toy_model(Norm::Batch), toy_config(Variant::CdaBase), &s, &t);
    let names: Vec<String> = ckpt.tensors().into_iter().map(|(n, _)| n).collect();
    let params = ckpt.params.len();
    assert_eq!(names.len(), 2 * params + 2);
    assert!(names.contains(&"param/encoder.fc0.weight".into()));
    assert!(names.contains(&"buffer/encoder.bn0.running_var".into()));
    assert!(names.contains(&"velocity/projector.out.bias".into()));
}
