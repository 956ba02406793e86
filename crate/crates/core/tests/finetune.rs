mod common;

use landtune::finetune::{
    build_feature_cache, fine_tune, finetune_dropout_ga, finetune_group_params, finetune_last_k, Convergence,
    FeatureCache, FineTuneConfig, GaConfig, Method,
};
use landtune::model::{predict_scene, ModelParams, TileGrid};
use landtune::synth::{generate_scene, Scene, SceneConfig};
use landtune::{Error, LabelPoint};
use proptest::prelude::*;

fn small_target(seed: u64) -> Scene {
    generate_scene(&SceneConfig {
        rows: 112,
        cols: 112,
        ..SceneConfig::target(seed)
    })
    .unwrap()
}

fn labels_for(scene: &Scene, base: &ModelParams, count: usize, seed: u64) -> Vec<LabelPoint> {
    let grid = TileGrid::new(&base.spec, scene.rows(), scene.cols()).unwrap();
    common::random_labels(&scene.truth().unwrap(), grid.extent(), count, seed)
}

/// Mean cross-entropy of the full tiled forward pass at `labels`.
fn full_forward_loss(params: &ModelParams, scene: &Scene, labels: &[LabelPoint]) -> f64 {
    let pred = predict_scene(params, &scene.image).unwrap();
    labels
        .iter()
        .map(|l| -(pred.at(l.row, l.col)[l.class] as f64).ln())
        .sum::<f64>()
        / labels.len() as f64
}

fn methods() -> Vec<FineTuneConfig> {
    let mut out: Vec<FineTuneConfig> = [
        Method::LastK(1),
        Method::LastK(2),
        Method::LastK(3),
        Method::GroupParams,
    ]
    .into_iter()
    .map(FineTuneConfig::new)
    .collect();
    let mut ga = FineTuneConfig::new(Method::DropoutGa);
    ga.ga.generations = 6;
    ga.ga.population = 8;
    ga.ga.elite = 2;
    out.push(ga);
    out
}

#[test]
fn cached_losses_match_full_forward() {
    let base = common::base();
    let scene = small_target(300);
    let labels = labels_for(&scene, base, 120, 1);
    for cfg in methods() {
        let cache = build_feature_cache(base, &scene.image, &labels, cfg.cut(&base.spec).unwrap()).unwrap();
        let out = fine_tune(base, None, &cache, &labels, &cfg).unwrap();
        let before = full_forward_loss(base, &scene, &labels);
        let after = full_forward_loss(&out.params, &scene, &labels);
        assert!(
            (out.loss_before - before).abs() < 1e-5,
            "{}: {} vs {before}",
            cfg.method,
            out.loss_before
        );
        assert!(
            (out.loss_after - after).abs() < 1e-5,
            "{}: {} vs {after}",
            cfg.method,
            out.loss_after
        );
        assert!(out.loss_after <= out.loss_before);
    }
}

#[test]
fn only_declared_parameters_change_and_runs_repeat_exactly() {
    let base = common::base();
    let scene = small_target(301);
    let labels = labels_for(&scene, base, 80, 2);
    for cfg in methods() {
        let cache = build_feature_cache(base, &scene.image, &labels, cfg.cut(&base.spec).unwrap()).unwrap();
        let a = fine_tune(base, None, &cache, &labels, &cfg).unwrap();
        let b = fine_tune(base, None, &cache, &labels, &cfg).unwrap();
        assert_eq!(a.params, b.params, "{} not deterministic", cfg.method);
        let allowed = cfg.trainable(&base.spec).unwrap();
        for name in a.params.changed_params(base) {
            let is_mask = name.ends_with(".mask") && cfg.method == Method::DropoutGa;
            assert!(allowed.contains(&name) || is_mask, "{} changed {name}", cfg.method);
        }
        if cfg.method == Method::GroupParams {
            assert!(allowed.iter().all(|n| n.ends_with(".gamma") || n.ends_with(".beta")));
        }
    }
}

#[test]
fn unchanged_labels_cost_no_trunk_executions() {
    let base = common::base();
    let scene = small_target(302);
    let labels = labels_for(&scene, base, 60, 3);
    let cfg = FineTuneConfig::new(Method::LastK(2));
    let mut cache = build_feature_cache(base, &scene.image, &labels, cfg.cut(&base.spec).unwrap()).unwrap();
    let before = cache.trunk_executions();
    assert_eq!(cache.update(base, &scene.image, &labels).unwrap(), 0);
    fine_tune(base, None, &cache, &labels, &cfg).unwrap();
    fine_tune(base, None, &cache, &labels, &cfg).unwrap();
    assert_eq!(cache.trunk_executions(), before);
}

#[test]
fn ten_labels_in_new_tiles_cost_ten_executions() {
    let base = common::base();
    let scene = generate_scene(&SceneConfig::target(303)).unwrap();
    let truth = scene.truth().unwrap();
    let cfg = FineTuneConfig::new(Method::LastK(1));
    let mut cache = FeatureCache::new(base, cfg.cut(&base.spec).unwrap(), scene.rows(), scene.cols()).unwrap();
    let grid = *cache.grid();
    // 400 labels confined to the top four tile rows.
    let top = landtune::Extent::new(grid.offset, grid.offset, 4 * grid.output, grid.extent().cols);
    let first = common::random_labels(&truth, top, 400, 4);
    let executed = cache.update(base, &scene.image, &first).unwrap();
    assert_eq!(executed, cache.cached_tiles());
    let total = cache.trunk_executions();
    // One label in each of ten untouched tiles.
    let fresh: Vec<LabelPoint> = (0..10)
        .map(|i| {
            let (tr, tc) = (5 + i / 4, 2 * (i % 4));
            let (r, c) = (grid.offset + tr * grid.output + 3, grid.offset + tc * grid.output + 7);
            LabelPoint::new(r, c, truth.at(r, c) as usize)
        })
        .collect();
    let mut all = first.clone();
    all.extend(&fresh);
    assert_eq!(cache.update(base, &scene.image, &all).unwrap(), 10);
    assert_eq!(cache.trunk_executions(), total + 10);
}

#[test]
fn cache_prediction_equals_tiled_forward() {
    let base = common::base();
    let scene = small_target(304);
    for k in 1..=3 {
        let cfg = FineTuneConfig::new(Method::LastK(k));
        let mut cache = FeatureCache::new(base, cfg.cut(&base.spec).unwrap(), scene.rows(), scene.cols()).unwrap();
        assert!(cache.predict(base).is_err());
        cache.fill(base, &scene.image).unwrap();
        assert_eq!(cache.predict(base).unwrap(), predict_scene(base, &scene.image).unwrap());
    }
}

#[test]
fn stale_cache_is_rejected() {
    let base = common::base();
    let scene = small_target(305);
    let labels = labels_for(&scene, base, 20, 5);
    let cfg = FineTuneConfig::new(Method::LastK(1));
    let cache = build_feature_cache(base, &scene.image, &labels, cfg.cut(&base.spec).unwrap()).unwrap();
    let mut other = base.clone();
    other.tensors.get_mut("enc0.conv1.weight").unwrap().data_mut()[0] += 0.5;
    assert!(matches!(
        fine_tune(&other, None, &cache, &labels, &cfg),
        Err(Error::StaleCache { .. })
    ));
    // Tail-only changes keep the cache valid.
    let mut tuned = base.clone();
    tuned.tensors.get_mut("head.conv.bias").unwrap().data_mut()[0] += 0.5;
    assert!(cache.check(&tuned).is_ok());
}

#[test]
fn single_label_last_one_converges() {
    let base = common::base();
    let scene = small_target(306);
    let labels = labels_for(&scene, base, 1, 6);
    let cfg = FineTuneConfig {
        convergence: Some(Convergence::default()),
        ..FineTuneConfig::new(Method::LastK(1))
    };
    let out = finetune_last_k(base, &scene.image, &labels, 1, &cfg).unwrap();
    assert!(
        out.loss_after < 1e-3,
        "loss {} after {} epochs",
        out.loss_after,
        out.epochs_run
    );
    assert!(out.loss_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
}

#[test]
fn confident_correct_labels_barely_move_parameters() {
    let mut base = common::base().clone();
    // Push every pixel to near-one-hot class 1.
    base.tensors.get_mut("head.conv.bias").unwrap().data_mut()[1] += 80.0;
    let scene = small_target(307);
    let grid = TileGrid::new(&base.spec, scene.rows(), scene.cols()).unwrap();
    let labels: Vec<LabelPoint> = common::random_labels(&scene.truth().unwrap(), grid.extent(), 50, 7)
        .into_iter()
        .map(|l| LabelPoint::new(l.row, l.col, 1))
        .collect();
    let out = finetune_last_k(&base, &scene.image, &labels, 1, &FineTuneConfig::new(Method::LastK(1))).unwrap();
    let change: f64 = out.params.tensors["head.conv.weight"].sq_distance(&base.tensors["head.conv.weight"])
        + out.params.tensors["head.conv.bias"].sq_distance(&base.tensors["head.conv.bias"]);
    assert!(change.sqrt() < 1e-6, "change norm {}", change.sqrt());
    assert!(out.loss_after < 1e-6);
}

#[test]
fn zero_epochs_leave_group_params_untouched() {
    let base = common::base();
    let scene = small_target(308);
    let labels = labels_for(&scene, base, 30, 8);
    let cfg = FineTuneConfig {
        epochs: 0,
        ..FineTuneConfig::new(Method::GroupParams)
    };
    let out = finetune_group_params(base, &scene.image, &labels, &cfg).unwrap();
    assert_eq!(&out.params, base);
}

#[test]
fn ga_identity_and_configuration_errors() {
    let base = common::base();
    let scene = small_target(309);
    let labels = labels_for(&scene, base, 60, 9);
    let ga = GaConfig {
        generations: 5,
        population: 6,
        elite: 2,
        ..GaConfig::default()
    };
    let out = finetune_dropout_ga(base, &scene.image, &labels, &ga).unwrap();
    let info = out.ga.as_ref().unwrap();
    assert!((info.identity_loss - full_forward_loss(base, &scene, &labels)).abs() < 1e-5);
    assert!(info.best_loss <= info.identity_loss);
    assert_eq!(info.best_trace.len(), 5);
    assert!(info.best_trace.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(info.masks.len(), 5);

    let tiny = GaConfig {
        population: 1,
        ..GaConfig::default()
    };
    assert!(matches!(
        finetune_dropout_ga(base, &scene.image, &labels, &tiny),
        Err(Error::Config(_))
    ));
}

#[test]
fn bad_label_sets_are_errors() {
    let base = common::base();
    let scene = small_target(310);
    let cfg = FineTuneConfig::new(Method::LastK(2));
    assert!(matches!(
        finetune_last_k(base, &scene.image, &[], 2, &cfg),
        Err(Error::Empty(_))
    ));
    let outside = [LabelPoint::new(2, 2, 0)];
    assert!(matches!(
        finetune_last_k(base, &scene.image, &outside, 2, &cfg),
        Err(Error::Coordinate { .. })
    ));
    assert!(FineTuneConfig::new(Method::LastK(4)).validate(&base.spec).is_err());
    let negative = FineTuneConfig {
        learning_rate: Some(-1.0),
        ..cfg
    };
    assert!(negative.validate(&base.spec).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn loss_never_degrades_and_trunk_stays_frozen(seed in 0u64..1000, count in 1usize..60, k in 1usize..=3) {
        let base = ModelParams::init(&landtune::model::ModelSpec::desk(), seed).unwrap();
        let scene = small_target(seed);
        let labels = labels_for(&scene, &base, count, seed);
        let cfg = FineTuneConfig {
            epochs: 2,
            learning_rate: Some(0.05),
            seed,
            ..FineTuneConfig::new(Method::LastK(k))
        };
        let out = finetune_last_k(&base, &scene.image, &labels, k, &cfg).unwrap();
        prop_assert!(out.loss_after <= out.loss_before);
        let cut = cfg.cut(&base.spec).unwrap();
        prop_assert_eq!(out.params.trunk_fingerprint(cut), base.trunk_fingerprint(cut));
    }
}
