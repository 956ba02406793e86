use landtune::eval::{evaluate_rasters, ClassRaster};
use landtune::model::{
    dataset_loss, prepare_dataset, run_layers, train_base, Checkpoint, FeatureState, ModelParams, ModelSpec,
    Provenance, TrainConfig,
};
use landtune::nn::Tensor;
use landtune::palette::Palette;
use landtune::synth::{generate_scene, sample_patches, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[4, h, w], |_| rng.random_range(0.0..1.0))
}

#[test]
fn forward_is_deterministic_and_on_the_simplex() {
    let params = ModelParams::init(&ModelSpec::desk(), 1).unwrap();
    let x = image(2, 64, 64);
    let a = params.forward(&x).unwrap();
    let b = params.forward(&x).unwrap();
    assert_eq!(a, b);
    let (n, h, w) = a.probs.dims3().unwrap();
    assert_eq!((h, w), (a.geometry.rows.output, a.geometry.cols.output));
    for px in 0..h * w {
        let s: f64 = (0..n).map(|k| a.probs.data()[k * h * w + px] as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn output_extent_shrinks_and_offset_centers_it() {
    for spec in [ModelSpec::desk(), ModelSpec::paper()] {
        for n in [spec.min_input(), spec.tile_input(), spec.tile_input() + 37] {
            let g = spec.geometry(n, n).unwrap();
            assert!(g.rows.output > 0 && g.rows.output < g.rows.input);
            assert_eq!(g.rows.input - g.rows.output, 2 * g.rows.offset);
        }
    }
}

#[test]
fn trunk_plus_tail_equals_monolithic_forward() {
    let spec = ModelSpec::desk();
    let params = ModelParams::init(&spec, 3).unwrap();
    let x = image(4, 64, 64);
    let full = params.forward(&x).unwrap().probs;
    for k in 1..=spec.max_tail_k() {
        let feats = params.extract_features(&x, k).unwrap();
        assert_eq!(feats, params.extract_features(&x, k).unwrap());
        let out = params.tail_forward(k, &feats).unwrap();
        for (a, b) in out.data().iter().zip(full.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    assert!(params.extract_features(&x, 0).is_err());
    assert!(params.extract_features(&x, spec.max_tail_k() + 1).is_err());
}

#[test]
fn empty_trunk_state_is_the_raw_image() {
    let spec = ModelSpec::desk();
    let params = ModelParams::init(&spec, 3).unwrap();
    let x = image(5, 64, 64);
    let state = params.state_at(&x, 0).unwrap();
    assert_eq!(state.current, x);
    let out = run_layers(&spec.layers(), &params.tensors, FeatureState::new(x.clone())).unwrap();
    assert_eq!(out.current, params.forward(&x).unwrap().probs);
}

#[test]
fn too_small_input_reports_minimum() {
    let spec = ModelSpec::desk();
    let params = ModelParams::init(&spec, 3).unwrap();
    let err = params.forward(&image(1, 20, 20)).unwrap_err();
    assert!(err.to_string().contains(&spec.min_input().to_string()), "{err}");
}

fn small_dataset(count: usize, seed: u64) -> Vec<landtune::model::TrainingPatch> {
    let scene = generate_scene(&SceneConfig::source(seed)).unwrap();
    sample_patches(&scene, ModelSpec::desk().tile_input(), count, seed).unwrap()
}

#[test]
fn zero_epochs_returns_initialization() {
    let spec = ModelSpec::desk();
    let cfg = TrainConfig {
        epochs: 0,
        seed: 9,
        ..TrainConfig::default()
    };
    let out = train_base(&spec, &small_dataset(4, 1), &cfg).unwrap();
    assert_eq!(out.params, ModelParams::init(&spec, 9).unwrap());
    assert!(out.history.is_empty());
}

#[test]
fn training_is_deterministic_and_rejects_empty_data() {
    let spec = ModelSpec::desk();
    let cfg = TrainConfig {
        epochs: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let data = small_dataset(12, 2);
    let a = train_base(&spec, &data, &cfg).unwrap();
    let b = train_base(&spec, &data, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(
        Checkpoint {
            params: a.params.clone(),
            palette: Palette::land_cover(),
            provenance: Provenance { seed: 4, epochs: 2 },
        }
        .to_bytes(),
        Checkpoint {
            params: b.params,
            palette: Palette::land_cover(),
            provenance: Provenance { seed: 4, epochs: 2 },
        }
        .to_bytes()
    );
    assert!(train_base(&spec, &[], &cfg).is_err());
}

#[test]
fn base_training_reaches_held_out_accuracy() {
    let spec = ModelSpec::desk();
    let mut data = Vec::new();
    for seed in [100, 101] {
        data.extend(small_dataset(100, seed));
    }
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let out = train_base(&spec, &data, &cfg).unwrap();
    let first = out.history.first().unwrap().monitor_loss;
    let last = out.history.last().unwrap().monitor_loss;
    assert!(last < first && first < out.initial_monitor_loss + 1.0);

    let held_out = small_dataset(40, 150);
    let mut correct = 0usize;
    let mut total = 0usize;
    for p in &held_out {
        let out = out.params.forward(&p.image).unwrap();
        let g = out.geometry;
        let (n, h, w) = out.probs.dims3().unwrap();
        let pred: Vec<u8> = (0..h * w)
            .map(|px| {
                landtune::model::argmax(&(0..n).map(|k| out.probs.data()[k * h * w + px]).collect::<Vec<_>>()) as u8
            })
            .collect();
        let cols = p.image.shape()[2];
        let truth: Vec<u8> = (0..h * w)
            .map(|px| p.labels[(px / w + g.rows.offset) * cols + px % w + g.cols.offset])
            .collect();
        let r = evaluate_rasters(
            &ClassRaster::new(h, w, pred).unwrap(),
            &ClassRaster::new(h, w, truth).unwrap(),
            n,
        )
        .unwrap();
        correct += (r.accuracy * (h * w) as f64).round() as usize;
        total += h * w;
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.85, "held-out accuracy {acc}");
    let monitor = prepare_dataset(&spec, &held_out[..4]).unwrap();
    assert!(dataset_loss(&out.params, &monitor).unwrap().is_finite());
}

#[test]
fn checkpoint_file_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint {
        params: ModelParams::init(&ModelSpec::desk(), 6).unwrap(),
        palette: Palette::land_cover(),
        provenance: Provenance { seed: 6, epochs: 0 },
    };
    let a = dir.path().join("a.glck");
    let b = dir.path().join("b.glck");
    ck.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.params, ck.params);

    let bytes = std::fs::read(&a).unwrap();
    std::fs::write(&b, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::load(&b), Err(landtune::Error::Checksum { .. })));
}

#[test]
fn grown_model_checkpoint_keeps_five_classes() {
    let params = ModelParams::init(&ModelSpec::desk(), 6).unwrap().add_class().unwrap();
    let mut palette = Palette::land_cover();
    palette.push("wetlands", [0, 200, 200]).unwrap();
    let ck = Checkpoint {
        params,
        palette,
        provenance: Provenance { seed: 6, epochs: 0 },
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back.palette.len(), 5);
    assert_eq!(back.params.spec.classes, 5);
    assert_eq!(back.params, ck.params);
}
