use landtune::model::{backprop, FeatureState, LayerKind, ModelParams, ModelSpec};
use landtune::nn::{conv2d_forward, group_norm_forward, pixel_softmax, Tensor, GROUP_NORM_EPS};
use landtune::LabelPoint;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], seed: u64, scale: f32) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
    let (ci, h, wd) = x.dims3().unwrap();
    let co = w.shape()[0];
    let mut out = Vec::new();
    for o in 0..co {
        for i in 0..h - 2 {
            for j in 0..wd - 2 {
                let mut s = b.data()[o] as f64;
                for c in 0..ci {
                    for di in 0..3 {
                        for dj in 0..3 {
                            s += w.data()[((o * ci + c) * 3 + di) * 3 + dj] as f64 * x.at3(c, i + di, j + dj) as f64;
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), scale in 0.1f32..200.0, n in 2usize..7) {
        let logits = random_tensor(&[n, 5, 7], seed, scale);
        let p = pixel_softmax(&logits).unwrap();
        prop_assert!(p.all_finite());
        for px in 0..35 {
            let s: f64 = (0..n).map(|k| p.data()[k * 35 + px] as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for k in 0..n {
                let v = p.data()[k * 35 + px];
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn conv_matches_loop_reference(seed in any::<u64>(), ci in 1usize..6, co in 1usize..6, h in 3usize..14, w in 3usize..14) {
        let x = random_tensor(&[ci, h, w], seed, 1.0);
        let k = random_tensor(&[co, ci, 3, 3], seed ^ 1, 1.0);
        let b = random_tensor(&[co], seed ^ 2, 1.0);
        let y = conv2d_forward(&x, &k, &b).unwrap();
        prop_assert_eq!(y.shape(), &[co, h - 2, w - 2][..]);
        for (a, r) in y.data().iter().zip(naive_conv(&x, &k, &b)) {
            prop_assert!((*a as f64 - r).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_is_linear_without_bias(seed in any::<u64>(), a in -3.0f32..3.0, c in -3.0f32..3.0) {
        let x = random_tensor(&[3, 9, 9], seed, 1.0);
        let y = random_tensor(&[3, 9, 9], seed ^ 7, 1.0);
        let k = random_tensor(&[4, 3, 3, 3], seed ^ 9, 1.0);
        let zero = Tensor::zeros(&[4]);
        let mix = Tensor::new(vec![3, 9, 9], x.data().iter().zip(y.data()).map(|(p, q)| a * p + c * q).collect()).unwrap();
        let lhs = conv2d_forward(&mix, &k, &zero).unwrap();
        let fx = conv2d_forward(&x, &k, &zero).unwrap();
        let fy = conv2d_forward(&y, &k, &zero).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(fx.data()).zip(fy.data()) {
            prop_assert!((l - (a * p + c * q)).abs() < 1e-4);
        }
    }

    #[test]
    fn group_norm_standardizes_groups(seed in any::<u64>(), groups in prop::sample::select(vec![1usize, 2, 4, 8]), scale in 0.5f32..50.0) {
        let c = 8;
        let x = random_tensor(&[c, 6, 6], seed, scale);
        let y = group_norm_forward(&x, &Tensor::full(&[c], 1.0), &Tensor::zeros(&[c]), groups, GROUP_NORM_EPS).unwrap();
        let per = c / groups * 36;
        for g in 0..groups {
            let vals: Vec<f64> = y.data()[g * per..(g + 1) * per].iter().map(|&v| v as f64).collect();
            let mean = vals.iter().sum::<f64>() / per as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            prop_assert!(mean.abs() <= 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }
}

#[test]
fn pointwise_tail_gradient_is_softmax_regression() {
    let spec = ModelSpec::desk();
    let params = ModelParams::init(&spec, 5).unwrap();
    let layers = spec.layers();
    let tail = &layers[spec.tail_start(1).unwrap()..];
    assert_eq!(tail[0].kind, LayerKind::Conv1x1);
    let c = tail[0].in_channels;
    let feat = random_tensor(&[c, 4, 4], 3, 1.0);
    let labels = vec![
        LabelPoint::new(0, 1, 2),
        LabelPoint::new(3, 3, 0),
        LabelPoint::new(2, 0, 3),
    ];
    let weight = 1.0 / labels.len() as f64;
    let all = |_: &str| true;
    let got = backprop(
        tail,
        &params.tensors,
        FeatureState::new(feat.clone()),
        &labels,
        weight,
        &all,
    )
    .unwrap();

    let w = &params.tensors["head.conv.weight"];
    let b = &params.tensors["head.conv.bias"];
    let n = spec.classes;
    let mut expect = vec![0f64; n * c];
    for l in &labels {
        let x: Vec<f64> = (0..c).map(|ch| feat.at3(ch, l.row, l.col) as f64).collect();
        let z: Vec<f64> = (0..n)
            .map(|k| b.data()[k] as f64 + (0..c).map(|ch| w.data()[k * c + ch] as f64 * x[ch]).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for k in 0..n {
            let d = e[k] / s - (k == l.class) as u8 as f64;
            for ch in 0..c {
                expect[k * c + ch] += weight * d * x[ch];
            }
        }
    }
    for (g, e) in got.grads["head.conv.weight"].data().iter().zip(&expect) {
        assert!((*g as f64 - e).abs() < 1e-5, "{g} vs {e}");
    }
}

#[test]
fn one_hot_correct_pixels_give_zero_gradient() {
    let spec = ModelSpec::desk();
    let mut params = ModelParams::init(&spec, 5).unwrap();
    let layers = spec.layers();
    let tail = &layers[spec.tail_start(1).unwrap()..];
    let c = tail[0].in_channels;
    let n = spec.classes;
    // Weights that put an overwhelming logit on class 1 everywhere.
    params
        .tensors
        .insert("head.conv.weight".into(), Tensor::zeros(&[n, c, 1, 1]));
    params.tensors.insert(
        "head.conv.bias".into(),
        Tensor::new(vec![n], vec![-200.0, 200.0, -200.0, -200.0]).unwrap(),
    );
    let feat = random_tensor(&[c, 3, 3], 8, 1.0);
    let labels = vec![LabelPoint::new(1, 1, 1), LabelPoint::new(0, 2, 1)];
    let all = |_: &str| true;
    let got = backprop(tail, &params.tensors, FeatureState::new(feat), &labels, 0.5, &all).unwrap();
    assert_eq!(got.loss_sum, 0.0);
    for g in got.grads.values() {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn unselected_parameters_get_no_gradient() {
    let spec = ModelSpec::desk();
    let params = ModelParams::init(&spec, 2).unwrap();
    let layers = spec.layers();
    let cut = spec.tail_start(2).unwrap();
    let state = params.state_at(&random_tensor(&[4, 64, 64], 1, 1.0), cut).unwrap();
    let only_gamma = |p: &str| p.ends_with(".gamma");
    let got = backprop(
        &layers[cut..],
        &params.tensors,
        state,
        &[LabelPoint::new(3, 4, 1)],
        1.0,
        &only_gamma,
    )
    .unwrap();
    let names: Vec<&String> = got.grads.keys().collect();
    assert_eq!(names, vec!["up0.norm.gamma"]);
}
