use landtune::eval::{evaluate_points, evaluate_rasters, label_density_surface, ClassRaster};
use landtune::model::ScenePrediction;
use landtune::nn::{pixel_softmax, Tensor};
use landtune::{Error, Extent, LabelPoint};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn raster(rows: usize, cols: usize, classes: u8, rng: &mut ChaCha8Rng) -> ClassRaster {
    ClassRaster::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(0..classes)).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_follow_class_relabeling(seed in any::<u64>(), perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = raster(16, 16, 4, &mut rng);
        let truth = raster(16, 16, 4, &mut rng);
        let relabel = |r: &ClassRaster| ClassRaster::new(r.rows, r.cols, r.data.iter().map(|&c| perm[c as usize]).collect()).unwrap();
        let a = evaluate_rasters(&pred, &truth, 4).unwrap();
        let b = evaluate_rasters(&relabel(&pred), &relabel(&truth), 4).unwrap();
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert_eq!(a.mean_iou, b.mean_iou);
        for (c, &pc) in perm.iter().enumerate() {
            prop_assert_eq!(a.per_class_iou[c], b.per_class_iou[pc as usize]);
        }
    }

    #[test]
    fn sparse_points_equal_masked_rasters(seed in any::<u64>(), n in 1usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[4, 12, 14], |_| rng.random_range(-2.0f32..2.0));
        let pred = ScenePrediction { probs: pixel_softmax(&logits).unwrap(), extent: Extent::new(5, 7, 12, 14) };
        let points: Vec<LabelPoint> = (0..n)
            .map(|_| LabelPoint::new(rng.random_range(5..17), rng.random_range(7..21), rng.random_range(0..4)))
            .collect();
        let sparse = evaluate_points(&pred, &points).unwrap();
        let p: Vec<u8> = points.iter().map(|l| pred.argmax_at(l.row, l.col) as u8).collect();
        let t: Vec<u8> = points.iter().map(|l| l.class as u8).collect();
        let masked = evaluate_rasters(&ClassRaster::new(1, n, p).unwrap(), &ClassRaster::new(1, n, t).unwrap(), 4).unwrap();
        prop_assert_eq!(sparse, masked);
    }

    #[test]
    fn report_is_consistent_with_its_confusion(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = raster(9, 11, 5, &mut rng);
        let truth = raster(9, 11, 5, &mut rng);
        let r = evaluate_rasters(&pred, &truth, 5).unwrap();
        let trace: u64 = (0..5).map(|c| r.confusion.counts[c][c]).sum();
        prop_assert_eq!(r.accuracy, trace as f64 / 99.0);
        prop_assert_eq!(r.pixels, 99);
    }
}

#[test]
fn perfect_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = raster(8, 8, 4, &mut rng);
    let r = evaluate_rasters(&t, &t, 4).unwrap();
    assert_eq!((r.accuracy, r.mean_iou), (1.0, 1.0));
}

#[test]
fn mismatched_or_empty_truth_is_an_error() {
    let a = ClassRaster::new(2, 3, vec![0; 6]).unwrap();
    let b = ClassRaster::new(3, 2, vec![0; 6]).unwrap();
    assert!(matches!(evaluate_rasters(&a, &b, 2), Err(Error::Coordinate { .. })));
    let pred = ScenePrediction {
        probs: Tensor::full(&[2, 2, 2], 0.5),
        extent: Extent::new(0, 0, 2, 2),
    };
    assert!(matches!(evaluate_points(&pred, &[]), Err(Error::Empty(_))));
    assert!(matches!(
        evaluate_points(&pred, &[LabelPoint::new(4, 0, 0)]),
        Err(Error::Coordinate { .. })
    ));
}

#[test]
fn points_of_unknown_classes_count_as_errors() {
    let pred = ScenePrediction {
        probs: Tensor::new(vec![2, 1, 2], vec![0.9, 0.9, 0.1, 0.1]).unwrap(),
        extent: Extent::new(0, 0, 1, 2),
    };
    let r = evaluate_points(&pred, &[LabelPoint::new(0, 0, 0), LabelPoint::new(0, 1, 4)]).unwrap();
    assert_eq!(r.accuracy, 0.5);
}

fn kde_oracle(points: &[LabelPoint], extent: Extent, h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(extent.area());
    for r in extent.row0..extent.row0 + extent.rows {
        for c in extent.col0..extent.col0 + extent.cols {
            let mut s = 0.0;
            for p in points {
                let d2 = (r as f64 - p.row as f64).powi(2) + (c as f64 - p.col as f64).powi(2);
                s += (-d2 / (2.0 * h * h)).exp() / (2.0 * std::f64::consts::PI * h * h);
            }
            out.push(s / points.len() as f64);
        }
    }
    out
}

#[test]
fn density_matches_double_loop_and_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let extent = Extent::new(10, 20, 90, 110);
    let points: Vec<LabelPoint> = (0..50)
        .map(|_| LabelPoint::new(rng.random_range(30..80), rng.random_range(45..105), 0))
        .collect();
    let surface = label_density_surface(&points, extent, 4.0).unwrap();
    for (a, b) in surface.data().iter().zip(kde_oracle(&points, extent, 4.0)) {
        assert!((a - b).abs() < 1e-6);
    }
    let mass: f64 = surface.data().iter().sum();
    assert!((mass - 1.0).abs() < 0.05, "mass {mass}");
}

#[test]
fn density_peaks_at_a_single_point_and_ignores_duplicates() {
    let extent = Extent::new(0, 0, 40, 40);
    let one = label_density_surface(&[LabelPoint::new(12, 27, 1)], extent, 3.0).unwrap();
    let two = label_density_surface(&[LabelPoint::new(12, 27, 1), LabelPoint::new(12, 27, 2)], extent, 3.0).unwrap();
    let peak = one
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| (i / 40, i % 40))
        .unwrap();
    assert_eq!(peak, (12, 27));
    for (a, b) in one.data().iter().zip(two.data()) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(label_density_surface(&[], extent, 3.0).is_err());
    assert!(label_density_surface(&[LabelPoint::new(1, 1, 0)], extent, 0.0).is_err());
}
