mod common;

use std::sync::Arc;
use std::time::Duration;

use landtune::eval::evaluate_points;
use landtune::finetune::Method;
use landtune::model::{argmax, predict_scene, Checkpoint};
use landtune::nn::Tensor;
use landtune::session::{Service, Session, SessionConfig};
use landtune::synth::{generate_scene, Scene, SceneConfig};
use landtune::{Error, LabelPoint};

fn scene(seed: u64) -> Scene {
    generate_scene(&SceneConfig {
        rows: 160,
        cols: 160,
        ..SceneConfig::target(seed)
    })
    .unwrap()
}

fn service(config: SessionConfig) -> Service {
    let s = Service::new(common::checkpoint(common::base()), config).unwrap();
    s.add_scene("a", scene(500)).unwrap();
    s.add_scene("b", scene(501)).unwrap();
    s
}

fn truth_labels(session: &Session, count: usize, seed: u64) -> Vec<LabelPoint> {
    let truth = session.scene().scene.truth().unwrap();
    common::random_labels(&truth, session.scene().grid.extent(), count, seed)
}

fn crop(image: &Tensor<f32>, r0: usize, c0: usize, h: usize, w: usize) -> Tensor<f32> {
    let (c, rows, cols) = image.dims3().unwrap();
    let mut data = Vec::new();
    for ch in 0..c {
        for i in 0..h {
            let s = (ch * rows + r0 + i) * cols + c0;
            data.extend_from_slice(&image.data()[s..s + w]);
        }
    }
    Tensor::new(vec![c, h, w], data).unwrap()
}

#[test]
fn sessions_start_at_the_baseline_and_are_isolated() {
    let svc = service(SessionConfig::default());
    let s1 = svc.create_session("a", None).unwrap();
    let s2 = svc.create_session("a", Some(Method::GroupParams)).unwrap();
    assert_ne!(s1.id(), s2.id());
    assert_eq!(s1.method(), Method::LastK(1));
    assert_eq!(s2.manifest().get("session.method"), Some("group-params"));

    let m = s1.metrics();
    assert_eq!(m.history.len(), 1);
    let baseline = predict_scene(common::base(), &s1.scene().scene.image).unwrap();
    let expected = evaluate_points(&baseline, &s1.scene().eval_points).unwrap();
    assert_eq!(m.history[0].report.as_ref(), Some(&expected));

    s1.submit_labels(&truth_labels(&s1, 30, 1)).unwrap();
    s1.retrain().unwrap();
    assert_eq!(s2.labels().len(), 0);
    assert_eq!(s2.snapshot().checksum, common::base().checksum());
    assert_ne!(s1.snapshot().checksum, s2.snapshot().checksum);
}

#[test]
fn predict_patch_is_a_forward_pass_on_the_crop() {
    let svc = service(SessionConfig::default());
    let s = svc.create_session("b", None).unwrap();
    let p = s.predict_patch(5, 150, Some(100)).unwrap();
    assert_eq!((p.input.row0, p.input.col0), (0, 60));
    let input = crop(
        &s.scene().scene.image,
        p.input.row0,
        p.input.col0,
        p.input.rows,
        p.input.cols,
    );
    let out = common::base().forward(&input).unwrap();
    let (n, oh, ow) = out.probs.dims3().unwrap();
    assert_eq!((p.extent.rows, p.extent.cols), (oh, ow));
    for i in 0..oh * ow {
        let v: Vec<f32> = (0..n).map(|k| out.probs.data()[k * oh * ow + i]).collect();
        assert_eq!(p.classes[i] as usize, argmax(&v));
        assert_eq!(p.confidence[i], v[argmax(&v)]);
    }
    assert_eq!(s.predict_patch(5, 150, Some(100)).unwrap(), p);
    assert!(matches!(s.predict_patch(5, 150, Some(4096)), Err(Error::Config(_))));
    assert!(matches!(s.predict_patch(160, 0, None), Err(Error::Coordinate { .. })));
}

#[test]
fn label_submission_rules() {
    let svc = service(SessionConfig::default());
    let s = svc.create_session("a", None).unwrap();
    assert_eq!(s.submit_labels(&[]).unwrap().accepted, 0);
    let ext = s.scene().grid.extent();
    let (r, c) = (ext.row0 + 3, ext.col0 + 4);
    s.submit_labels(&[LabelPoint::new(r, c, 0)]).unwrap();
    let out = s.submit_labels(&[LabelPoint::new(r, c, 2)]).unwrap();
    assert_eq!(out.updated, 1);
    assert_eq!(s.labels(), vec![LabelPoint::new(r, c, 2)]);

    assert!(matches!(
        s.submit_labels(&[LabelPoint::new(r, c + 1, 9)]),
        Err(Error::Palette(_))
    ));
    assert!(matches!(
        s.submit_labels(&[LabelPoint::new(r, c + 1, 1), LabelPoint::new(0, 0, 1)]),
        Err(Error::Coordinate { .. })
    ));
    assert_eq!(s.labels().len(), 1, "rejected batches store nothing");

    s.submit_labels(&truth_labels(&s, 50, 2)).unwrap();
    let m = s.metrics();
    assert!((m.label_distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(m.label_count, s.labels().len());
}

#[test]
fn retraining_improves_and_is_reproducible() {
    let svc = service(SessionConfig::default());
    let s = svc.create_session("a", None).unwrap();
    assert!(matches!(s.retrain(), Err(Error::Precondition(_))));
    s.submit_labels(&truth_labels(&s, 200, 3)).unwrap();
    let first = s.retrain().unwrap();
    let p1 = s.snapshot().params.clone();
    let second = s.retrain().unwrap();
    assert_eq!(s.snapshot().params, p1);
    assert_eq!(first.checksum, second.checksum);

    let baseline = s.metrics().history[0].report.clone().unwrap();
    let tuned = first.report.clone().unwrap();
    assert!(
        tuned.accuracy > baseline.accuracy + 0.05,
        "{} vs {}",
        tuned.accuracy,
        baseline.accuracy
    );

    let offline = evaluate_points(
        &predict_scene(&p1, &s.scene().scene.image).unwrap(),
        &s.scene().eval_points,
    )
    .unwrap();
    assert_eq!(offline.with_label_distribution(&s.labels()), tuned);
    assert!((tuned.label_distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let h = s.metrics().history;
    assert_eq!(h.len(), 3);
    assert!(h.windows(2).all(|w| w[0].timestamp_ms <= w[1].timestamp_ms));
    assert_eq!(h.iter().map(|e| e.retrain_index).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn concurrent_retrain_is_refused() {
    let svc = service(SessionConfig {
        retrain_delay: Some(Duration::from_millis(600)),
        ..SessionConfig::default()
    });
    let s = svc.create_session("a", None).unwrap();
    s.submit_labels(&truth_labels(&s, 20, 4)).unwrap();
    let bg = Arc::clone(&s);
    let handle = std::thread::spawn(move || bg.retrain());
    std::thread::sleep(Duration::from_millis(200));
    assert!(matches!(s.retrain(), Err(Error::Busy(_))));
    handle.join().unwrap().unwrap();
    assert_eq!(s.snapshot().retrain_index, 1);
}

#[test]
fn added_classes_change_nothing_until_labeled() {
    let svc = service(SessionConfig::default());
    let s = svc.create_session("b", None).unwrap();
    let before = s.predict_patch(80, 80, None).unwrap();
    let idx = s.add_class("wetlands", [0, 200, 200]).unwrap();
    assert_eq!(idx, 4);
    let after = s.predict_patch(80, 80, None).unwrap();
    assert_eq!(before.classes, after.classes);
    assert!(matches!(s.add_class("water", [1, 2, 3]), Err(Error::Palette(_))));
    s.submit_labels(&[LabelPoint::new(50, 50, idx)]).unwrap();

    let ck = Checkpoint::from_bytes(&s.export_checkpoint()).unwrap();
    assert_eq!(ck.palette.len(), 5);
    assert_eq!(ck.params.spec.classes, 5);
    assert_eq!(s.metrics().label_distribution.len(), 5);
}

#[test]
fn reset_matches_a_fresh_session() {
    let svc = service(SessionConfig::default());
    let s = svc.create_session("a", None).unwrap();
    let fresh = svc.create_session("a", None).unwrap();
    s.add_class("wetlands", [0, 200, 200]).unwrap();
    s.submit_labels(&truth_labels(&s, 40, 5)).unwrap();
    s.retrain().unwrap();
    s.reset().unwrap();
    s.reset().unwrap();
    let (m, f) = (s.metrics(), fresh.metrics());
    assert_eq!(m.history.len(), 1);
    assert_eq!(m.history[0].report, f.history[0].report);
    assert_eq!(m.label_count, 0);
    assert_eq!(s.palette(), fresh.palette());
    assert_eq!(s.snapshot().checksum, fresh.snapshot().checksum);
    assert_eq!(s.export_checkpoint(), fresh.export_checkpoint());
}

#[test]
fn unknown_ids_are_not_found() {
    let svc = service(SessionConfig::default());
    assert!(matches!(
        svc.create_session("nope", None),
        Err(Error::NotFound { kind: "scene", .. })
    ));
    assert!(matches!(
        svc.session("nope"),
        Err(Error::NotFound { kind: "session", .. })
    ));
    let ids: Vec<String> = svc.scenes().into_iter().map(|s| s.id).collect();
    assert_eq!(ids, vec!["a", "b"]);
    let bad = common::checkpoint(&common::base().add_class().unwrap());
    assert!(matches!(
        Service::new(bad, SessionConfig::default()),
        Err(Error::Palette(_))
    ));
}
