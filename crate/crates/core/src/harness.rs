//! Offline experiment grid, random-labeler simulation and their CSV output.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{evaluate_prediction, ClassRaster, EvalReport};
use crate::finetune::{fine_tune, FeatureCache, FineTuneConfig, Method};
use crate::kv::KvDoc;
use crate::label::LabelPoint;
use crate::model::{train_base, ModelParams, ModelSpec, TrainConfig, TrainOutcome};
use crate::query::{run_schedule, Area, QueryKind, QueryMethod, QuerySchedule};
use crate::synth::{generate_scene, sample_patches, Scene, SceneConfig};

pub const CSV_HEADER: [&str; 7] = ["area", "method", "query", "seed", "label_count", "accuracy", "mean_iou"];

/// How the source-domain base model is produced.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseRecipe {
    pub spec: ModelSpec,
    /// Seeds of the unshifted training scenes.
    pub scene_seeds: Vec<u64>,
    pub patches: usize,
    pub train: TrainConfig,
}

impl Default for BaseRecipe {
    fn default() -> Self {
        BaseRecipe {
            spec: ModelSpec::desk(),
            scene_seeds: vec![100, 101, 102, 103],
            patches: 400,
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
        }
    }
}

/// Train a base model on patches cut from unshifted synthetic scenes.
pub fn train_source_model(recipe: &BaseRecipe) -> Result<TrainOutcome> {
    if recipe.scene_seeds.is_empty() {
        return Err(Error::Empty("training scene seeds"));
    }
    let per_scene = recipe.patches.div_ceil(recipe.scene_seeds.len());
    let mut patches = Vec::with_capacity(per_scene * recipe.scene_seeds.len());
    for (i, &seed) in recipe.scene_seeds.iter().enumerate() {
        let scene = generate_scene(&SceneConfig::source(seed))?;
        patches.extend(sample_patches(
            &scene,
            recipe.spec.tile_input(),
            per_scene,
            recipe.train.seed ^ i as u64,
        )?);
    }
    patches.truncate(recipe.patches);
    train_base(&recipe.spec, &patches, &recipe.train)
}

/// A scene with ground truth under a stable name.
#[derive(Debug, Clone)]
pub struct NamedArea {
    pub name: String,
    pub image: crate::nn::Tensor<f32>,
    pub truth: ClassRaster,
}

impl NamedArea {
    /// Offline experiments need ground truth; image-only scenes are rejected.
    pub fn from_scene(name: impl Into<String>, scene: &Scene) -> Result<Self> {
        Ok(NamedArea {
            name: name.into(),
            image: scene.image.clone(),
            truth: scene.truth()?,
        })
    }

    fn area(&self) -> Area<'_> {
        Area {
            image: &self.image,
            truth: &self.truth,
        }
    }
}

/// The calibrated target-domain areas `area0..areaN`.
pub fn target_areas(count: usize, first_seed: u64) -> Result<Vec<NamedArea>> {
    (0..count)
        .map(|i| {
            NamedArea::from_scene(
                format!("area{i}"),
                &generate_scene(&SceneConfig::target(first_seed + i as u64))?,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub area: String,
    pub method: String,
    pub query: String,
    pub seed: u64,
    pub label_count: usize,
    pub accuracy: f64,
    pub mean_iou: f64,
}

impl ResultRow {
    fn key(&self) -> (&str, &str, &str, u64, usize) {
        (&self.area, &self.method, &self.query, self.seed, self.label_count)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub methods: Vec<Method>,
    pub queries: Vec<QueryKind>,
    pub schedule: QuerySchedule,
    pub seeds: Vec<u64>,
    /// Template for every cell; method and seed are overridden.
    pub finetune: FineTuneConfig,
    pub pool_size: usize,
}

impl GridSpec {
    pub fn new(methods: Vec<Method>, queries: Vec<QueryKind>, schedule: QuerySchedule, seeds: Vec<u64>) -> Self {
        GridSpec {
            methods,
            queries,
            schedule,
            seeds,
            finetune: FineTuneConfig::new(Method::LastK(1)),
            pool_size: 10_000,
        }
    }

    fn cell_config(&self, method: Method, seed: u64) -> FineTuneConfig {
        let mut cfg = self.finetune.clone();
        cfg.method = method;
        cfg.seed = seed;
        cfg.ga.seed = seed;
        cfg
    }
}

/// Every (area, method, query, seed) combination over the schedule; one row
/// per checkpoint, sorted so the output does not depend on scheduling.
pub fn run_offline_grid(base: &ModelParams, areas: &[NamedArea], grid: &GridSpec) -> Result<Vec<ResultRow>> {
    let mut cells = Vec::new();
    for (a, _) in areas.iter().enumerate() {
        for &m in &grid.methods {
            for &q in &grid.queries {
                for &s in &grid.seeds {
                    cells.push((a, m, q, s));
                }
            }
        }
    }
    let parts = cells
        .par_iter()
        .map(|&(a, method, query, seed)| {
            let area = &areas[a];
            let qm = QueryMethod {
                kind: query,
                pool_size: grid.pool_size,
                seed,
            };
            let steps = run_schedule(area.area(), base, &qm, &grid.cell_config(method, seed), &grid.schedule)?;
            Ok(steps
                .into_iter()
                .map(|s| ResultRow {
                    area: area.name.clone(),
                    method: method.as_str(),
                    query: query.as_str().to_string(),
                    seed,
                    label_count: s.label_count,
                    accuracy: s.report.accuracy,
                    mean_iou: s.report.mean_iou,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<ResultRow> = parts.into_iter().flatten().collect();
    rows.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.area.clone(),
            r.method.clone(),
            r.query.clone(),
            r.seed.to_string(),
            r.label_count.to_string(),
            r.accuracy.to_string(),
            r.mean_iou.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, got {}", CSV_HEADER.len(), rec.len()),
            });
        }
        let num = |j: usize| -> Result<f64> {
            rec[j].parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad number `{}` in column {}", &rec[j], CSV_HEADER[j]),
            })
        };
        rows.push(ResultRow {
            area: rec[0].to_string(),
            method: rec[1].to_string(),
            query: rec[2].to_string(),
            seed: num(3)? as u64,
            label_count: num(4)? as usize,
            accuracy: num(5)?,
            mean_iou: num(6)?,
        });
    }
    Ok(rows)
}

/// Mean and sample standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Seed-aggregated curve point for one (area, method, query, checkpoint).
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub area: String,
    pub method: String,
    pub query: String,
    pub label_count: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub seeds: usize,
}

pub fn curve_summary(rows: &[ResultRow]) -> Vec<CurvePoint> {
    let mut groups: std::collections::BTreeMap<(String, String, String, usize), Vec<&ResultRow>> = Default::default();
    for r in rows {
        groups
            .entry((r.area.clone(), r.method.clone(), r.query.clone(), r.label_count))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((area, method, query, label_count), rs)| {
            let (am, asd) = mean_std(&rs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
            let (im, isd) = mean_std(&rs.iter().map(|r| r.mean_iou).collect::<Vec<_>>());
            CurvePoint {
                area,
                method,
                query,
                label_count,
                accuracy_mean: am,
                accuracy_std: asd,
                iou_mean: im,
                iou_std: isd,
                seeds: rs.len(),
            }
        })
        .collect()
}

/// One cell of the method × query table at a fixed label count.
#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub method: String,
    pub query: String,
    pub accuracy: f64,
    pub mean_iou: f64,
    pub runs: usize,
}

/// Mean over areas and seeds at `label_count`.
pub fn table_at(rows: &[ResultRow], label_count: usize) -> Vec<TableCell> {
    let mut groups: std::collections::BTreeMap<(String, String), Vec<&ResultRow>> = Default::default();
    for r in rows.iter().filter(|r| r.label_count == label_count) {
        groups.entry((r.method.clone(), r.query.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, query), rs)| TableCell {
            method,
            query,
            accuracy: rs.iter().map(|r| r.accuracy).sum::<f64>() / rs.len() as f64,
            mean_iou: rs.iter().map(|r| r.mean_iou).sum::<f64>() / rs.len() as f64,
            runs: rs.len(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub session_seconds: u64,
    pub seconds_per_label: u64,
    pub retrain_interval: u64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            session_seconds: 900,
            seconds_per_label: 3,
            retrain_interval: 45,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub elapsed: u64,
    pub label_count: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    /// Baseline at `elapsed = 0`, then one entry per retrain.
    pub events: Vec<SimEvent>,
    pub retrains: usize,
}

impl SimTrace {
    pub fn final_report(&self) -> &EvalReport {
        &self.events.last().expect("trace starts with a baseline").report
    }
}

/// A labeler clicking uniformly random pixels at a fixed rate, with the
/// model retrained on everything so far at a fixed interval.
pub fn simulate_random_labeler(
    area: &NamedArea,
    base: &ModelParams,
    config: &FineTuneConfig,
    sim: &SimConfig,
) -> Result<SimTrace> {
    if sim.seconds_per_label == 0 || sim.retrain_interval == 0 {
        return Err(Error::config("label and retrain intervals must be positive"));
    }
    config.validate(&base.spec)?;
    let (_, h, w) = area.image.dims3()?;
    let mut cache = FeatureCache::new(base, config.cut(&base.spec)?, h, w)?;
    cache.fill(base, &area.image)?;
    let extent = cache.grid().extent();
    let total = (sim.session_seconds / sim.seconds_per_label) as usize;
    if total > extent.area() {
        return Err(Error::config(format!(
            "{total} labels exceed the {} labelable pixels",
            extent.area()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let positions: Vec<(usize, usize)> = sample(&mut rng, extent.area(), total)
        .into_iter()
        .map(|i| (extent.row0 + i / extent.cols, extent.col0 + i % extent.cols))
        .collect();
    let labels: Vec<LabelPoint> = positions
        .iter()
        .map(|&(r, c)| LabelPoint::new(r, c, area.truth.at(r, c) as usize))
        .collect();

    let baseline = evaluate_prediction(&cache.predict(base)?, &area.truth)?;
    let mut events = vec![SimEvent {
        elapsed: 0,
        label_count: 0,
        report: baseline,
    }];
    let mut current = base.clone();
    let mut t = sim.retrain_interval;
    while t <= sim.session_seconds {
        let n = (t / sim.seconds_per_label) as usize;
        if n > 0 {
            let seen = &labels[..n];
            current = fine_tune(base, Some(&current), &cache, seen, config)?.params;
            let report = evaluate_prediction(&cache.predict(&current)?, &area.truth)?.with_label_distribution(seen);
            events.push(SimEvent {
                elapsed: t,
                label_count: n,
                report,
            });
        }
        t += sim.retrain_interval;
    }
    let retrains = events.len() - 1;
    Ok(SimTrace { events, retrains })
}

/// Manifest written next to every harness output.
pub fn manifest(verb: &str, settings: &[(&str, String)]) -> KvDoc {
    let mut doc = KvDoc::new();
    doc.push("run.verb", verb)
        .push("run.version", env!("CARGO_PKG_VERSION"));
    for (k, v) in settings {
        doc.push(format!("run.{k}"), v.replace('\n', " "));
    }
    doc
}
