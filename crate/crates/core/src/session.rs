//! Interactive sessions: a scene, a growing label set and an atomically
//! replaceable model snapshot, plus the registry that owns them.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use arc_swap::ArcSwap;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{evaluate_points, label_distribution, EvalReport};
use crate::finetune::{fine_tune, Convergence, FeatureCache, FineTuneConfig, Method};
use crate::kv::KvDoc;
use crate::label::{Extent, LabelPoint};
use crate::model::{argmax, Checkpoint, ModelParams, Provenance, TileGrid};
use crate::palette::Palette;
use crate::synth::Scene;

pub const DEFAULT_PATCH: usize = 200;
pub const MAX_PATCH: usize = 512;
pub const EVAL_POINTS: usize = 1000;

/// A registered scene and its fixed held-out evaluation points.
#[derive(Debug)]
pub struct SceneEntry {
    pub id: String,
    pub scene: Scene,
    /// Ground-truth points never shown to the labeler; empty for image-only
    /// scenes.
    pub eval_points: Vec<LabelPoint>,
    pub grid: TileGrid,
}

impl SceneEntry {
    pub fn new(id: impl Into<String>, scene: Scene, base: &ModelParams) -> Result<Self> {
        let id = id.into();
        let grid = TileGrid::new(&base.spec, scene.rows(), scene.cols())?;
        let ext = grid.extent();
        let eval_points = match &scene.labels {
            None => Vec::new(),
            Some(labels) => {
                let mut rng = ChaCha8Rng::seed_from_u64(scene.fingerprint ^ 0xe7a1);
                let n = EVAL_POINTS.min(ext.area());
                let mut picked: Vec<usize> = sample(&mut rng, ext.area(), n).into_vec();
                picked.sort_unstable();
                picked
                    .into_iter()
                    .map(|i| {
                        let (r, c) = (ext.row0 + i / ext.cols, ext.col0 + i % ext.cols);
                        LabelPoint::new(r, c, labels[r * scene.cols() + c] as usize)
                    })
                    .collect()
            }
        };
        Ok(SceneEntry {
            id,
            scene,
            eval_points,
            grid,
        })
    }
}

/// Settings shared by every session of a service.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub default_method: Method,
    pub default_patch: usize,
    pub max_patch: usize,
    /// Extra wall-clock time spent in every retrain before publishing.
    pub retrain_delay: Option<Duration>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            default_method: Method::LastK(1),
            default_patch: DEFAULT_PATCH,
            max_patch: MAX_PATCH,
            retrain_delay: None,
        }
    }
}

/// Fine-tuning used by interactive retrains: last-1 runs to convergence,
/// everything else uses the fixed epoch count.
pub fn online_config(method: Method) -> FineTuneConfig {
    let mut cfg = FineTuneConfig::new(method);
    if method == Method::LastK(1) {
        cfg.convergence = Some(Convergence::default());
    }
    cfg
}

/// Immutable published model state.
#[derive(Debug)]
pub struct Snapshot {
    pub params: ModelParams,
    pub palette: Palette,
    /// CRC32 of `params` taken when the snapshot was built.
    pub checksum: u32,
    pub retrain_index: usize,
}

impl Snapshot {
    fn new(params: ModelParams, palette: Palette, retrain_index: usize) -> Self {
        Snapshot {
            checksum: params.checksum(),
            params,
            palette,
            retrain_index,
        }
    }

    /// Recompute the checksum and compare with the stored one.
    pub fn verify(&self) -> bool {
        self.params.checksum() == self.checksum
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPrediction {
    /// Argmax class per output pixel, row-major over `extent`.
    pub classes: Vec<u8>,
    /// Probability of the argmax class.
    pub confidence: Vec<f32>,
    /// Scene pixels covered by the output.
    pub extent: Extent,
    /// Scene pixels fed to the model.
    pub input: Extent,
    /// `extent` origin relative to `input` origin.
    pub offset: (usize, usize),
    pub checksum: u32,
    pub retrain_index: usize,
    /// Palette of the snapshot that produced the prediction.
    pub palette: Palette,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsEntry {
    pub retrain_index: usize,
    pub timestamp_ms: u64,
    pub label_count: usize,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub history: Vec<MetricsEntry>,
    pub label_count: usize,
    pub label_distribution: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubmitOutcome {
    pub accepted: usize,
    /// Accepted points that replaced an existing label at the same pixel.
    pub updated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainOutcome {
    pub retrain_index: usize,
    pub report: Option<EvalReport>,
    pub checksum: u32,
    pub label_count: usize,
    pub fell_back: bool,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct StoredLabel {
    class: usize,
    timestamp_ms: u64,
}

struct State {
    labels: BTreeMap<(usize, usize), StoredLabel>,
    history: Vec<MetricsEntry>,
    /// Base weights including any classes added in this session.
    base: ModelParams,
    palette: Palette,
    /// Taken by an in-flight retrain.
    cache: Option<FeatureCache>,
    /// Bumped by reset and class addition so in-flight retrains learn that
    /// their inputs are obsolete.
    generation: u64,
    last_timestamp: u64,
}

pub struct Session {
    id: String,
    scene: Arc<SceneEntry>,
    base: Arc<ModelParams>,
    base_palette: Palette,
    provenance: Provenance,
    method: Method,
    finetune: FineTuneConfig,
    config: SessionConfig,
    snapshot: ArcSwap<Snapshot>,
    state: Mutex<State>,
    busy: AtomicBool,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct BusyGuard<'a>(&'a AtomicBool);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

impl Session {
    fn new(
        id: String,
        scene: Arc<SceneEntry>,
        base: &Checkpoint,
        method: Method,
        config: SessionConfig,
    ) -> Result<Self> {
        let finetune = online_config(method);
        finetune.validate(&base.params.spec)?;
        let mut cache = FeatureCache::new(
            &base.params,
            finetune.cut(&base.params.spec)?,
            scene.scene.rows(),
            scene.scene.cols(),
        )?;
        cache.fill(&base.params, &scene.scene.image)?;
        let baseline = evaluate_snapshot(&scene, &cache, &base.params)?;
        let t = now_ms();
        let state = State {
            labels: BTreeMap::new(),
            history: vec![MetricsEntry {
                retrain_index: 0,
                timestamp_ms: t,
                label_count: 0,
                report: baseline,
            }],
            base: base.params.clone(),
            palette: base.palette.clone(),
            cache: Some(cache),
            generation: 0,
            last_timestamp: t,
        };
        Ok(Session {
            id,
            scene,
            base: Arc::new(base.params.clone()),
            base_palette: base.palette.clone(),
            provenance: base.provenance.clone(),
            method,
            finetune,
            config,
            snapshot: ArcSwap::from_pointee(Snapshot::new(base.params.clone(), base.palette.clone(), 0)),
            state: Mutex::new(state),
            busy: AtomicBool::new(false),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn scene(&self) -> &SceneEntry {
        &self.scene
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn finetune_config(&self) -> &FineTuneConfig {
        &self.finetune
    }

    /// The current published snapshot.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.load_full()
    }

    pub fn palette(&self) -> Palette {
        self.snapshot().palette.clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn manifest(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.push("session.id", &self.id)
            .push("session.scene", &self.scene.id)
            .push("session.method", self.method)
            .push("session.epochs", self.finetune.epochs)
            .push("session.convergence", self.finetune.convergence.is_some())
            .push("session.learning_rate", self.finetune.learning_rate())
            .push("session.eval_points", self.scene.eval_points.len());
        doc
    }

    /// Forward pass of the current snapshot on a square crop centered near
    /// `(row, col)`, clamped into the scene.
    pub fn predict_patch(&self, row: usize, col: usize, size: Option<usize>) -> Result<PatchPrediction> {
        let size = size.unwrap_or(self.config.default_patch);
        if size > self.config.max_patch {
            return Err(Error::config(format!(
                "patch size {size} exceeds maximum {}",
                self.config.max_patch
            )));
        }
        let (rows, cols) = (self.scene.scene.rows(), self.scene.scene.cols());
        if row >= rows || col >= cols {
            return Err(Error::Coordinate {
                row,
                col,
                extent: format!("scene {rows}x{cols}"),
            });
        }
        let (h, w) = (size.min(rows), size.min(cols));
        let r0 = row.saturating_sub(h / 2).min(rows - h);
        let c0 = col.saturating_sub(w / 2).min(cols - w);
        let snap = self.snapshot();
        let bands = self.scene.scene.image.shape()[0];
        let crop = crate::model::crop(&self.scene.scene.image, bands, r0, c0, h, w)?;
        let out = snap.params.forward(&crop)?;
        let (n, oh, ow) = out.probs.dims3()?;
        let plane = oh * ow;
        let mut classes = Vec::with_capacity(plane);
        let mut confidence = Vec::with_capacity(plane);
        let mut p = vec![0f32; n];
        for i in 0..plane {
            for (k, v) in p.iter_mut().enumerate() {
                *v = out.probs.data()[k * plane + i];
            }
            let best = argmax(&p);
            classes.push(best as u8);
            confidence.push(p[best]);
        }
        let offset = out.offset();
        let geo = out.geometry;
        Ok(PatchPrediction {
            classes,
            confidence,
            extent: Extent::new(r0 + offset.0, c0 + offset.1, oh, ow),
            input: Extent::new(r0, c0, geo.rows.input, geo.cols.input),
            offset,
            checksum: snap.checksum,
            retrain_index: snap.retrain_index,
            palette: snap.palette.clone(),
        })
    }

    /// Validate and store points; a point on an already labeled pixel
    /// replaces the earlier class. Nothing is stored if any point is invalid.
    pub fn submit_labels(&self, points: &[LabelPoint]) -> Result<SubmitOutcome> {
        let mut st = self.lock();
        let ext = self.scene.grid.extent();
        for p in points {
            st.palette.check_class(p.class)?;
            if !ext.contains(p.row, p.col) {
                return Err(Error::Coordinate {
                    row: p.row,
                    col: p.col,
                    extent: format!("labelable extent {ext}"),
                });
            }
        }
        let t = now_ms().max(st.last_timestamp);
        st.last_timestamp = t;
        let mut updated = 0;
        for p in points {
            let prev = st.labels.insert(
                p.pos(),
                StoredLabel {
                    class: p.class,
                    timestamp_ms: t,
                },
            );
            updated += prev.is_some() as usize;
        }
        Ok(SubmitOutcome {
            accepted: points.len(),
            updated,
        })
    }

    /// Current labels, ordered by position.
    pub fn labels(&self) -> Vec<LabelPoint> {
        self.lock()
            .labels
            .iter()
            .map(|(&(r, c), l)| LabelPoint::new(r, c, l.class))
            .collect()
    }

    /// Fine-tune on all labels from the base weights and publish the result.
    pub fn retrain(&self) -> Result<RetrainOutcome> {
        if self
            .busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(Error::Busy(format!("session {} is already retraining", self.id)));
        }
        let _guard = BusyGuard(&self.busy);
        let started = Instant::now();
        let (labels, base, mut cache, generation) = {
            let mut st = self.lock();
            if st.labels.is_empty() {
                return Err(Error::Precondition("retrain needs at least one label".into()));
            }
            let labels: Vec<LabelPoint> = st
                .labels
                .iter()
                .map(|(&(r, c), l)| LabelPoint::new(r, c, l.class))
                .collect();
            let cache = st.cache.take().expect("cache present when not retraining");
            (labels, st.base.clone(), cache, st.generation)
        };
        let result = (|| -> Result<_> {
            cache.update(&base, &self.scene.scene.image, &labels)?;
            let current = self.snapshot();
            let outcome = fine_tune(&base, Some(&current.params), &cache, &labels, &self.finetune)?;
            let report = evaluate_snapshot(&self.scene, &cache, &outcome.params)?;
            Ok((outcome, report))
        })();
        if let Some(delay) = self.config.retrain_delay {
            std::thread::sleep(delay);
        }
        let mut st = self.lock();
        st.cache = Some(cache);
        let (outcome, report) = result?;
        if st.generation != generation {
            return Err(Error::Busy("session was reset or changed during retrain; retry".into()));
        }
        let report = report.map(|r| r.with_label_distribution(&labels));
        let index = st.history.last().map_or(0, |h| h.retrain_index) + 1;
        let snapshot = Snapshot::new(outcome.params, st.palette.clone(), index);
        let checksum = snapshot.checksum;
        self.snapshot.store(Arc::new(snapshot));
        let t = now_ms().max(st.last_timestamp);
        st.last_timestamp = t;
        st.history.push(MetricsEntry {
            retrain_index: index,
            timestamp_ms: t,
            label_count: labels.len(),
            report: report.clone(),
        });
        Ok(RetrainOutcome {
            retrain_index: index,
            report,
            checksum,
            label_count: labels.len(),
            fell_back: outcome.fell_back,
            elapsed: started.elapsed(),
        })
    }

    /// Append a class. Predictions are unchanged until it receives labels.
    pub fn add_class(&self, name: &str, color: [u8; 3]) -> Result<usize> {
        let mut st = self.lock();
        let mut palette = st.palette.clone();
        let index = palette.push(name, color)?;
        let base = st.base.add_class()?;
        let snap = self.snapshot();
        let params = snap.params.add_class()?;
        st.base = base;
        st.palette = palette.clone();
        st.generation += 1;
        self.snapshot
            .store(Arc::new(Snapshot::new(params, palette, snap.retrain_index)));
        Ok(index)
    }

    /// Back to the base model: labels, history and added classes are dropped.
    pub fn reset(&self) -> Result<()> {
        let mut st = self.lock();
        st.labels.clear();
        st.base = (*self.base).clone();
        st.palette = self.base_palette.clone();
        st.generation += 1;
        let report = match &st.cache {
            Some(cache) => evaluate_snapshot(&self.scene, cache, &self.base)?,
            None => None,
        };
        let t = now_ms().max(st.last_timestamp);
        st.last_timestamp = t;
        st.history = vec![MetricsEntry {
            retrain_index: 0,
            timestamp_ms: t,
            label_count: 0,
            report,
        }];
        self.snapshot.store(Arc::new(Snapshot::new(
            (*self.base).clone(),
            self.base_palette.clone(),
            0,
        )));
        Ok(())
    }

    pub fn metrics(&self) -> Metrics {
        let st = self.lock();
        let labels: Vec<LabelPoint> = st
            .labels
            .iter()
            .map(|(&(r, c), l)| LabelPoint::new(r, c, l.class))
            .collect();
        Metrics {
            history: st.history.clone(),
            label_count: labels.len(),
            label_distribution: label_distribution(&labels, st.palette.len()),
        }
    }

    /// Current snapshot as a checkpoint file.
    pub fn export_checkpoint(&self) -> Vec<u8> {
        let snap = self.snapshot();
        Checkpoint {
            params: snap.params.clone(),
            palette: snap.palette.clone(),
            provenance: self.provenance.clone(),
        }
        .to_bytes()
    }
}

fn evaluate_snapshot(scene: &SceneEntry, cache: &FeatureCache, params: &ModelParams) -> Result<Option<EvalReport>> {
    if scene.eval_points.is_empty() {
        return Ok(None);
    }
    let pred = cache.predict(params)?;
    evaluate_points(&pred, &scene.eval_points).map(Some)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSummary {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub has_truth: bool,
    pub extent: Extent,
}

/// Owns the base checkpoint, the registered scenes and all live sessions.
pub struct Service {
    base: Checkpoint,
    config: SessionConfig,
    scenes: RwLock<BTreeMap<String, Arc<SceneEntry>>>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

impl Service {
    pub fn new(base: Checkpoint, config: SessionConfig) -> Result<Self> {
        if base.palette.len() != base.params.spec.classes {
            return Err(Error::Palette(format!(
                "palette has {} classes but the model predicts {}",
                base.palette.len(),
                base.params.spec.classes
            )));
        }
        Ok(Service {
            base,
            config,
            scenes: RwLock::new(BTreeMap::new()),
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn base(&self) -> &Checkpoint {
        &self.base
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn add_scene(&self, id: impl Into<String>, scene: Scene) -> Result<()> {
        let id = id.into();
        if scene.image.shape()[0] != self.base.params.spec.channels {
            return Err(Error::dim(
                "scene bands",
                self.base.params.spec.channels,
                scene.image.shape()[0],
            ));
        }
        let entry = SceneEntry::new(id.clone(), scene, &self.base.params)?;
        self.scenes
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, Arc::new(entry));
        Ok(())
    }

    pub fn scene(&self, id: &str) -> Result<Arc<SceneEntry>> {
        self.scenes
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound {
                kind: "scene",
                id: id.to_string(),
            })
    }

    pub fn scenes(&self) -> Vec<SceneSummary> {
        self.scenes
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .map(|e| SceneSummary {
                id: e.id.clone(),
                rows: e.scene.rows(),
                cols: e.scene.cols(),
                bands: e.scene.image.shape()[0],
                has_truth: e.scene.labels.is_some(),
                extent: e.grid.extent(),
            })
            .collect()
    }

    pub fn create_session(&self, scene_id: &str, method: Option<Method>) -> Result<Arc<Session>> {
        let scene = self.scene(scene_id)?;
        let id = format!("{:032x}", rand::random::<u128>());
        let method = method.unwrap_or(self.config.default_method);
        let session = Arc::new(Session::new(
            id.clone(),
            scene,
            &self.base,
            method,
            self.config.clone(),
        )?);
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, session.clone());
        Ok(session)
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound {
                kind: "session",
                id: id.to_string(),
            })
    }
}
