//! Point-selection strategies and the batched labeling schedule.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{evaluate_prediction, ClassRaster, EvalReport};
use crate::finetune::{fine_tune, FeatureCache, FineTuneConfig};
use crate::label::{Extent, LabelPoint};
use crate::model::{ModelParams, ScenePrediction};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryKind {
    Random,
    Entropy,
    MinMargin,
    Mistakes,
}

impl QueryKind {
    pub const ALL: [QueryKind; 4] = [
        QueryKind::Random,
        QueryKind::Entropy,
        QueryKind::MinMargin,
        QueryKind::Mistakes,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            QueryKind::Random => "random",
            QueryKind::Entropy => "entropy",
            QueryKind::MinMargin => "min-margin",
            QueryKind::Mistakes => "mistakes",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        QueryKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown query method `{s}`")))
    }

    fn needs_probs(&self) -> bool {
        !matches!(self, QueryKind::Random)
    }
}

impl std::fmt::Display for QueryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryMethod {
    pub kind: QueryKind,
    /// Candidate positions drawn per selection; the whole extent when it is
    /// at least the number of available pixels.
    pub pool_size: usize,
    pub seed: u64,
}

impl QueryMethod {
    pub fn new(kind: QueryKind, seed: u64) -> Self {
        QueryMethod {
            kind,
            pool_size: 10_000,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Distinct scene positions, in selection order.
    pub points: Vec<(usize, usize)>,
    /// Mistakes found fewer misclassified candidates than requested and the
    /// rest was filled at random.
    pub fell_back_to_random: bool,
}

/// Shannon entropy (natural log) of a class distribution; `0·ln 0 = 0`.
pub fn entropy(p: &[f32]) -> f64 {
    -p.iter()
        .map(|&v| v as f64)
        .filter(|&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Difference between the two largest probabilities.
pub fn margin(p: &[f32]) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        let v = v as f64;
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    if b == f64::NEG_INFINITY {
        a
    } else {
        a - b
    }
}

fn candidate_pool(extent: Extent, exclude: &HashSet<(usize, usize)>, size: usize, seed: u64) -> Vec<(usize, usize)> {
    let available: Vec<(usize, usize)> = extent.pixels().filter(|p| !exclude.contains(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = size.min(available.len());
    sample(&mut rng, available.len(), take)
        .into_iter()
        .map(|i| available[i])
        .collect()
}

/// Choose `count` new positions inside `extent`.
///
/// `probs` is required by every method except random, `truth` (scene
/// coordinates) by mistakes. Ranking methods break ties by `(row, col)`.
pub fn select_points(
    method: &QueryMethod,
    extent: Extent,
    probs: Option<&ScenePrediction>,
    truth: Option<&ClassRaster>,
    count: usize,
    already: &[(usize, usize)],
) -> Result<Selection> {
    if count > method.pool_size {
        return Err(Error::config(format!(
            "asked for {count} points from a pool of {}",
            method.pool_size
        )));
    }
    let probs = match (method.kind.needs_probs(), probs) {
        (true, None) => {
            return Err(Error::config(format!(
                "{} selection needs a probability map",
                method.kind
            )));
        }
        (_, p) => p,
    };
    if let Some(p) = probs {
        let e = p.extent;
        let inside = extent.row0 >= e.row0
            && extent.col0 >= e.col0
            && extent.row0 + extent.rows <= e.row0 + e.rows
            && extent.col0 + extent.cols <= e.col0 + e.cols;
        if !inside {
            return Err(Error::Coordinate {
                row: extent.row0,
                col: extent.col0,
                extent: format!("probability map extent {e}"),
            });
        }
    }
    let exclude: HashSet<(usize, usize)> = already.iter().copied().collect();
    let pool = candidate_pool(extent, &exclude, method.pool_size, method.seed);
    if pool.len() < count {
        return Err(Error::config(format!(
            "only {} unlabeled positions left, asked for {count}",
            pool.len()
        )));
    }
    let ranked = |score: &dyn Fn(&[f32]) -> f64, descending: bool| -> Vec<(usize, usize)> {
        let p = probs.expect("checked above");
        let mut scored: Vec<(f64, (usize, usize))> = pool.iter().map(|&(r, c)| (score(&p.at(r, c)), (r, c))).collect();
        scored.sort_by(|a, b| {
            let ord = if descending {
                b.0.total_cmp(&a.0)
            } else {
                a.0.total_cmp(&b.0)
            };
            ord.then(a.1.cmp(&b.1))
        });
        scored.into_iter().take(count).map(|(_, pos)| pos).collect()
    };
    let mut fell_back = false;
    let points = match method.kind {
        QueryKind::Random => pool[..count].to_vec(),
        QueryKind::Entropy => ranked(&|p| entropy(p), true),
        QueryKind::MinMargin => ranked(&|p| margin(p), false),
        QueryKind::Mistakes => {
            let truth = truth.ok_or_else(|| Error::config("mistakes selection needs ground truth"))?;
            let p = probs.expect("checked above");
            let (wrong, right): (Vec<_>, Vec<_>) = pool
                .iter()
                .copied()
                .partition(|&(r, c)| p.argmax_at(r, c) != truth.at(r, c) as usize);
            let mut out: Vec<(usize, usize)> = wrong.into_iter().take(count).collect();
            if out.len() < count {
                log::warn!(
                    "mistakes: {} misclassified candidates for {count} requested, filling at random",
                    out.len()
                );
                fell_back = true;
                out.extend(right.into_iter().take(count - out.len()));
            }
            out
        }
    };
    Ok(Selection {
        points,
        fell_back_to_random: fell_back,
    })
}

/// Cumulative label counts at which the model is retrained and evaluated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySchedule {
    checkpoints: Vec<usize>,
}

impl QuerySchedule {
    pub fn new(checkpoints: Vec<usize>) -> Result<Self> {
        if checkpoints.is_empty() {
            return Err(Error::Empty("query schedule"));
        }
        if checkpoints[0] == 0 || checkpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(format!(
                "schedule must be strictly increasing positive counts, got {checkpoints:?}"
            )));
        }
        Ok(QuerySchedule { checkpoints })
    }

    pub fn standard() -> Self {
        QuerySchedule {
            checkpoints: vec![10, 40, 100, 200, 400, 1000, 2000],
        }
    }

    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }
}

/// An area with ground truth for offline experiments.
#[derive(Debug, Clone, Copy)]
pub struct Area<'a> {
    pub image: &'a Tensor<f32>,
    pub truth: &'a ClassRaster,
}

#[derive(Debug, Clone)]
pub struct ScheduleStep {
    pub label_count: usize,
    pub params: ModelParams,
    pub report: EvalReport,
    pub fell_back_to_random: bool,
}

/// Select, label from ground truth, fine-tune and evaluate at every
/// checkpoint. Point sets are nested across checkpoints; selection at each
/// checkpoint uses the previous checkpoint's model.
pub fn run_schedule(
    area: Area<'_>,
    base: &ModelParams,
    method: &QueryMethod,
    config: &FineTuneConfig,
    schedule: &QuerySchedule,
) -> Result<Vec<ScheduleStep>> {
    config.validate(&base.spec)?;
    let (_, h, w) = area.image.dims3()?;
    if (area.truth.rows, area.truth.cols) != (h, w) {
        return Err(Error::dim("truth rows", h, area.truth.rows));
    }
    let mut cache = FeatureCache::new(base, config.cut(&base.spec)?, h, w)?;
    cache.fill(base, area.image)?;
    let extent = cache.grid().extent();
    let mut current = base.clone();
    let mut labels: Vec<LabelPoint> = Vec::new();
    let mut steps = Vec::with_capacity(schedule.checkpoints().len());
    for (i, &target) in schedule.checkpoints().iter().enumerate() {
        let probs = cache.predict(&current)?;
        let taken: Vec<(usize, usize)> = labels.iter().map(LabelPoint::pos).collect();
        let step_method = QueryMethod {
            seed: method.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            ..*method
        };
        let sel = select_points(
            &step_method,
            extent,
            Some(&probs),
            Some(area.truth),
            target - labels.len(),
            &taken,
        )?;
        labels.extend(
            sel.points
                .iter()
                .map(|&(r, c)| LabelPoint::new(r, c, area.truth.at(r, c) as usize)),
        );
        let outcome = fine_tune(base, Some(&current), &cache, &labels, config)?;
        current = outcome.params;
        let report = evaluate_prediction(&cache.predict(&current)?, area.truth)?.with_label_distribution(&labels);
        steps.push(ScheduleStep {
            label_count: labels.len(),
            params: current.clone(),
            report,
            fell_back_to_random: sel.fell_back_to_random,
        });
    }
    Ok(steps)
}
