//! Base-model training from scratch on fully labeled patches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::exec::{backprop, FeatureState};
use super::params::ModelParams;
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::label::LabelPoint;
use crate::nn::{adam_step, AdamState, ParamSet, Tensor};

/// A training input window and its per-pixel class raster (same extent).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPatch {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    /// Fraction of the epochs after which the learning rate steps down.
    pub decay_fraction: f64,
    pub adam_eps: f64,
    /// Patches whose loss is tracked after every epoch.
    pub monitor_patches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            seed: 0,
            batch_size: 8,
            learning_rate: 1e-3,
            final_learning_rate: 1e-4,
            decay_fraction: 0.6,
            adam_eps: 1e-8,
            monitor_patches: 8,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decay_epoch = (self.epochs as f64 * self.decay_fraction).round() as usize;
        if epoch < decay_epoch {
            self.learning_rate
        } else {
            self.final_learning_rate
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub monitor_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub initial_monitor_loss: f64,
    pub history: Vec<EpochStats>,
}

fn patch_labels(spec: &ModelSpec, patch: &TrainingPatch) -> Result<(Tensor<f32>, Vec<LabelPoint>)> {
    let (_, h, w) = patch.image.dims3()?;
    if patch.labels.len() != h * w {
        return Err(Error::dim("label raster", h * w, patch.labels.len()));
    }
    let probe = ModelParams {
        spec: spec.clone(),
        tensors: ParamSet::new(),
    };
    let (input, geo) = probe.prepare_input(&patch.image)?;
    let mut labels = Vec::with_capacity(geo.rows.output * geo.cols.output);
    for i in 0..geo.rows.output {
        for j in 0..geo.cols.output {
            let class = patch.labels[(i + geo.rows.offset) * w + j + geo.cols.offset] as usize;
            if class >= spec.classes {
                return Err(Error::Palette(format!(
                    "label {class} not below {} classes",
                    spec.classes
                )));
            }
            labels.push(LabelPoint::new(i, j, class));
        }
    }
    Ok((input, labels))
}

/// Mean per-pixel cross-entropy of `params` over `patches`.
pub fn dataset_loss(params: &ModelParams, patches: &[(Tensor<f32>, Vec<LabelPoint>)]) -> Result<f64> {
    let layers = params.spec.layers();
    let none = |_: &str| false;
    let parts = patches
        .par_iter()
        .map(|(x, l)| {
            Ok((
                backprop(&layers, &params.tensors, FeatureState::new(x.clone()), l, 1.0, &none)?.loss_sum,
                l.len(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0usize), |(s, n), (a, b)| (s + a, n + b));
    Ok(sum / n as f64)
}

/// Train every parameter of a freshly initialized model with Adam.
///
/// Deterministic for a given seed: the sample order comes from a seeded
/// shuffle and per-sample gradients are summed in batch order even though
/// they are computed in parallel.
pub fn train_base(spec: &ModelSpec, dataset: &[TrainingPatch], config: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut params = ModelParams::init(spec, config.seed)?;
    let samples = dataset
        .iter()
        .map(|p| patch_labels(spec, p))
        .collect::<Result<Vec<_>>>()?;
    let monitor = &samples[..config.monitor_patches.clamp(1, samples.len())];
    let initial_monitor_loss = dataset_loss(&params, monitor)?;
    let layers = spec.layers();
    let all = |_: &str| true;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba5e);
    let mut adam = AdamState::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.learning_rate_at(epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_pixels = 0usize;
        for batch in order.chunks(config.batch_size) {
            let pixels: usize = batch.iter().map(|&i| samples[i].1.len()).sum();
            let weight = 1.0 / pixels as f64;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let (x, l) = &samples[i];
                    backprop(&layers, &params.tensors, FeatureState::new(x.clone()), l, weight, &all)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads: ParamSet<f32> = ParamSet::new();
            for r in results {
                epoch_loss += r.loss_sum * pixels as f64;
                for (name, g) in r.grads {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(name, g);
                        }
                    }
                }
            }
            epoch_pixels += pixels;
            adam_step(&mut params.tensors, &grads, &mut adam, lr, config.adam_eps);
        }
        let monitor_loss = dataset_loss(&params, monitor)?;
        log::debug!(
            "epoch {epoch}: train {:.4} monitor {monitor_loss:.4}",
            epoch_loss / epoch_pixels as f64
        );
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / epoch_pixels as f64,
            monitor_loss,
        });
    }
    Ok(TrainOutcome {
        params,
        initial_monitor_loss,
        history,
    })
}

/// Convenience for callers holding label rasters: pair patches with labels.
pub fn prepare_dataset(spec: &ModelSpec, patches: &[TrainingPatch]) -> Result<Vec<(Tensor<f32>, Vec<LabelPoint>)>> {
    patches.iter().map(|p| patch_labels(spec, p)).collect()
}
