//! Adapting a trained model to new point labels with a frozen trunk and
//! cached trunk features.
//!
//! Every method trains (or searches) only parameters that sit after a fixed
//! program cut, so trunk activations are computed once per scene tile and
//! reused across epochs, retrains and GA generations.

mod cache;
mod ga;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::label::LabelPoint;
use crate::model::{backprop, Backprop, FeatureState, LayerKind, LayerSpec, ModelParams, ModelSpec};
use crate::nn::{adam_step, AdamState, ParamSet, Tensor};

pub use cache::{FeatureCache, TileLabels};
pub use ga::{mask_cut, masked_convs, GaConfig, GaOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Weights and biases of the final `k` convolutional layers, plus any
    /// group-norm parameters between them.
    LastK(usize),
    /// Gamma/beta of the trailing group-norm layers only.
    GroupParams,
    /// Binary channel masks found by a genetic search; no weights change.
    DropoutGa,
}

impl Method {
    pub fn as_str(&self) -> String {
        match self {
            Method::LastK(k) => format!("last-{k}"),
            Method::GroupParams => "group-params".into(),
            Method::DropoutGa => "dropout".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "group-params" | "group" => Ok(Method::GroupParams),
            "dropout" | "dropout-ga" => Ok(Method::DropoutGa),
            _ => s
                .strip_prefix("last-")
                .and_then(|k| k.parse().ok())
                .map(Method::LastK)
                .ok_or_else(|| Error::config(format!("unknown fine-tuning method `{s}`"))),
        }
    }

    pub fn default_learning_rate(&self) -> f64 {
        match self {
            Method::LastK(1) => 0.01,
            Method::LastK(2) => 0.005,
            Method::LastK(_) => 0.001,
            Method::GroupParams => 0.0025,
            Method::DropoutGa => 0.0,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.as_str())
    }
}

/// Stop when an epoch improves the label-set loss by less than `tolerance`
/// (relative), or after `max_epochs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    pub tolerance: f64,
    pub max_epochs: usize,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence {
            tolerance: 1e-4,
            max_epochs: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub method: Method,
    /// Overrides [`Method::default_learning_rate`].
    pub learning_rate: Option<f64>,
    pub epochs: usize,
    pub convergence: Option<Convergence>,
    /// Minimum labels per Adam step.
    pub batch_size: usize,
    /// Trailing group-norm layers trained by [`Method::GroupParams`].
    pub group_layers: usize,
    pub ga: GaConfig,
    /// Start every run from the base weights rather than the latest
    /// fine-tuned ones.
    pub reinit_from_base: bool,
    pub adam_eps: f64,
    pub seed: u64,
}

impl FineTuneConfig {
    pub fn new(method: Method) -> Self {
        FineTuneConfig {
            method,
            learning_rate: None,
            epochs: 10,
            convergence: None,
            batch_size: 16,
            group_layers: 2,
            ga: GaConfig::default(),
            reinit_from_base: true,
            adam_eps: 1e-5,
            seed: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| self.method.default_learning_rate())
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        match self.method {
            Method::LastK(k) => {
                let max = spec.max_tail_k();
                if k == 0 || k > max {
                    return Err(Error::config(format!("last-k needs k in 1..={max}, got {k}")));
                }
            }
            Method::GroupParams => {
                if self.group_layers == 0 {
                    return Err(Error::config("group-params needs at least one group-norm layer"));
                }
            }
            Method::DropoutGa => return self.ga.validate(spec),
        }
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if let Some(c) = self.convergence {
            if c.max_epochs == 0 || !(c.tolerance >= 0.0) {
                return Err(Error::config("convergence needs max_epochs ≥ 1 and tolerance ≥ 0"));
            }
        }
        Ok(())
    }

    /// Program index where cached features are taken.
    pub fn cut(&self, spec: &ModelSpec) -> Result<usize> {
        match self.method {
            Method::LastK(k) => spec.tail_start(k),
            Method::GroupParams => Ok(group_layers(spec, self.group_layers)?[0].0),
            Method::DropoutGa => mask_cut(spec, &masked_convs(spec, self.ga.masked_layers)?),
        }
    }

    /// Names of the parameters the method may change (masks excluded).
    pub fn trainable(&self, spec: &ModelSpec) -> Result<Vec<String>> {
        let layers = spec.layers();
        Ok(match self.method {
            Method::LastK(k) => layers[spec.tail_start(k)?..]
                .iter()
                .flat_map(|l| l.param_names())
                .collect(),
            Method::GroupParams => group_layers(spec, self.group_layers)?
                .into_iter()
                .flat_map(|(_, l)| l.param_names())
                .collect(),
            Method::DropoutGa => Vec::new(),
        })
    }
}

/// The last `count` group-norm layers with their program indices, in order.
fn group_layers(spec: &ModelSpec, count: usize) -> Result<Vec<(usize, LayerSpec)>> {
    let all: Vec<(usize, LayerSpec)> = spec
        .layers()
        .into_iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.kind, LayerKind::GroupNorm { .. }))
        .collect();
    if count == 0 || count > all.len() {
        return Err(Error::config(format!(
            "asked for {count} group-norm layers, model has {}",
            all.len()
        )));
    }
    Ok(all[all.len() - count..].to_vec())
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub params: ModelParams,
    pub loss_before: f64,
    pub loss_after: f64,
    pub epochs_run: usize,
    /// The run made the label-set loss worse and the starting weights were
    /// returned instead.
    pub fell_back: bool,
    /// Label-set loss after each epoch (convergence mode only).
    pub loss_trace: Vec<f64>,
    pub ga: Option<GaOutcome>,
}

fn is_pointwise(layers: &[LayerSpec]) -> bool {
    layers
        .iter()
        .all(|l| matches!(l.kind, LayerKind::Conv1x1 | LayerKind::Relu | LayerKind::Softmax))
}

/// Evaluates and differentiates the tail over cached tile features.
pub(crate) struct TailProblem<'a> {
    pub layers: Vec<LayerSpec>,
    pub cache: &'a FeatureCache,
    pub groups: Vec<TileLabels>,
    pub label_count: usize,
    pointwise: bool,
}

impl<'a> TailProblem<'a> {
    pub fn new(spec: &ModelSpec, cache: &'a FeatureCache, labels: &[LabelPoint]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("label set"));
        }
        for l in labels {
            if l.class >= spec.classes {
                return Err(Error::Palette(format!(
                    "label class {} not below {} classes",
                    l.class, spec.classes
                )));
            }
        }
        let layers = spec.layers()[cache.cut()..].to_vec();
        let groups = cache.group(labels)?;
        Ok(TailProblem {
            pointwise: is_pointwise(&layers),
            layers,
            cache,
            groups,
            label_count: labels.len(),
        })
    }

    /// Feature columns at each label of `units`, packed as a `[c, 1, n]` map.
    fn pack(&self, units: &[&TileLabels]) -> Result<(FeatureState<f32>, Vec<LabelPoint>)> {
        let n: usize = units.iter().map(|u| u.labels.len()).sum();
        let first = self.cache.state(units[0].tile).expect("grouped tiles are cached");
        let c = first.current.shape()[0];
        let mut data = vec![0f32; c * n];
        let mut labels = Vec::with_capacity(n);
        for u in units {
            let map = &self.cache.state(u.tile).expect("grouped tiles are cached").current;
            let (_, h, w) = map.dims3()?;
            for l in &u.labels {
                let j = labels.len();
                for ch in 0..c {
                    data[ch * n + j] = map.data()[(ch * h + l.row) * w + l.col];
                }
                labels.push(LabelPoint::new(0, j, l.class));
            }
        }
        Ok((FeatureState::new(Tensor::new(vec![c, 1, n], data)?), labels))
    }

    /// Weighted loss sum and summed gradients over `units`, reduced in order.
    pub fn backprop(
        &self,
        params: &ParamSet<f32>,
        units: &[&TileLabels],
        weight: f64,
        trainable: &(dyn Fn(&str) -> bool + Sync),
    ) -> Result<Backprop<f32>> {
        if self.pointwise {
            let (state, labels) = self.pack(units)?;
            return backprop(&self.layers, params, state, &labels, weight, &trainable);
        }
        let parts = units
            .par_iter()
            .map(|u| {
                let state = self.cache.state(u.tile).expect("grouped tiles are cached").clone();
                backprop(&self.layers, params, state, &u.labels, weight, &trainable)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = Backprop {
            loss_sum: 0.0,
            grads: ParamSet::new(),
        };
        for p in parts {
            total.loss_sum += p.loss_sum;
            for (name, g) in p.grads {
                match total.grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        total.grads.insert(name, g);
                    }
                }
            }
        }
        Ok(total)
    }

    /// Mean cross-entropy over every label.
    pub fn loss(&self, params: &ParamSet<f32>) -> Result<f64> {
        let all: Vec<&TileLabels> = self.groups.iter().collect();
        let none = |_: &str| false;
        Ok(self.backprop(params, &all, 1.0, &none)?.loss_sum / self.label_count as f64)
    }

    /// Units shuffled for one epoch: single labels for pointwise tails,
    /// whole tiles otherwise.
    fn units(&self) -> Vec<TileLabels> {
        if self.pointwise {
            self.groups
                .iter()
                .flat_map(|g| {
                    g.labels.iter().map(|&l| TileLabels {
                        tile: g.tile,
                        labels: vec![l],
                    })
                })
                .collect()
        } else {
            self.groups.clone()
        }
    }
}

fn start_params<'p>(
    base: &'p ModelParams,
    current: Option<&'p ModelParams>,
    config: &FineTuneConfig,
) -> &'p ModelParams {
    match current {
        Some(c) if !config.reinit_from_base => c,
        _ => base,
    }
}

/// Build a cache with features for every label of `labels` on `image`.
pub fn build_feature_cache(
    params: &ModelParams,
    image: &Tensor<f32>,
    labels: &[LabelPoint],
    cut: usize,
) -> Result<FeatureCache> {
    let (_, h, w) = image.dims3()?;
    let mut cache = FeatureCache::new(params, cut, h, w)?;
    cache.update(params, image, labels)?;
    Ok(cache)
}

/// Run one fine-tuning method over cached features.
///
/// `labels` are in scene coordinates and must all fall in tiles present in
/// `cache`. The result never has a higher label-set loss than the starting
/// weights.
pub fn fine_tune(
    base: &ModelParams,
    current: Option<&ModelParams>,
    cache: &FeatureCache,
    labels: &[LabelPoint],
    config: &FineTuneConfig,
) -> Result<FineTuneOutcome> {
    let start = start_params(base, current, config);
    config.validate(&start.spec)?;
    let cut = config.cut(&start.spec)?;
    if cache.cut() != cut {
        return Err(Error::config(format!(
            "cache was built at cut {} but {} needs cut {cut}",
            cache.cut(),
            config.method
        )));
    }
    cache.check(start)?;
    let problem = TailProblem::new(&start.spec, cache, labels)?;
    if config.method == Method::DropoutGa {
        return ga::fine_tune_ga(start, &problem, &config.ga);
    }

    let loss_before = problem.loss(&start.tensors)?;
    let names = config.trainable(&start.spec)?;
    let trainable = |p: &str| names.iter().any(|n| n == p);
    let lr = config.learning_rate();
    let mut params = start.tensors.clone();
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut units = problem.units();
    let max_epochs = config.convergence.map_or(config.epochs, |c| c.max_epochs);
    let mut trace = Vec::new();
    let mut prev = loss_before;
    let mut epochs_run = 0;
    for _ in 0..max_epochs {
        units.shuffle(&mut rng);
        let mut i = 0;
        while i < units.len() {
            let mut j = i;
            let mut n = 0;
            while j < units.len() && n < config.batch_size {
                n += units[j].labels.len();
                j += 1;
            }
            let batch: Vec<&TileLabels> = units[i..j].iter().collect();
            let grads = problem.backprop(&params, &batch, 1.0 / n as f64, &trainable)?.grads;
            adam_step(&mut params, &grads, &mut adam, lr, config.adam_eps);
            i = j;
        }
        epochs_run += 1;
        if let Some(conv) = config.convergence {
            let loss = problem.loss(&params)?;
            trace.push(loss);
            let improvement = if prev > 0.0 { (prev - loss) / prev } else { 0.0 };
            prev = loss;
            if improvement < conv.tolerance {
                break;
            }
        }
    }
    let loss_after = match trace.last() {
        Some(&l) => l,
        None => problem.loss(&params)?,
    };
    let fell_back = loss_after > loss_before || !loss_after.is_finite();
    let params = if fell_back {
        start.clone()
    } else {
        ModelParams {
            spec: start.spec.clone(),
            tensors: params,
        }
    };
    Ok(FineTuneOutcome {
        params,
        loss_before,
        loss_after: if fell_back { loss_before } else { loss_after },
        epochs_run,
        fell_back,
        loss_trace: trace,
        ga: None,
    })
}

/// Cache features for `labels` on `image` and fine-tune the last `k` layers.
pub fn finetune_last_k(
    base: &ModelParams,
    image: &Tensor<f32>,
    labels: &[LabelPoint],
    k: usize,
    config: &FineTuneConfig,
) -> Result<FineTuneOutcome> {
    let config = FineTuneConfig {
        method: Method::LastK(k),
        ..config.clone()
    };
    config.validate(&base.spec)?;
    let cache = build_feature_cache(base, image, labels, config.cut(&base.spec)?)?;
    fine_tune(base, None, &cache, labels, &config)
}

/// Cache features and fine-tune group-norm parameters.
pub fn finetune_group_params(
    base: &ModelParams,
    image: &Tensor<f32>,
    labels: &[LabelPoint],
    config: &FineTuneConfig,
) -> Result<FineTuneOutcome> {
    let config = FineTuneConfig {
        method: Method::GroupParams,
        ..config.clone()
    };
    config.validate(&base.spec)?;
    let cache = build_feature_cache(base, image, labels, config.cut(&base.spec)?)?;
    fine_tune(base, None, &cache, labels, &config)
}

/// Cache features and search dropout masks.
pub fn finetune_dropout_ga(
    base: &ModelParams,
    image: &Tensor<f32>,
    labels: &[LabelPoint],
    ga: &GaConfig,
) -> Result<FineTuneOutcome> {
    let config = FineTuneConfig {
        ga: ga.clone(),
        ..FineTuneConfig::new(Method::DropoutGa)
    };
    config.validate(&base.spec)?;
    let cache = build_feature_cache(base, image, labels, config.cut(&base.spec)?)?;
    fine_tune(base, None, &cache, labels, &config)
}
