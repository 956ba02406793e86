use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{FineTuneOutcome, TailProblem};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelSpec};
use crate::nn::{ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GaConfig {
    /// Convolutions (counted back from the classifier) whose output channels
    /// can be dropped.
    pub masked_layers: usize,
    /// Expected fraction of zero bits in freshly sampled masks.
    pub dropout_rate: f64,
    pub generations: usize,
    pub population: usize,
    /// Best individuals copied unchanged into the next generation.
    pub elite: usize,
    /// Per-bit flip probability applied to offspring.
    pub mutation: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            masked_layers: 5,
            dropout_rate: 0.2,
            generations: 64,
            population: 32,
            elite: 4,
            mutation: 0.05,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.population < 2 {
            return Err(Error::config(format!(
                "GA population must be at least 2, got {}",
                self.population
            )));
        }
        if self.elite >= self.population {
            return Err(Error::config("GA elite count must be below the population size"));
        }
        if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            return Err(Error::config(format!(
                "dropout rate must be in (0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.generations == 0 {
            return Err(Error::config("GA needs at least one generation"));
        }
        if !(0.0..=1.0).contains(&self.mutation) {
            return Err(Error::config("mutation probability must be in [0, 1]"));
        }
        masked_convs(spec, self.masked_layers).map(|_| ())
    }
}

/// The last `count` maskable convolutions, in forward order. The classifier
/// is never masked.
pub fn masked_convs(spec: &ModelSpec, count: usize) -> Result<Vec<String>> {
    let layers = spec.layers();
    let maskable: Vec<String> = spec
        .conv_names()
        .into_iter()
        .filter(|c| layers.iter().any(|l| l.mask_of.as_deref() == Some(c.as_str())))
        .collect();
    if count == 0 || count > maskable.len() {
        return Err(Error::config(format!(
            "cannot mask {count} layers; {} maskable convolutions available",
            maskable.len()
        )));
    }
    Ok(maskable[maskable.len() - count..].to_vec())
}

/// Program index of the first op that applies one of the masks of `convs`.
pub fn mask_cut(spec: &ModelSpec, convs: &[String]) -> Result<usize> {
    spec.layers()
        .iter()
        .position(|l| l.mask_of.as_ref().is_some_and(|m| convs.contains(m)))
        .ok_or_else(|| Error::config("no mask op for the requested convolutions"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaOutcome {
    /// Conv name and per-channel keep bits of the best individual.
    pub masks: Vec<(String, Vec<bool>)>,
    /// Lowest loss seen up to and including each generation.
    pub best_trace: Vec<f64>,
    /// Loss of the all-ones mask, i.e. of the unmasked model.
    pub identity_loss: f64,
    pub best_loss: f64,
    pub evaluations: usize,
}

struct Layout {
    convs: Vec<(String, usize)>,
    bits: usize,
}

impl Layout {
    fn apply(&self, base: &ParamSet<f32>, genome: &[bool]) -> ParamSet<f32> {
        let mut params = base.clone();
        let mut at = 0;
        for (name, width) in &self.convs {
            let data = genome[at..at + width]
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect();
            params.insert(
                format!("{name}.mask"),
                Tensor::new(vec![*width], data).expect("mask shape"),
            );
            at += width;
        }
        params
    }

    fn split(&self, genome: &[bool]) -> Vec<(String, Vec<bool>)> {
        let mut at = 0;
        self.convs
            .iter()
            .map(|(name, width)| {
                let bits = genome[at..at + width].to_vec();
                at += width;
                (name.clone(), bits)
            })
            .collect()
    }
}

fn score(problem: &TailProblem<'_>, layout: &Layout, base: &ParamSet<f32>, pop: &[Vec<bool>]) -> Result<Vec<f64>> {
    pop.par_iter()
        .map(|g| {
            let loss = problem.loss(&layout.apply(base, g))?;
            Ok(if loss.is_nan() { f64::INFINITY } else { loss })
        })
        .collect()
}

fn ranked(losses: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    idx
}

/// Elitist GA over channel masks: binary tournament parents, per-bit
/// mutation, no crossover. Generation 0 holds the identity mask, so the
/// result is never worse than the unmasked model.
pub(crate) fn run_ga(start: &ModelParams, problem: &TailProblem<'_>, config: &GaConfig) -> Result<GaOutcome> {
    config.validate(&start.spec)?;
    let layers = start.spec.layers();
    let names = masked_convs(&start.spec, config.masked_layers)?;
    let convs: Vec<(String, usize)> = names
        .into_iter()
        .map(|n| {
            let width = layers.iter().find(|l| l.name == n).expect("conv exists").out_channels;
            (n, width)
        })
        .collect();
    let bits = convs.iter().map(|c| c.1).sum();
    let layout = Layout { convs, bits };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut pop: Vec<Vec<bool>> = Vec::with_capacity(config.population);
    pop.push(vec![true; layout.bits]);
    while pop.len() < config.population {
        pop.push(
            (0..layout.bits)
                .map(|_| rng.random_bool(1.0 - config.dropout_rate))
                .collect(),
        );
    }
    let mut losses = score(problem, &layout, &start.tensors, &pop)?;
    let identity_loss = losses[0];
    let mut evaluations = pop.len();
    let mut order = ranked(&losses);
    let mut best = (losses[order[0]], pop[order[0]].clone());
    let mut trace = vec![best.0];

    for _ in 1..config.generations {
        let mut next: Vec<Vec<bool>> = order[..config.elite].iter().map(|&i| pop[i].clone()).collect();
        let mut next_losses: Vec<f64> = order[..config.elite].iter().map(|&i| losses[i]).collect();
        let mut children = Vec::with_capacity(config.population - config.elite);
        while next.len() + children.len() < config.population {
            let a = rng.random_range(0..pop.len());
            let b = rng.random_range(0..pop.len());
            let parent = if (losses[a], a) <= (losses[b], b) { a } else { b };
            let mut child = pop[parent].clone();
            for bit in child.iter_mut() {
                if rng.random_bool(config.mutation) {
                    *bit = !*bit;
                }
            }
            children.push(child);
        }
        let child_losses = score(problem, &layout, &start.tensors, &children)?;
        evaluations += children.len();
        next.extend(children);
        next_losses.extend(child_losses);
        pop = next;
        losses = next_losses;
        order = ranked(&losses);
        if losses[order[0]] < best.0 {
            best = (losses[order[0]], pop[order[0]].clone());
        }
        trace.push(best.0);
    }
    Ok(GaOutcome {
        masks: layout.split(&best.1),
        best_trace: trace,
        identity_loss,
        best_loss: best.0,
        evaluations,
    })
}

pub(super) fn fine_tune_ga(
    start: &ModelParams,
    problem: &TailProblem<'_>,
    config: &GaConfig,
) -> Result<FineTuneOutcome> {
    let outcome = run_ga(start, problem, config)?;
    let mut params = start.clone();
    for (name, bits) in &outcome.masks {
        let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        params
            .tensors
            .insert(format!("{name}.mask"), Tensor::new(vec![bits.len()], data)?);
    }
    Ok(FineTuneOutcome {
        params,
        loss_before: outcome.identity_loss,
        loss_after: outcome.best_loss,
        epochs_run: config.generations,
        fell_back: false,
        loss_trace: outcome.best_trace.clone(),
        ga: Some(outcome),
    })
}
