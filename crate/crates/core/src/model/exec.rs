//! Runs any contiguous range of the layer program, forward and backward.

use super::spec::{LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::label::LabelPoint;
use crate::nn::{self, ParamSet, Scalar, Tensor, GROUP_NORM_EPS};

/// Activation state between two ops: the current map plus any skip
/// connections saved by encoder levels that have not been consumed yet.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureState<T = f32> {
    pub current: Tensor<T>,
    pub skips: Vec<Tensor<T>>,
}

impl<T: Scalar> FeatureState<T> {
    pub fn new(current: Tensor<T>) -> Self {
        FeatureState {
            current,
            skips: Vec::new(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureState<U> {
        FeatureState {
            current: self.current.cast(),
            skips: self.skips.iter().map(|s| s.cast()).collect(),
        }
    }
}

fn param<'a, T>(params: &'a ParamSet<T>, name: &str) -> Result<&'a Tensor<T>> {
    params
        .get(name)
        .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
}

fn mask_for<'a, T: Scalar>(params: &'a ParamSet<T>, layer: &LayerSpec) -> Option<&'a Tensor<T>> {
    layer
        .mask_of
        .as_ref()
        .and_then(|conv| params.get(&format!("{conv}.mask")))
}

enum Cache<T> {
    Conv(Tensor<T>),
    Deconv(Tensor<T>),
    Norm(nn::GroupNormCache<T>),
    Relu(Tensor<T>),
    Pool(Vec<usize>, Vec<usize>),
    Push,
    Concat {
        skip_shape: Vec<usize>,
        skip_channels: usize,
    },
}

fn step<T: Scalar>(
    layer: &LayerSpec,
    params: &ParamSet<T>,
    mut state: FeatureState<T>,
    keep: bool,
) -> Result<(FeatureState<T>, Option<Cache<T>>)> {
    let name = &layer.name;
    let x = state.current;
    let (next, cache) = match layer.kind {
        LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
            let y = nn::conv2d_forward(
                &x,
                param(params, &format!("{name}.weight"))?,
                param(params, &format!("{name}.bias"))?,
            )?;
            (y, keep.then_some(Cache::Conv(x)))
        }
        LayerKind::Deconv2x2 => {
            let y = nn::deconv2x2_forward(
                &x,
                param(params, &format!("{name}.weight"))?,
                param(params, &format!("{name}.bias"))?,
            )?;
            (y, keep.then_some(Cache::Deconv(x)))
        }
        LayerKind::GroupNorm { groups } => {
            let (y, c) = nn::group_norm_forward_cached(
                &x,
                param(params, &format!("{name}.gamma"))?,
                param(params, &format!("{name}.beta"))?,
                groups,
                GROUP_NORM_EPS,
            )?;
            (y, keep.then_some(Cache::Norm(c)))
        }
        LayerKind::Relu => {
            let y = nn::relu_forward(&x);
            (y, keep.then_some(Cache::Relu(x)))
        }
        LayerKind::MaxPool2x2 => {
            let (y, arg) = nn::maxpool2x2_forward(&x)?;
            (y, keep.then(|| Cache::Pool(x.shape().to_vec(), arg)))
        }
        LayerKind::Softmax => (nn::pixel_softmax(&x)?, None),
        LayerKind::PushSkip => {
            state.skips.push(x.clone());
            (x, keep.then_some(Cache::Push))
        }
        LayerKind::ConcatSkip => {
            let skip = state
                .skips
                .pop()
                .ok_or_else(|| Error::config(format!("{name}: no skip connection to consume")))?;
            let (_, h, w) = x.dims3()?;
            let cropped = nn::center_crop(&skip, h, w)?;
            let y = nn::concat_channels(&cropped, &x)?;
            let cache = Cache::Concat {
                skip_shape: skip.shape().to_vec(),
                skip_channels: cropped.shape()[0],
            };
            (y, keep.then_some(cache))
        }
    };
    let mut next = next;
    if let Some(mask) = mask_for(params, layer) {
        nn::apply_channel_mask(&mut next, mask.data())?;
    }
    Ok((
        FeatureState {
            current: next,
            skips: state.skips,
        },
        cache,
    ))
}

/// Forward over `layers`, starting from `state`.
pub fn run_layers<T: Scalar>(
    layers: &[LayerSpec],
    params: &ParamSet<T>,
    state: FeatureState<T>,
) -> Result<FeatureState<T>> {
    let mut state = state;
    for layer in layers {
        state = step(layer, params, state, false)?.0;
    }
    Ok(state)
}

/// Which parameters receive gradients.
pub trait Trainable {
    fn is_trainable(&self, param: &str) -> bool;
}

impl<F: Fn(&str) -> bool> Trainable for F {
    fn is_trainable(&self, param: &str) -> bool {
        self(param)
    }
}

/// Loss (weighted sum of `-log p`) and gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Backprop<T> {
    pub loss_sum: f64,
    pub grads: ParamSet<T>,
}

/// Forward through `layers` (which must end in a softmax), then back-propagate
/// `weight · Σ -log p[label]` to every trainable parameter.
///
/// Only ops that can appear in a trainable tail are differentiable; a softmax
/// anywhere but the last position is rejected.
pub fn backprop<T: Scalar>(
    layers: &[LayerSpec],
    params: &ParamSet<T>,
    input: FeatureState<T>,
    labels: &[LabelPoint],
    weight: f64,
    trainable: &dyn Trainable,
) -> Result<Backprop<T>> {
    let (last, body) = layers.split_last().ok_or_else(|| Error::config("empty layer range"))?;
    if last.kind != LayerKind::Softmax {
        return Err(Error::config("trainable range must end with the softmax layer"));
    }
    if let Some(bad) = body.iter().find(|l| l.kind == LayerKind::Softmax) {
        return Err(Error::UnsupportedLayer(bad.name.clone()));
    }
    let first_trainable = body
        .iter()
        .position(|l| l.param_names().iter().any(|p| trainable.is_trainable(p)));

    let mut state = input;
    let mut caches = Vec::with_capacity(body.len());
    for layer in body {
        let (next, cache) = step(layer, params, state, true)?;
        caches.push(cache.expect("cache kept"));
        state = next;
    }
    let probs = nn::pixel_softmax(&state.current)?;
    let loss_sum = weight * nn::cross_entropy_sum(&probs, labels)?;
    let mut grad = nn::softmax_cross_entropy_backward(&probs, labels, weight)?;
    let mut grads = ParamSet::new();
    let Some(first_trainable) = first_trainable else {
        return Ok(Backprop { loss_sum, grads });
    };

    let mut skip_grads: Vec<Tensor<T>> = Vec::new();
    for (idx, (layer, cache)) in body.iter().zip(caches).enumerate().rev() {
        if idx < first_trainable {
            break;
        }
        if let Some(mask) = mask_for(params, layer) {
            nn::apply_channel_mask(&mut grad, mask.data())?;
        }
        let need_input = idx > first_trainable;
        let name = &layer.name;
        grad = match cache {
            Cache::Conv(x) | Cache::Deconv(x) => {
                let w = param(params, &format!("{name}.weight"))?;
                let g = if layer.kind == LayerKind::Deconv2x2 {
                    nn::deconv2x2_backward(&x, w, &grad, need_input)?
                } else {
                    nn::conv2d_backward(&x, w, &grad, need_input)?
                };
                for (pname, t) in [(format!("{name}.weight"), g.weight), (format!("{name}.bias"), g.bias)] {
                    if trainable.is_trainable(&pname) {
                        grads.insert(pname, t);
                    }
                }
                match g.input {
                    Some(gi) => gi,
                    None => break,
                }
            }
            Cache::Norm(c) => {
                let gamma = param(params, &format!("{name}.gamma"))?;
                let g = nn::group_norm_backward(&c, gamma, &grad)?;
                for (pname, t) in [(format!("{name}.gamma"), g.gamma), (format!("{name}.beta"), g.beta)] {
                    if trainable.is_trainable(&pname) {
                        grads.insert(pname, t);
                    }
                }
                g.input
            }
            Cache::Relu(x) => nn::relu_backward(&x, &grad),
            Cache::Pool(shape, arg) => nn::maxpool2x2_backward(&shape, &arg, &grad),
            Cache::Push => {
                let mut g = grad;
                if let Some(sg) = skip_grads.pop() {
                    for (a, b) in g.data_mut().iter_mut().zip(sg.data()) {
                        *a = *a + *b;
                    }
                }
                g
            }
            Cache::Concat {
                skip_shape,
                skip_channels,
            } => {
                let (c, _, _) = grad.dims3()?;
                let skip_part = grad.channel_slice(0, skip_channels)?;
                skip_grads.push(nn::center_crop_backward(&skip_part, &skip_shape));
                grad.channel_slice(skip_channels, c - skip_channels)?
            }
        };
    }
    Ok(Backprop { loss_sum, grads })
}
