use std::collections::BTreeMap;

use super::tensor::Scalar;
use super::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;

/// First/second moment accumulators, keyed like the parameters they track.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Parameters without an entry in `grads` are left untouched.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, grads: &ParamSet<T>, state: &mut AdamState, lr: f64, eps: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else { continue };
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gv = gv.as_f64();
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            if lr == 0.0 || *mv == 0.0 {
                continue;
            }
            let update = lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            *pv = T::from_f64(pv.as_f64() - update);
        }
    }
}
