//! Group normalization.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Per-group statistics kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct GroupNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn check<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, groups: usize) -> Result<(usize, usize)> {
    let (c, h, w) = input.dims3()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(format!(
            "group count {groups} does not divide {c} channels"
        )));
    }
    if gamma.shape() != [c] {
        return Err(Error::dim("gamma channel", c, gamma.len()));
    }
    if beta.shape() != [c] {
        return Err(Error::dim("beta channel", c, beta.len()));
    }
    Ok((c, h * w))
}

pub fn group_norm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<Tensor<T>> {
    group_norm_forward_cached(input, gamma, beta, groups, eps).map(|(y, _)| y)
}

/// Normalizes each group of `C / groups` channels over all of its elements,
/// then applies the per-channel affine `gamma · x̂ + beta`.
pub fn group_norm_forward_cached<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<(Tensor<T>, GroupNormCache<T>)> {
    let (c, plane) = check(input, gamma, beta, groups)?;
    let per_group = c / groups * plane;
    let x = input.data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let span = g * per_group..(g + 1) * per_group;
        let n = per_group as f64;
        let mean = x[span.clone()].iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = x[span.clone()]
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let rstd = 1.0 / (var + eps).sqrt();
        inv_std.push(rstd);
        for idx in span {
            let ch = idx / plane;
            let nrm = (x[idx].as_f64() - mean) * rstd;
            xhat[idx] = T::from_f64(nrm);
            out[idx] = T::from_f64(gamma.data()[ch].as_f64() * nrm + beta.data()[ch].as_f64());
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        GroupNormCache {
            normalized: Tensor::new(shape, xhat)?,
            inv_std,
            groups,
        },
    ))
}

pub fn group_norm_backward<T: Scalar>(
    cache: &GroupNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<GroupNormGrads<T>> {
    let (c, h, w) = grad_out.dims3()?;
    if cache.normalized.shape() != grad_out.shape() {
        return Err(Error::dim("grad_out", cache.normalized.len(), grad_out.len()));
    }
    let plane = h * w;
    let per_group = c / cache.groups * plane;
    let xhat = cache.normalized.data();
    let dy = grad_out.data();
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (idx, (&g, &xh)) in dy.iter().zip(xhat).enumerate() {
        let ch = idx / plane;
        dgamma[ch] += g.as_f64() * xh.as_f64();
        dbeta[ch] += g.as_f64();
    }
    let mut dx = vec![T::zero(); dy.len()];
    for grp in 0..cache.groups {
        let span = grp * per_group..(grp + 1) * per_group;
        let n = per_group as f64;
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for idx in span.clone() {
            let d = dy[idx].as_f64() * gamma.data()[idx / plane].as_f64();
            sum_d += d;
            sum_dx += d * xhat[idx].as_f64();
        }
        let rstd = cache.inv_std[grp];
        for idx in span {
            let d = dy[idx].as_f64() * gamma.data()[idx / plane].as_f64();
            dx[idx] = T::from_f64(rstd / n * (n * d - sum_d - xhat[idx].as_f64() * sum_dx));
        }
    }
    Ok(GroupNormGrads {
        input: Tensor::new(grad_out.shape().to_vec(), dx)?,
        gamma: Tensor::new(vec![c], dgamma.into_iter().map(T::from_f64).collect())?,
        beta: Tensor::new(vec![c], dbeta.into_iter().map(T::from_f64).collect())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_normalizes_to_beta() {
        let x = Tensor::<f32>::full(&[4, 3, 3], 5.0);
        let gamma = Tensor::new(vec![4], vec![1.5, -2.0, 0.3, 7.0]).unwrap();
        let beta = Tensor::new(vec![4], vec![0.0, 1.0, -2.0, 3.5]).unwrap();
        for groups in [1, 2, 4] {
            let y = group_norm_forward(&x, &gamma, &beta, groups, GROUP_NORM_EPS).unwrap();
            for c in 0..4 {
                for v in &y.data()[c * 9..(c + 1) * 9] {
                    assert!((v - beta.data()[c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn non_dividing_groups_rejected() {
        let x = Tensor::<f32>::zeros(&[6, 2, 2]);
        let g = Tensor::full(&[6], 1.0);
        let b = Tensor::zeros(&[6]);
        assert!(matches!(
            group_norm_forward(&x, &g, &b, 4, GROUP_NORM_EPS),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn matches_double_precision_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f32> = Tensor::from_fn(&[8, 4, 4], |_| rng.random_range(-3.0..3.0));
        let gamma: Tensor<f32> = Tensor::from_fn(&[8], |_| rng.random_range(0.5..1.5));
        let beta: Tensor<f32> = Tensor::from_fn(&[8], |_| rng.random_range(-1.0..1.0));
        let y = group_norm_forward(&x, &gamma, &beta, 2, GROUP_NORM_EPS).unwrap();
        for g in 0..2 {
            let vals: Vec<f64> = x.data()[g * 64..(g + 1) * 64].iter().map(|&v| v as f64).collect();
            let mean = vals.iter().sum::<f64>() / 64.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            for (i, v) in vals.iter().enumerate() {
                let c = g * 4 + i / 16;
                let e = gamma.data()[c] as f64 * (v - mean) / (var + 1e-5).sqrt() + beta.data()[c] as f64;
                assert!((y.data()[g * 64 + i] as f64 - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = Tensor::from_fn(&[4, 3, 2], |_| rng.random_range(-2.0..2.0));
        let gamma: Tensor<f64> = Tensor::from_fn(&[4], |_| rng.random_range(0.5..1.5));
        let beta: Tensor<f64> = Tensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0));
        let up: Tensor<f64> = Tensor::from_fn(&[4, 3, 2], |_| rng.random_range(-1.0..1.0));
        let obj = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let y = group_norm_forward(x, g, b, 2, GROUP_NORM_EPS).unwrap();
            y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = group_norm_forward_cached(&x, &gamma, &beta, 2, GROUP_NORM_EPS).unwrap();
        let grads = group_norm_backward(&cache, &gamma, &up).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (obj(&p, &gamma, &beta) - obj(&m, &gamma, &beta)) / (2.0 * h);
            assert!((num - grads.input.data()[i]).abs() < 1e-6, "x[{i}]");
        }
        for i in 0..4 {
            let (mut p, mut m) = (gamma.clone(), gamma.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (obj(&x, &p, &beta) - obj(&x, &m, &beta)) / (2.0 * h);
            assert!((num - grads.gamma.data()[i]).abs() < 1e-6, "gamma[{i}]");
            let (mut p, mut m) = (beta.clone(), beta.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (obj(&x, &gamma, &p) - obj(&x, &gamma, &m)) / (2.0 * h);
            assert!((num - grads.beta.data()[i]).abs() < 1e-6, "beta[{i}]");
        }
    }
}
