use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::label::LabelPoint;

fn check_labels<T: Scalar>(probs: &Tensor<T>, labels: &[LabelPoint]) -> Result<(usize, usize, usize)> {
    let (n, h, w) = probs.dims3()?;
    if labels.is_empty() {
        return Err(Error::Empty("label set"));
    }
    for l in labels {
        if l.row >= h || l.col >= w {
            return Err(Error::Coordinate {
                row: l.row,
                col: l.col,
                extent: format!("output extent {h}x{w}"),
            });
        }
        if l.class >= n {
            return Err(Error::Palette(format!("class {} is not below {n}", l.class)));
        }
    }
    Ok((n, h, w))
}

/// Probabilities are clamped away from zero before the log so a saturated
/// wrong prediction yields a large finite loss.
const MIN_PROB: f64 = 1e-12;

/// Sum of `-log p[class]` over labeled pixels.
pub fn cross_entropy_sum<T: Scalar>(probs: &Tensor<T>, labels: &[LabelPoint]) -> Result<f64> {
    let (_, h, w) = check_labels(probs, labels)?;
    let plane = h * w;
    Ok(labels
        .iter()
        .map(|l| {
            -probs.data()[l.class * plane + l.row * w + l.col]
                .as_f64()
                .max(MIN_PROB)
                .ln()
        })
        .sum())
}

/// Mean of `-log p[class, row, col]` over the labeled pixels only.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, labels: &[LabelPoint]) -> Result<f64> {
    Ok(cross_entropy_sum(probs, labels)? / labels.len() as f64)
}

/// Gradient of `weight · Σ -log softmax(logits)[class]` with respect to the
/// logits, given the softmax output: `weight · (p - onehot)` at each labeled
/// pixel and zero elsewhere.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[LabelPoint],
    weight: f64,
) -> Result<Tensor<T>> {
    let (n, h, w) = check_labels(probs, labels)?;
    let plane = h * w;
    let mut g = vec![0.0f64; n * plane];
    for l in labels {
        let p = l.row * w + l.col;
        for c in 0..n {
            g[c * plane + p] += weight * probs.data()[c * plane + p].as_f64();
        }
        g[l.class * plane + p] -= weight;
    }
    Tensor::new(vec![n, h, w], g.into_iter().map(T::from_f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(cols: &[[f32; 4]]) -> Tensor<f32> {
        let w = cols.len();
        Tensor::from_fn(&[4, 1, w], |i| cols[i % w][i / w])
    }

    #[test]
    fn perfect_prediction_zero_loss() {
        let p = probs(&[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]);
        let labels = [LabelPoint::new(0, 0, 0), LabelPoint::new(0, 1, 2)];
        assert_eq!(cross_entropy_loss(&p, &labels).unwrap(), 0.0);
    }

    #[test]
    fn uniform_is_ln4() {
        let p = probs(&[[0.25; 4]]);
        let l = cross_entropy_loss(&p, &[LabelPoint::new(0, 0, 3)]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn hand_computed_mean() {
        let p = probs(&[[0.5, 0.5, 0.0, 0.0], [0.25, 0.75, 0.0, 0.0], [0.0, 0.0, 0.875, 0.125]]);
        let labels = [
            LabelPoint::new(0, 0, 0),
            LabelPoint::new(0, 1, 0),
            LabelPoint::new(0, 2, 3),
        ];
        let l = cross_entropy_loss(&p, &labels).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-7, "{l}");
    }

    #[test]
    fn empty_and_out_of_extent_rejected() {
        let p = probs(&[[0.25; 4]]);
        assert!(matches!(cross_entropy_loss(&p, &[]), Err(Error::Empty(_))));
        assert!(matches!(
            cross_entropy_loss(&p, &[LabelPoint::new(1, 0, 0)]),
            Err(Error::Coordinate { .. })
        ));
    }
}
