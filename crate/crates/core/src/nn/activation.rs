use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
    out
}

/// Gradient is zero wherever the input was `<= 0`, including exactly 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if !(x > T::zero()) {
            *d = T::zero();
        }
    }
    g
}

/// 2×2 stride-2 max pooling; a trailing odd row/column is dropped. Returns
/// the pooled map and the flat input index chosen for each output element.
pub fn maxpool2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::dim("pool input", 2, h.min(w)));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let base = (ch * h + 2 * i) * w + 2 * j;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub fn maxpool2x2_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let dst = g.data_mut();
    for (&idx, &d) in argmax.iter().zip(grad_out.data()) {
        dst[idx] = dst[idx] + d;
    }
    g
}

/// Per-pixel softmax over the channel axis, max-subtracted so large logits
/// cannot overflow.
pub fn pixel_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w) = logits.dims3()?;
    let plane = h * w;
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for p in 0..plane {
        let mut max = x[p];
        for c in 1..n {
            max = max.max(x[c * plane + p]);
        }
        let mut sum = 0.0f64;
        for c in 0..n {
            let e = (x[c * plane + p] - max).as_f64().exp();
            out[c * plane + p] = T::from_f64(e);
            sum += e;
        }
        for c in 0..n {
            out[c * plane + p] = T::from_f64(out[c * plane + p].as_f64() / sum);
        }
    }
    Tensor::new(vec![n, h, w], out)
}

/// Center crop of a feature map to `rows × cols`; the extra row or column
/// of an odd margin comes off the bottom/right.
pub fn center_crop<T: Scalar>(input: &Tensor<T>, rows: usize, cols: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    if rows > h {
        return Err(Error::dim("crop row", h, rows));
    }
    if cols > w {
        return Err(Error::dim("crop col", w, cols));
    }
    let (r0, c0) = ((h - rows) / 2, (w - cols) / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * rows * cols);
    for ch in 0..c {
        for i in 0..rows {
            let s = (ch * h + r0 + i) * w + c0;
            out.extend_from_slice(&x[s..s + cols]);
        }
    }
    Tensor::new(vec![c, rows, cols], out)
}

/// Adjoint of [`center_crop`]: scatter the cropped gradient back into a
/// zero map of the original extent.
pub fn center_crop_backward<T: Scalar>(grad: &Tensor<T>, orig_shape: &[usize]) -> Tensor<T> {
    let (c, rows, cols) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let (h, w) = (orig_shape[1], orig_shape[2]);
    let (r0, c0) = ((h - rows) / 2, (w - cols) / 2);
    let mut out = Tensor::zeros(orig_shape);
    let dst = out.data_mut();
    for ch in 0..c {
        for i in 0..rows {
            let d = (ch * h + r0 + i) * w + c0;
            let s = (ch * rows + i) * cols;
            dst[d..d + cols].copy_from_slice(&grad.data()[s..s + cols]);
        }
    }
    out
}

/// Stack two maps of equal spatial extent along the channel axis.
pub fn concat_channels<T: Scalar>(first: &Tensor<T>, second: &Tensor<T>) -> Result<Tensor<T>> {
    let (c1, h, w) = first.dims3()?;
    let (c2, h2, w2) = second.dims3()?;
    if h2 != h {
        return Err(Error::dim("concat row", h, h2));
    }
    if w2 != w {
        return Err(Error::dim("concat col", w, w2));
    }
    let mut data = Vec::with_capacity(first.len() + second.len());
    data.extend_from_slice(first.data());
    data.extend_from_slice(second.data());
    Tensor::new(vec![c1 + c2, h, w], data)
}

/// Multiply each channel by 0 or 1.
pub fn apply_channel_mask<T: Scalar>(input: &mut Tensor<T>, mask: &[T]) -> Result<()> {
    let (c, h, w) = input.dims3()?;
    if mask.len() != c {
        return Err(Error::dim("mask channel", c, mask.len()));
    }
    for (chunk, &m) in input.data_mut().chunks_mut(h * w).zip(mask) {
        if m == T::zero() {
            chunk.fill(T::zero());
        }
    }
    Ok(())
}
