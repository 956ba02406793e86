//! Valid-padded convolution and stride-2 transposed convolution.

use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Gradients of a convolution-like layer.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = input.dims3()?;
    let ws = weight.shape();
    if ws.len() != 4 {
        return Err(Error::dim("weight rank", 4, ws.len()));
    }
    let (c_out, k) = (ws[0], ws[2]);
    if ws[1] != c_in {
        return Err(Error::dim("weight in-channel", c_in, ws[1]));
    }
    if ws[3] != k {
        return Err(Error::dim("weight kernel-col", k, ws[3]));
    }
    if bias.shape() != [c_out] {
        return Err(Error::dim("bias out-channel", c_out, bias.len()));
    }
    if h < k {
        return Err(Error::dim("input row", k, h));
    }
    if w < k {
        return Err(Error::dim("input col", k, w));
    }
    Ok((c_in, h, w, c_out, k))
}

fn im2col<T: Scalar>(input: &Tensor<T>, k: usize) -> Vec<T> {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let src = input.data();
    let mut cols = vec![T::zero(); c_in * k * k * oh * ow];
    for c in 0..c_in {
        for di in 0..k {
            for dj in 0..k {
                let row = (c * k + di) * k + dj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for i in 0..oh {
                    let s = (c * h + i + di) * w + dj;
                    dst[i * ow..(i + 1) * ow].copy_from_slice(&src[s..s + ow]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], c_in: usize, h: usize, w: usize, k: usize) -> Tensor<T> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = Tensor::zeros(&[c_in, h, w]);
    let dst = out.data_mut();
    for c in 0..c_in {
        for di in 0..k {
            for dj in 0..k {
                let row = (c * k + di) * k + dj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for i in 0..oh {
                    let base = (c * h + i + di) * w + dj;
                    for (d, &s) in dst[base..base + ow].iter_mut().zip(&src[i * ow..(i + 1) * ow]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
    out
}

/// `out[o,i,j] = bias[o] + Σ weight[o,c,di,dj] · input[c,i+di,j+dj]`.
///
/// The kernel size is taken from the weight; each spatial extent shrinks by
/// `kernel - 1`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (c_in, h, w, c_out, k) = check_conv_shapes(input, weight, bias)?;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let p = oh * ow;
    let mut out = vec![T::zero(); c_out * p];
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias.data()[o]);
    }
    if k == 1 {
        gemm(
            c_out,
            c_in,
            p,
            weight.data(),
            false,
            input.data(),
            false,
            T::one(),
            &mut out,
        );
    } else {
        let cols = im2col(input, k);
        gemm(
            c_out,
            c_in * k * k,
            p,
            weight.data(),
            false,
            &cols,
            false,
            T::one(),
            &mut out,
        );
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Backward pass of [`conv2d_forward`] given the upstream gradient.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (c_in, h, w) = input.dims3()?;
    let ws = weight.shape();
    let (c_out, k) = (ws[0], ws[2]);
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    if grad_out.shape() != [c_out, oh, ow] {
        return Err(Error::dim("grad_out", c_out * oh * ow, grad_out.len()));
    }
    let p = oh * ow;
    let g = grad_out.data();
    let bias: Vec<T> = g
        .chunks(p)
        .map(|row| row.iter().fold(T::zero(), |a, &b| a + b))
        .collect();
    let ck = c_in * k * k;
    let mut dw = vec![T::zero(); c_out * ck];
    let cols_owned;
    let cols: &[T] = if k == 1 {
        input.data()
    } else {
        cols_owned = im2col(input, k);
        &cols_owned
    };
    gemm(c_out, p, ck, g, false, cols, true, T::zero(), &mut dw);
    let input_grad = if need_input_grad {
        let mut dcols = vec![T::zero(); ck * p];
        gemm(ck, c_out, p, weight.data(), true, g, false, T::zero(), &mut dcols);
        Some(if k == 1 {
            Tensor::new(vec![c_in, h, w], dcols)?
        } else {
            col2im(&dcols, c_in, h, w, k)
        })
    } else {
        None
    };
    Ok(ConvGrads {
        input: input_grad,
        weight: Tensor::new(ws.to_vec(), dw)?,
        bias: Tensor::new(vec![c_out], bias)?,
    })
}

fn check_deconv<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (c_in, h, w) = input.dims3()?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != 2 || ws[3] != 2 {
        return Err(Error::dim("deconv kernel", 2, ws.get(2).copied().unwrap_or(0)));
    }
    if ws[1] != c_in {
        return Err(Error::dim("weight in-channel", c_in, ws[1]));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::dim("bias out-channel", ws[0], bias.len()));
    }
    Ok((c_in, h, w, ws[0]))
}

/// 2×2 stride-2 transposed convolution:
/// `out[o, 2i+a, 2j+b] = bias[o] + Σ_c weight[o,c,a,b] · input[c,i,j]`.
pub fn deconv2x2_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (c_in, h, w, c_out) = check_deconv(input, weight, bias)?;
    let p = h * w;
    let mut out = Tensor::zeros(&[c_out, 2 * h, 2 * w]);
    let mut tap = vec![T::zero(); c_out * p];
    for a in 0..2 {
        for b in 0..2 {
            // weight[o, c, a, b] viewed as a c_out × c_in matrix
            unsafe {
                T::gemm_raw(
                    c_out,
                    c_in,
                    p,
                    T::one(),
                    weight.data().as_ptr().add(a * 2 + b),
                    (c_in * 4) as isize,
                    4,
                    input.data().as_ptr(),
                    p as isize,
                    1,
                    T::zero(),
                    tap.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            let dst = out.data_mut();
            for o in 0..c_out {
                let bo = bias.data()[o];
                for i in 0..h {
                    let row = (o * 2 * h + 2 * i + a) * 2 * w;
                    for j in 0..w {
                        dst[row + 2 * j + b] = tap[o * p + i * w + j] + bo;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`deconv2x2_forward`].
pub fn deconv2x2_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (c_in, h, w) = input.dims3()?;
    let c_out = weight.shape()[0];
    if grad_out.shape() != [c_out, 2 * h, 2 * w] {
        return Err(Error::dim("grad_out", c_out * 4 * h * w, grad_out.len()));
    }
    let p = h * w;
    let g = grad_out.data();
    let bias: Vec<T> = g
        .chunks(4 * p)
        .map(|row| row.iter().fold(T::zero(), |a, &b| a + b))
        .collect();
    let mut dw = vec![T::zero(); c_out * c_in * 4];
    let mut dx = vec![T::zero(); c_in * p];
    let mut tap = vec![T::zero(); c_out * p];
    for a in 0..2 {
        for b in 0..2 {
            for o in 0..c_out {
                for i in 0..h {
                    let row = (o * 2 * h + 2 * i + a) * 2 * w;
                    for j in 0..w {
                        tap[o * p + i * w + j] = g[row + 2 * j + b];
                    }
                }
            }
            // dW_ab[o, c] = Σ_p tap[o, p] · x[c, p]
            unsafe {
                T::gemm_raw(
                    c_out,
                    p,
                    c_in,
                    T::one(),
                    tap.as_ptr(),
                    p as isize,
                    1,
                    input.data().as_ptr(),
                    1,
                    p as isize,
                    T::zero(),
                    dw.as_mut_ptr().add(a * 2 + b),
                    (c_in * 4) as isize,
                    4,
                );
            }
            if need_input_grad {
                // dx[c, p] += Σ_o W_ab[o, c] · tap[o, p]
                unsafe {
                    T::gemm_raw(
                        c_in,
                        c_out,
                        p,
                        T::one(),
                        weight.data().as_ptr().add(a * 2 + b),
                        4,
                        (c_in * 4) as isize,
                        tap.as_ptr(),
                        p as isize,
                        1,
                        T::one(),
                        dx.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
            }
        }
    }
    Ok(ConvGrads {
        input: if need_input_grad {
            Some(Tensor::new(vec![c_in, h, w], dx)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![c_out], bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (ci, h, wd) = x.dims3().unwrap();
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let (oh, ow) = (h - k + 1, wd - k + 1);
        Tensor::from_fn(&[co, oh, ow], |idx| {
            let (o, i, j) = (idx / (oh * ow), idx / ow % oh, idx % ow);
            let mut s = b.data()[o];
            for c in 0..ci {
                for di in 0..k {
                    for dj in 0..k {
                        s += w.data()[((o * ci + c) * k + di) * k + dj] * x.at3(c, i + di, j + dj);
                    }
                }
            }
            s
        })
    }

    fn naive_deconv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (ci, h, wd) = x.dims3().unwrap();
        let co = w.shape()[0];
        Tensor::from_fn(&[co, 2 * h, 2 * wd], |idx| {
            let (o, r, c) = (idx / (4 * h * wd), idx / (2 * wd) % (2 * h), idx % (2 * wd));
            let (i, a, j, bb) = (r / 2, r % 2, c / 2, c % 2);
            let mut s = b.data()[o];
            for ch in 0..ci {
                s += w.data()[((o * ci + ch) * 2 + a) * 2 + bb] * x.at3(ch, i, j);
            }
            s
        })
    }

    #[test]
    fn zero_input_passes_bias() {
        let x = Tensor::<f32>::zeros(&[1, 3, 3]);
        let w = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f32 - 4.0);
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        let y = conv2d_forward(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn single_tap_product() {
        let mut x = Tensor::<f32>::zeros(&[1, 3, 3]);
        x.data_mut()[4] = 2.0;
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 3.0;
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &w, &b).unwrap().data(), &[7.0]);
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[4, 8, 8]);
        let w = rand_tensor(&mut rng, &[6, 4, 3, 3]);
        let b = rand_tensor(&mut rng, &[6]);
        let fast = conv2d_forward(&x.cast::<f32>(), &w.cast(), &b.cast()).unwrap();
        let slow = naive_conv(&x, &w, &b);
        assert_eq!(fast.shape(), slow.shape());
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((*a as f64 - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn deconv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[5, 4, 3]);
        let w = rand_tensor(&mut rng, &[3, 5, 2, 2]);
        let b = rand_tensor(&mut rng, &[3]);
        let fast = deconv2x2_forward(&x, &w, &b).unwrap();
        let slow = naive_deconv(&x, &w, &b);
        assert_eq!(fast.shape(), slow.shape());
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_axis() {
        let x = Tensor::<f32>::zeros(&[2, 5, 5]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let err = conv2d_forward(&x, &w, &b).unwrap_err().to_string();
        assert!(err.contains("in-channel"), "{err}");
        let small = Tensor::<f32>::zeros(&[3, 2, 5]);
        let err = conv2d_forward(&small, &w, &b).unwrap_err().to_string();
        assert!(err.contains("row"), "{err}");
    }

    type ConvFn = dyn Fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Tensor<f64>;

    fn finite_diff_check(
        f: &ConvFn,
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        g: &Tensor<f64>,
        grads: &ConvGrads<f64>,
    ) {
        let obj = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            f(x, w, b).data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let check = |analytic: &[f64], which: usize| {
            for (i, &a) in analytic.iter().enumerate() {
                let (mut xp, mut wp, mut bp) = (x.clone(), w.clone(), b.clone());
                let (mut xm, mut wm, mut bm) = (x.clone(), w.clone(), b.clone());
                match which {
                    0 => {
                        xp.data_mut()[i] += h;
                        xm.data_mut()[i] -= h;
                    }
                    1 => {
                        wp.data_mut()[i] += h;
                        wm.data_mut()[i] -= h;
                    }
                    _ => {
                        bp.data_mut()[i] += h;
                        bm.data_mut()[i] -= h;
                    }
                }
                let num = (obj(&xp, &wp, &bp) - obj(&xm, &wm, &bm)) / (2.0 * h);
                assert!((num - a).abs() < 1e-6 * (1.0 + num.abs()), "{which}/{i}: {num} vs {a}");
            }
        };
        check(grads.input.as_ref().unwrap().data(), 0);
        check(grads.weight.data(), 1);
        check(grads.bias.data(), 2);
    }

    #[test]
    fn conv_backward_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in [1usize, 3] {
            let x = rand_tensor(&mut rng, &[3, 6, 5]);
            let w = rand_tensor(&mut rng, &[2, 3, k, k]);
            let b = rand_tensor(&mut rng, &[2]);
            let g = rand_tensor(&mut rng, &[2, 7 - k, 6 - k]);
            let grads = conv2d_backward(&x, &w, &g, true).unwrap();
            finite_diff_check(&|x, w, b| conv2d_forward(x, w, b).unwrap(), &x, &w, &b, &g, &grads);
        }
    }

    #[test]
    fn deconv_backward_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, &[3, 3, 4]);
        let w = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let b = rand_tensor(&mut rng, &[2]);
        let g = rand_tensor(&mut rng, &[2, 6, 8]);
        let grads = deconv2x2_backward(&x, &w, &g, true).unwrap();
        finite_diff_check(&|x, w, b| deconv2x2_forward(x, w, b).unwrap(), &x, &w, &b, &g, &grads);
    }
}
