//! Batched layer kernels. All image tensors are `(N, C, H, W)`, row-major.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Output positions `o` in `[start, end)` for which `o * stride + offset - pad`
/// lands inside `[0, in_len)`.
#[inline]
fn valid_range(
    offset: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    let start = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    if in_len + pad <= offset {
        return (0, 0);
    }
    let end = ((in_len - 1 + pad - offset) / stride + 1).min(out_len);
    (start.min(end), end)
}

fn conv_dims(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<[usize; 7]> {
    if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] {
        return Err(Error::Shape {
            layer: 0,
            expected: vec![
                input.first().copied().unwrap_or(0),
                weight.get(1).copied().unwrap_or(0),
                0,
                0,
            ],
            actual: input.to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
    }
    let (c, h, w) = (input[1], input[2], input[3]);
    let (o, kh, kw) = (weight[0], weight[2], weight[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::InvalidArgument(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok([c, h, w, o, kh, oh, ow])
}

/// 2-D cross-correlation: `out[n,o,y,x] = b[o] + Σ w[o,c,ky,kx] · in[n,c,y·s+ky−p,x·s+kx−p]`,
/// with zero padding.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &[S],
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let [c, h, w, o, k, oh, ow] = conv_dims(input.shape(), weight.shape(), stride, pad)?;
    let kw = weight.shape()[3];
    if bias.len() != o {
        return Err(Error::InvalidArgument(format!(
            "bias length {} != {o} output channels",
            bias.len()
        )));
    }
    let n = input.batch();
    let mut out = Tensor::zeros(vec![n, o, oh, ow]);
    let x = input.data();
    let wd = weight.data();
    let y = out.data_mut();
    for b in 0..n {
        for oc in 0..o {
            let plane = &mut y[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bias[oc]);
            for ic in 0..c {
                let src = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                for ky in 0..k {
                    let (y0, y1) = valid_range(ky, pad, stride, h, oh);
                    for kx in 0..kw {
                        let wv = wd[((oc * c + ic) * k + ky) * kw + kx];
                        let (x0, x1) = valid_range(kx, pad, stride, w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - pad;
                            let dst = &mut plane[oy * ow + x0..oy * ow + x1];
                            let ix0 = x0 * stride + kx - pad;
                            if stride == 1 {
                                let row = &src[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                                for (d, &s) in dst.iter_mut().zip(row) {
                                    *d += wv * s;
                                }
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d += wv * src[iy * w + ix0 + j * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `(d_input if requested, d_weight, d_bias)`.
pub type ConvGrads<S> = (Option<Tensor<S>>, Tensor<S>, Vec<S>);

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`. `d_input` is
/// skipped when not requested.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<ConvGrads<S>> {
    let [c, h, w, o, k, oh, ow] = conv_dims(input.shape(), weight.shape(), stride, pad)?;
    let kw = weight.shape()[3];
    let n = input.batch();
    if grad_out.shape() != [n, o, oh, ow] {
        return Err(Error::Shape {
            layer: 0,
            expected: vec![n, o, oh, ow],
            actual: grad_out.shape().to_vec(),
        });
    }
    let x = input.data();
    let wd = weight.data();
    let g = grad_out.data();
    let mut gw = Tensor::zeros(weight.shape().to_vec());
    let mut gb = vec![S::zero(); o];
    let mut gx = need_input_grad.then(|| Tensor::zeros(input.shape().to_vec()));

    for b in 0..n {
        for oc in 0..o {
            let gplane = &g[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            gb[oc] += gplane.iter().copied().sum::<S>();
            for ic in 0..c {
                let src_off = (b * c + ic) * h * w;
                for ky in 0..k {
                    let (y0, y1) = valid_range(ky, pad, stride, h, oh);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(kx, pad, stride, w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let widx = ((oc * c + ic) * k + ky) * kw + kx;
                        let wv = wd[widx];
                        let mut acc = S::zero();
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * ow + x0..oy * ow + x1];
                            let ix0 = src_off + iy * w + x0 * stride + kx - pad;
                            if stride == 1 {
                                let row = &x[ix0..ix0 + (x1 - x0)];
                                for (&gv, &s) in grow.iter().zip(row) {
                                    acc += gv * s;
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let drow = &mut gx.data_mut()[ix0..ix0 + (x1 - x0)];
                                    for (d, &gv) in drow.iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    acc += gv * x[ix0 + j * stride];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let d = gx.data_mut();
                                    for (j, &gv) in grow.iter().enumerate() {
                                        d[ix0 + j * stride] += wv * gv;
                                    }
                                }
                            }
                        }
                        gw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu grad shape")
}

fn pool_dims(
    shape: &[usize],
    size: usize,
    stride: usize,
) -> (usize, usize, usize, usize, usize, usize) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    (n, c, h, w, (h - size) / stride + 1, (w - size) / stride + 1)
}

/// Max pooling without padding. Ties resolve to the first position in
/// row-major window order, in both directions.
pub fn max_pool<S: Scalar>(input: &Tensor<S>, size: usize, stride: usize) -> Tensor<S> {
    let (n, c, h, w, oh, ow) = pool_dims(input.shape(), size, stride);
    let x = input.data();
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    let y = out.data_mut();
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = S::neg_infinity();
                for dy in 0..size {
                    let row = &src[(oy * stride + dy) * w + ox * stride..][..size];
                    for &v in row {
                        if v > best {
                            best = v;
                        }
                    }
                }
                y[(plane * oh + oy) * ow + ox] = best;
            }
        }
    }
    out
}

/// Flat input index of the winning element of every pooling window.
pub fn max_pool_argmax<S: Scalar>(input: &Tensor<S>, size: usize, stride: usize) -> Vec<usize> {
    let (n, c, h, w, oh, ow) = pool_dims(input.shape(), size, stride);
    let x = input.data();
    let mut winners = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = S::neg_infinity();
                let mut at = base + oy * stride * w + ox * stride;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > best {
                            best = x[idx];
                            at = idx;
                        }
                    }
                }
                winners.push(at);
            }
        }
    }
    winners
}

pub fn max_pool_backward<S: Scalar>(
    input: &Tensor<S>,
    grad_out: &Tensor<S>,
    size: usize,
    stride: usize,
) -> Tensor<S> {
    let mut gx = Tensor::zeros(input.shape().to_vec());
    let d = gx.data_mut();
    for (at, &g) in max_pool_argmax(input, size, stride)
        .into_iter()
        .zip(grad_out.data())
    {
        d[at] += g;
    }
    gx
}

/// `out[n, o] = b[o] + Σ_i w[o, i] · x[n, i]` with `w` stored `(outputs, inputs)`.
pub fn fully_connected<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &[S],
) -> Result<Tensor<S>> {
    let (outs, ins) = (weight.shape()[0], weight.shape()[1]);
    if input.sample_len() != ins || bias.len() != outs {
        return Err(Error::Shape {
            layer: 0,
            expected: vec![input.batch(), ins],
            actual: input.shape().to_vec(),
        });
    }
    let n = input.batch();
    let mut out = Tensor::zeros(vec![n, outs]);
    let wd = weight.data();
    for b in 0..n {
        let xs = input.sample(b);
        let y = &mut out.data_mut()[b * outs..(b + 1) * outs];
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &wd[o * ins..(o + 1) * ins];
            *yo = bias[o] + dot(row, xs);
        }
    }
    Ok(out)
}

pub fn fully_connected_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    need_input_grad: bool,
) -> (Option<Tensor<S>>, Tensor<S>, Vec<S>) {
    let (outs, ins) = (weight.shape()[0], weight.shape()[1]);
    let n = input.batch();
    let wd = weight.data();
    let mut gw = Tensor::zeros(weight.shape().to_vec());
    let mut gb = vec![S::zero(); outs];
    let mut gx = need_input_grad.then(|| Tensor::zeros(vec![n, ins]));
    for b in 0..n {
        let xs = input.sample(b);
        let gs = grad_out.sample(b);
        for (o, &gv) in gs.iter().enumerate() {
            if gv == S::zero() {
                continue;
            }
            gb[o] += gv;
            let grow = &mut gw.data_mut()[o * ins..(o + 1) * ins];
            for (d, &xv) in grow.iter_mut().zip(xs) {
                *d += gv * xv;
            }
            if let Some(gx) = gx.as_mut() {
                let drow = &mut gx.data_mut()[b * ins..(b + 1) * ins];
                for (d, &wv) in drow.iter_mut().zip(&wd[o * ins..(o + 1) * ins]) {
                    *d += gv * wv;
                }
            }
        }
    }
    (gx, gw, gb)
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    // four accumulators so the compiler can vectorise
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Max-subtracted softmax.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax cross-entropy loss and its gradient `softmax(logits) − onehot(label)`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &[S], label: usize) -> Result<(S, Vec<S>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let log_total = logits.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
    let loss = log_total - (logits[label] - max);
    let mut grad = softmax(logits);
    grad[label] -= S::one();
    Ok((loss.max(S::zero()), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    /// Direct-summation reference, independent of the row-slicing kernel.
    fn conv_reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        s: usize,
        p: usize,
    ) -> Tensor<f64> {
        let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [o, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for bi in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((oc * c + ic) * k + ky) * k + kx]
                                        * x.data()
                                            [((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, o, oh, ow], out).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = t(vec![1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t(vec![1, 1, 1, 1], &[1.0]);
        let y = conv2d(&x, &w, &[0.0], 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let x = Tensor::<f64>::filled(vec![1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::filled(vec![1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &[0.0], 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::<f64>::zeros(vec![2, 2, 5, 5]);
        let w = Tensor::<f64>::filled(vec![3, 2, 3, 3], 0.37);
        let y = conv2d(&x, &w, &[0.5, -1.0, 2.0], 2, 1).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let oc = (i / 9) % 3;
            assert_eq!(*v, [0.5, -1.0, 2.0][oc]);
        }
    }

    #[test]
    fn strided_padded_conv_matches_direct_summation() {
        let xs: Vec<f64> = (0..2 * 3 * 7 * 6)
            .map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0)
            .collect();
        let ws: Vec<f64> = (0..4 * 3 * 3 * 3)
            .map(|i| ((i * 13 % 17) as f64 - 8.0) / 9.0)
            .collect();
        let x = t(vec![2, 3, 7, 6], &xs);
        let w = t(vec![4, 3, 3, 3], &ws);
        let b = [0.1, -0.2, 0.3, 0.0];
        for (s, p) in [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)] {
            let fast = conv2d(&x, &w, &b, s, p).unwrap();
            let slow = conv_reference(&x, &w, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert_relative_eq!(a, e, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, &[0.0], 1, 0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = relu(&t(vec![1, 2], &[-1.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn pool_picks_window_max() {
        let x = t(vec![1, 1, 2, 4], &[1., 5., 2., 0., 3., 4., 8., 7.]);
        let y = max_pool(&x, 2, 2);
        assert_eq!(y.data(), &[5.0, 8.0]);
        let g = max_pool_backward(&x, &t(vec![1, 1, 1, 2], &[1.0, 2.0]), 2, 2);
        assert_eq!(g.data(), &[0., 1., 0., 0., 0., 0., 2., 0.]);
    }

    #[test]
    fn softmax_ce_symmetric_pair() {
        let (loss, grad) = softmax_cross_entropy(&[0.0f64, 0.0], 0).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(grad[0], -0.5, epsilon = 1e-15);
        assert_relative_eq!(grad[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn softmax_ce_is_stable_for_huge_logits() {
        let (loss, grad) = softmax_cross_entropy(&[1000.0f64, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
        let (loss32, _) = softmax_cross_entropy(&[1000.0f32, 0.0], 0).unwrap();
        assert!(loss32.is_finite());
    }

    #[test]
    fn softmax_ce_three_logits() {
        let (loss, _) = softmax_cross_entropy(&[1.0f64, 2.0, 3.0], 2).unwrap();
        let expected = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert_relative_eq!(loss, expected, epsilon = 1e-14);
        assert!((loss - 0.40761).abs() < 1e-5);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0f64, 1.0], 2),
            Err(Error::LabelOutOfRange {
                label: 2,
                n_classes: 2
            })
        ));
    }

    #[test]
    fn fc_forward_matches_hand_computation() {
        let x = t(vec![1, 3], &[1.0, 2.0, 3.0]);
        let w = t(vec![2, 3], &[1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let y = fully_connected(&x, &w, &[0.25, -0.25]).unwrap();
        assert_eq!(y.data(), &[-1.75, 2.75]);
    }
}
