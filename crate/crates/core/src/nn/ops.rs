//! Activations, pooling, fully connected layers and the classification loss.

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(grad_out: &Tensor, x: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward of sigmoid expressed through its output `y`.
pub fn sigmoid_backward(grad_out: &Tensor, y: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        *gv *= yv * (1.0 - yv);
    }
    g
}

fn nchw(x: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(shape_err!("{what} expects [b,c,h,w], got {s:?}")),
    }
}

/// Mean over spatial positions: `[b, c, h, w] -> [b, c, 1, 1]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = nchw(x, "global_avg_pool")?;
    let sp = h * w;
    let data = x.data().chunks_exact(sp).map(|ch| ch.iter().sum::<f64>() / sp as f64).collect();
    Tensor::from_vec(&[b, c, 1, 1], data)
}

pub fn global_avg_pool_backward(grad_out: &Tensor, x_shape: &[usize]) -> Result<Tensor> {
    let sp: usize = x_shape[2..].iter().product();
    let mut g = Vec::with_capacity(grad_out.numel() * sp);
    for &v in grad_out.data() {
        g.extend(std::iter::repeat_n(v / sp as f64, sp));
    }
    Tensor::from_vec(x_shape, g)
}

/// Max pooling; returns the output and the flat argmax index of each window.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, padding: usize) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = nchw(x, "max_pool2d")?;
    let ho = super::conv::out_extent(h, k, stride, padding)?;
    let wo = super::conv::out_extent(w, k, stride, padding)?;
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    let xs = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = usize::MAX;
                for p in 0..k {
                    let ih = (i * stride + p) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for q in 0..k {
                        let iw = (j * stride + q) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * w + iw as usize;
                        if xs[idx] > best {
                            best = xs[idx];
                            at = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(at);
            }
        }
    }
    Ok((Tensor::from_vec(&[b, c, ho, wo], out)?, arg))
}

pub fn max_pool2d_backward(grad_out: &Tensor, argmax: &[usize], x_shape: &[usize]) -> Result<Tensor> {
    let mut g = Tensor::zeros(x_shape);
    for (&gv, &at) in grad_out.data().iter().zip(argmax) {
        g.data_mut()[at] += gv;
    }
    Ok(g)
}

/// `x [b, in] · wᵀ [in, out] + bias`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, fin) = match *x.shape() {
        [b, f] => (b, f),
        ref s => return Err(shape_err!("linear expects [b, in], got {s:?}")),
    };
    let (fout, win) = match *w.shape() {
        [o, i] => (o, i),
        ref s => return Err(shape_err!("linear weight must be [out, in], got {s:?}")),
    };
    if fin != win {
        return Err(shape_err!("linear: input has {fin} features, weight expects {win}"));
    }
    let mut out = vec![0.0; b * fout];
    gemm(MatRef::row_major(x.data(), b, fin), MatRef::row_major(w.data(), fout, fin).t(), &mut out, 0.0);
    if let Some(bias) = bias {
        if bias.shape() != [fout] {
            return Err(shape_err!("linear bias {:?} does not match {fout} outputs", bias.shape()));
        }
        for row in out.chunks_exact_mut(fout) {
            row.iter_mut().zip(bias.data()).for_each(|(v, bv)| *v += bv);
        }
    }
    Tensor::from_vec(&[b, fout], out)
}

/// Returns `(grad_x, grad_w, grad_bias)`.
pub fn linear_backward(grad_out: &Tensor, x: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    if grad_out.shape() != [b, fout] {
        return Err(Error::Contract(format!("linear backward: grad {:?} vs [{b}, {fout}]", grad_out.shape())));
    }
    let go = MatRef::row_major(grad_out.data(), b, fout);
    let mut gx = vec![0.0; b * fin];
    gemm(go, MatRef::row_major(w.data(), fout, fin), &mut gx, 0.0);
    let mut gw = vec![0.0; fout * fin];
    gemm(go.t(), MatRef::row_major(x.data(), b, fin), &mut gw, 0.0);
    let mut gb = vec![0.0; fout];
    for row in grad_out.data().chunks_exact(fout) {
        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    Ok((Tensor::from_vec(&[b, fin], gx)?, Tensor::from_vec(&[fout, fin], gw)?, Tensor::from_vec(&[fout], gb)?))
}

/// Row-wise softmax of `[b, classes]` logits with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(shape_err!("softmax expects [b, classes], got {:?}", logits.shape()));
    }
    let k = logits.shape()[1];
    let mut p = logits.clone();
    for row in p.data_mut().chunks_exact_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(p)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let p = softmax(logits)?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Input(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Input(format!("label {y} out of range for {k} classes")));
        }
        // log-sum-exp form keeps precision when p[y] underflows
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    Ok((loss / b as f64, p))
}

/// `(softmax − onehot) / b`, scaled by the upstream gradient.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f64) -> Tensor {
    let (b, k) = (probs.shape()[0], probs.shape()[1]);
    let mut g = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        g.data_mut()[i * k + y] -= 1.0;
    }
    g.scale(upstream / b as f64)
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_values() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1., 3., 5., 7.]).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
        let c = Tensor::full(&[2, 3, 4, 5], 2.5);
        let y = global_avg_pool(&c).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::zeros(&[3, 4]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [0.0, 0.5, 1.0, 2.0, 5.0, 20.0] {
            let logits = Tensor::from_vec(&[1, 3], vec![margin, 0.0, 0.0]).unwrap();
            let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn out_of_range_label() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(softmax_cross_entropy(&logits, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn sigmoid_is_stable_and_bounded() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
        assert!(sigmoid_scalar(30.0) < 1.0 && sigmoid_scalar(-30.0) > 0.0);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1., 9., 3., 4.]).unwrap();
        let (y, arg) = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[9.0]);
        assert_eq!(arg, vec![1]);
    }
}
