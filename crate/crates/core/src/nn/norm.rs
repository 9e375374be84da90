//! Batch normalisation over the channel axis of `[b, c]` or `[b, c, h, w]`
//! inputs.

use crate::error::{shape_err, Error, Result};
use crate::nn::Mode;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

fn layout(x: &Tensor, c: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[1] != c {
        return Err(shape_err!("batchnorm over {c} channels cannot take input {s:?}"));
    }
    Ok((s[0], s[2..].iter().product()))
}

/// Saved state of a train-mode forward, consumed by [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    /// Per-channel batch mean.
    pub mean: Vec<f64>,
    /// Per-channel biased batch variance.
    pub var: Vec<f64>,
}

/// Normalises with batch statistics over `(b, spatial)` per channel.
pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, BnCache)> {
    let c = gamma.numel();
    let (b, sp) = layout(x, c)?;
    let n = b * sp;
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "train-mode batchnorm needs more than one value per channel, got batch {b} with spatial size {sp}"
        )));
    }
    let xs = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += xs[(bi * c + ch) * sp..(bi * c + ch + 1) * sp].iter().sum::<f64>();
        }
        let m = s / n as f64;
        let mut v = 0.0;
        for bi in 0..b {
            v += xs[(bi * c + ch) * sp..(bi * c + ch + 1) * sp].iter().map(|&e| (e - m) * (e - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / n as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    {
        let (xh, o) = (x_hat.data_mut(), out.data_mut());
        for bi in 0..b {
            for ch in 0..c {
                let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
                for i in (bi * c + ch) * sp..(bi * c + ch + 1) * sp {
                    let h = (xs[i] - mean[ch]) * inv_std[ch];
                    xh[i] = h;
                    o[i] = g * h + bt;
                }
            }
        }
    }
    Ok((out, BnCache { x_hat, inv_std, mean, var }))
}

/// Per-channel affine map using running statistics.
pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (scale, shift) = eval_affine(gamma, beta, running_mean, running_var, eps);
    apply_channel_affine(x, &scale, &shift)
}

/// `(scale, shift)` such that eval-mode BN is `scale[c]·x + shift[c]`.
pub fn eval_affine(gamma: &Tensor, beta: &Tensor, rm: &Tensor, rv: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let c = gamma.numel();
    let mut scale = vec![0.0; c];
    let mut shift = vec![0.0; c];
    for ch in 0..c {
        scale[ch] = gamma.data()[ch] / (rv.data()[ch] + eps).sqrt();
        shift[ch] = beta.data()[ch] - rm.data()[ch] * scale[ch];
    }
    (scale, shift)
}

pub fn apply_channel_affine(x: &Tensor, scale: &[f64], shift: &[f64]) -> Result<Tensor> {
    let c = scale.len();
    let (b, sp) = layout(x, c)?;
    let mut out = x.clone();
    let o = out.data_mut();
    for bi in 0..b {
        for ch in 0..c {
            for v in &mut o[(bi * c + ch) * sp..(bi * c + ch + 1) * sp] {
                *v = scale[ch] * *v + shift[ch];
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_x, grad_gamma, grad_beta)` for a train-mode forward.
pub fn batchnorm_backward(grad_out: &Tensor, cache: &BnCache, gamma: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let c = gamma.numel();
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(Error::Contract(format!(
            "batchnorm backward: grad {:?} vs forward {:?}",
            grad_out.shape(),
            cache.x_hat.shape()
        )));
    }
    let (b, sp) = layout(grad_out, c)?;
    let n = (b * sp) as f64;
    let (gy, xh) = (grad_out.data(), cache.x_hat.data());
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            for i in (bi * c + ch) * sp..(bi * c + ch + 1) * sp {
                gb[ch] += gy[i];
                gg[ch] += gy[i] * xh[i];
            }
        }
    }
    let mut gx = Tensor::zeros(grad_out.shape());
    let g = gx.data_mut();
    for bi in 0..b {
        for ch in 0..c {
            let k = gamma.data()[ch] * cache.inv_std[ch] / n;
            for i in (bi * c + ch) * sp..(bi * c + ch + 1) * sp {
                g[i] = k * (n * gy[i] - gb[ch] - xh[i] * gg[ch]);
            }
        }
    }
    Ok((gx, Tensor::from_vec(&[c], gg)?, Tensor::from_vec(&[c], gb)?))
}

/// Returns `(grad_x, grad_gamma, grad_beta)` for an eval-mode forward.
pub fn batchnorm_eval_backward(
    grad_out: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    rm: &Tensor,
    rv: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c = gamma.numel();
    let (b, sp) = layout(x, c)?;
    let mut gx = Tensor::zeros(x.shape());
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    let (gy, xs) = (grad_out.data(), x.data());
    for ch in 0..c {
        let inv = 1.0 / (rv.data()[ch] + eps).sqrt();
        for bi in 0..b {
            for i in (bi * c + ch) * sp..(bi * c + ch + 1) * sp {
                gx.data_mut()[i] = gy[i] * gamma.data()[ch] * inv;
                gg[ch] += gy[i] * (xs[i] - rm.data()[ch]) * inv;
                gb[ch] += gy[i];
            }
        }
    }
    Ok((gx, Tensor::from_vec(&[c], gg)?, Tensor::from_vec(&[c], gb)?))
}

/// Exponential moving update of running statistics; the variance fed in is
/// the biased batch variance and is converted to the unbiased estimate.
pub fn update_running(rm: &mut Tensor, rv: &mut Tensor, mean: &[f64], var: &[f64], count: usize, momentum: f64) {
    let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
    for ch in 0..rm.numel() {
        let m = &mut rm.data_mut()[ch];
        *m = (1.0 - momentum) * *m + momentum * mean[ch];
        let v = &mut rv.data_mut()[ch];
        *v = (1.0 - momentum) * *v + momentum * var[ch] * unbias;
    }
}

/// Values per channel that one batch contributes to the statistics.
pub fn count_per_channel(x: &Tensor) -> usize {
    x.shape()[0] * x.shape()[2..].iter().product::<usize>()
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let (y, cache) = batchnorm_train(x, &self.gamma, &self.beta, self.eps)?;
                update_running(
                    &mut self.running_mean,
                    &mut self.running_var,
                    &cache.mean,
                    &cache.var,
                    count_per_channel(x),
                    self.momentum,
                );
                Ok(y)
            }
            Mode::Eval => batchnorm_eval(x, &self.gamma, &self.beta, &self.running_mean, &self.running_var, self.eps),
        }
    }
}

/// Batch norm whose scale and shift live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BnSlot {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BnSlot {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0), ParamKind::Norm),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamKind::Norm),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.numel()
    }

    /// Untaped forward. Train mode normalises with batch statistics but
    /// leaves the running estimates untouched.
    pub fn forward(&self, x: &Tensor, store: &ParamStore, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => Ok(batchnorm_train(x, store.get(self.gamma), store.get(self.beta), self.eps)?.0),
            Mode::Eval => batchnorm_eval(
                x,
                store.get(self.gamma),
                store.get(self.beta),
                &self.running_mean,
                &self.running_var,
                self.eps,
            ),
        }
    }

    /// Taped forward; train mode also updates the running estimates.
    pub fn forward_tape(&mut self, tape: &mut Tape, store: &ParamStore, x: NodeId, mode: Mode) -> Result<NodeId> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let count = count_per_channel(tape.value(x));
                let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, self.eps)?;
                update_running(&mut self.running_mean, &mut self.running_var, &mean, &var, count, self.momentum);
                Ok(y)
            }
            Mode::Eval => tape.batchnorm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.eps),
        }
    }
}
