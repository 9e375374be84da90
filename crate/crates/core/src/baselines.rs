//! Comparison layers that build a kernel per sample.
//!
//! [`KernelPoolConv`] blends a pool of `n` kernels with a softmax router and
//! convolves each sample with its own blend. [`BatchExpandedDynConv`]
//! materialises the full `[batch, n, c_out, c_in, k, k]` weight stack before
//! reducing it, which is the memory-heavy path the decoupled child layer
//! avoids. Both are inference-only.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::kerneldna::reduced_width;
use crate::memtrack::{KernelAlloc, LayerScope};
use crate::nn::conv::{conv2d_per_sample, ConvGeom};
use crate::nn::ops;
use crate::tensor::Tensor;

/// Two bias-free FC layers on the pooled input: `FC2(ReLU(FC1(avgpool x)))`.
#[derive(Clone, Debug)]
pub struct PooledMlp {
    pub fc1: Tensor,
    pub fc2: Tensor,
}

impl PooledMlp {
    pub fn new<R: Rng + ?Sized>(c_in: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            fc1: Tensor::randn(&[hidden, c_in], (2.0 / c_in as f64).sqrt(), rng),
            fc2: Tensor::randn(&[out, hidden], (1.0 / hidden as f64).sqrt(), rng),
        }
    }

    /// Raw scores `[b, out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let pooled = ops::global_avg_pool(x)?.into_reshape(&[b, c])?;
        let h = ops::relu(&ops::linear(&pooled, &self.fc1, None)?);
        ops::linear(&h, &self.fc2, None)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.numel() + self.fc2.numel()
    }

    pub fn macs(&self) -> usize {
        self.num_params()
    }
}

fn check_input(x: &Tensor, c_in: usize) -> Result<usize> {
    match *x.shape() {
        [b, c, _, _] if c == c_in => Ok(b),
        _ => Err(shape_err!("layer expects {c_in} input channels, got {:?}", x.shape())),
    }
}

/// `Σ_i π_i(x)·W_i` per sample, then a batch-grouped convolution.
#[derive(Clone, Debug)]
pub struct KernelPoolConv {
    /// `[n, c_out, c_in, k, k]`.
    pub kernels: Tensor,
    pub router: PooledMlp,
    pub geom: ConvGeom,
    /// Replaces the router output for every sample when set.
    pub forced_weights: Option<Vec<f64>>,
}

impl KernelPoolConv {
    pub fn new<R: Rng + ?Sized>(n: usize, kernel_shape: &[usize], geom: ConvGeom, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("kernel pool needs at least one kernel".into()));
        }
        let [co, ci, kh, kw] = *kernel_shape else {
            return Err(shape_err!("kernel shape must be rank 4, got {kernel_shape:?}"));
        };
        let std = (2.0 / (ci * kh * kw) as f64).sqrt();
        let kernels = Tensor::randn(&[n, co, ci, kh, kw], std, rng);
        let router = PooledMlp::new(ci, reduced_width(ci, 4), n, rng);
        Ok(Self { kernels, router, geom, forced_weights: None })
    }

    pub fn from_kernels(kernels: Tensor, router: PooledMlp, geom: ConvGeom) -> Result<Self> {
        if kernels.rank() != 5 {
            return Err(shape_err!("kernel pool must be rank 5, got {:?}", kernels.shape()));
        }
        if router.fc2.shape()[0] != kernels.shape()[0] {
            return Err(Error::Config("router width does not match pool size".into()));
        }
        Ok(Self { kernels, router, geom, forced_weights: None })
    }

    pub fn pool_size(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn kernel_shape(&self) -> &[usize] {
        &self.kernels.shape()[1..]
    }

    /// Mixing weights `[b, n]`; each row sums to one.
    pub fn routing(&self, x: &Tensor) -> Result<Tensor> {
        let b = check_input(x, self.kernel_shape()[1] * self.geom.groups)?;
        let n = self.pool_size();
        match &self.forced_weights {
            Some(pi) if pi.len() != n => Err(shape_err!("forced weights have {} entries for {n} kernels", pi.len())),
            Some(pi) => Tensor::from_vec(&[b, n], pi.iter().cycle().take(b * n).copied().collect()),
            None => ops::softmax(&self.router.forward(x)?),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pi = self.routing(x)?;
        self.forward_with(x, &pi)
    }

    /// Forward with explicit mixing weights `[b, n]`.
    pub fn forward_with(&self, x: &Tensor, pi: &Tensor) -> Result<Tensor> {
        let b = check_input(x, self.kernel_shape()[1] * self.geom.groups)?;
        let n = self.pool_size();
        if pi.shape() != [b, n] {
            return Err(shape_err!("mixing weights must be [{b}, {n}], got {:?}", pi.shape()));
        }
        let _scope = LayerScope::enter(self.kernels.bytes());
        let wn = self.kernels.numel() / n;
        let _alloc = KernelAlloc::f64s(b * wn);
        let mut agg = vec![0.0; b * wn];
        let kd = self.kernels.data();
        for (bi, dst) in agg.chunks_exact_mut(wn).enumerate() {
            for (i, src) in kd.chunks_exact(wn).enumerate() {
                let p = pi.data()[bi * n + i];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += p * s;
                }
            }
        }
        conv2d_per_sample(x, &agg, self.kernel_shape(), self.geom)
    }

    pub fn num_params(&self) -> usize {
        self.kernels.numel() + self.router.num_params()
    }
}

/// Attention values for one forward pass of [`BatchExpandedDynConv`].
#[derive(Clone, Debug)]
pub struct DynAttentions {
    /// `[b, n]`.
    pub kernel: Tensor,
    /// `[b, c_in]`.
    pub channel: Tensor,
    /// `[b, c_out]`.
    pub filter: Tensor,
    /// `[b, k·k]`.
    pub spatial: Tensor,
}

impl DynAttentions {
    /// Every attention equal to one.
    pub fn neutral(b: usize, n: usize, c_in: usize, c_out: usize, kk: usize) -> Self {
        Self {
            kernel: Tensor::full(&[b, n], 1.0),
            channel: Tensor::full(&[b, c_in], 1.0),
            filter: Tensor::full(&[b, c_out], 1.0),
            spatial: Tensor::full(&[b, kk], 1.0),
        }
    }
}

/// Purely dynamic convolution with a batch-expanded weight stack and four
/// squeeze-style attention heads sharing one hidden layer.
#[derive(Clone, Debug)]
pub struct BatchExpandedDynConv {
    /// `[n, c_out, c_in, k, k]`.
    pub weight: Tensor,
    /// `[hidden, c_in]`.
    pub shared: Tensor,
    pub kernel_head: Tensor,
    pub channel_head: Tensor,
    pub filter_head: Tensor,
    pub spatial_head: Tensor,
    pub geom: ConvGeom,
}

impl BatchExpandedDynConv {
    pub fn new<R: Rng + ?Sized>(n: usize, kernel_shape: &[usize], geom: ConvGeom, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("dynamic convolution needs at least one kernel".into()));
        }
        let [co, ci, kh, kw] = *kernel_shape else {
            return Err(shape_err!("kernel shape must be rank 4, got {kernel_shape:?}"));
        };
        let hidden = reduced_width(ci, 4);
        let hs = (1.0 / hidden as f64).sqrt();
        Ok(Self {
            weight: Tensor::randn(&[n, co, ci, kh, kw], (2.0 / (ci * kh * kw) as f64).sqrt(), rng),
            shared: Tensor::randn(&[hidden, ci], (2.0 / ci as f64).sqrt(), rng),
            kernel_head: Tensor::randn(&[n, hidden], hs, rng),
            channel_head: Tensor::randn(&[ci, hidden], hs, rng),
            filter_head: Tensor::randn(&[co, hidden], hs, rng),
            spatial_head: Tensor::randn(&[kh * kw, hidden], hs, rng),
            geom,
        })
    }

    pub fn pool_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel_shape(&self) -> &[usize] {
        &self.weight.shape()[1..]
    }

    pub fn attentions(&self, x: &Tensor) -> Result<DynAttentions> {
        let b = check_input(x, self.kernel_shape()[1] * self.geom.groups)?;
        let pooled = ops::global_avg_pool(x)?.into_reshape(&[b, x.shape()[1]])?;
        let h = ops::relu(&ops::linear(&pooled, &self.shared, None)?);
        Ok(DynAttentions {
            kernel: ops::softmax(&ops::linear(&h, &self.kernel_head, None)?)?,
            channel: ops::sigmoid(&ops::linear(&h, &self.channel_head, None)?),
            filter: ops::sigmoid(&ops::linear(&h, &self.filter_head, None)?),
            spatial: ops::sigmoid(&ops::linear(&h, &self.spatial_head, None)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let att = self.attentions(x)?;
        self.forward_with(x, &att)
    }

    /// Expand, weight, reduce over the pool, then convolve each sample and
    /// apply the filter attention to the output.
    pub fn forward_with(&self, x: &Tensor, att: &DynAttentions) -> Result<Tensor> {
        let b = check_input(x, self.kernel_shape()[1] * self.geom.groups)?;
        let n = self.pool_size();
        let [co, ci, kh, kw] = *self.kernel_shape() else { unreachable!() };
        let kk = kh * kw;
        let expect = [
            ("kernel", &att.kernel, n),
            ("channel", &att.channel, x.shape()[1]),
            ("filter", &att.filter, co),
            ("spatial", &att.spatial, kk),
        ];
        for (name, t, w) in expect {
            if t.shape() != [b, w] {
                return Err(shape_err!("{name} attention must be [{b}, {w}], got {:?}", t.shape()));
            }
        }
        let _scope = LayerScope::enter(self.weight.bytes());
        let wn = co * ci * kk;
        let _alloc = KernelAlloc::f64s(b * n * wn);
        let mut expanded = vec![0.0; b * n * wn];
        let wd = self.weight.data();
        for bi in 0..b {
            let sp = &att.spatial.data()[bi * kk..(bi + 1) * kk];
            for i in 0..n {
                let ka = att.kernel.data()[bi * n + i];
                let dst = &mut expanded[(bi * n + i) * wn..(bi * n + i + 1) * wn];
                for ((d, s), j) in dst.iter_mut().zip(&wd[i * wn..(i + 1) * wn]).zip((0..kk).cycle()) {
                    *d = s * ka * sp[j];
                }
            }
            // Reduce over the pool into the first slice of this sample.
            let (head, tail) = expanded[bi * n * wn..(bi + 1) * n * wn].split_at_mut(wn);
            for slice in tail.chunks_exact(wn) {
                for (d, s) in head.iter_mut().zip(slice) {
                    *d += s;
                }
            }
        }
        // Compact the reduced kernels to the front: [b, |W|].
        for bi in 1..b {
            expanded.copy_within(bi * n * wn..bi * n * wn + wn, bi * wn);
        }
        let gated = x.mul(&att.channel.reshape(&[b, x.shape()[1], 1, 1])?)?;
        let y = conv2d_per_sample(&gated, &expanded[..b * wn], self.kernel_shape(), self.geom)?;
        y.mul(&att.filter.reshape(&[b, co, 1, 1])?)
    }

    /// Peak transient kernel bytes for a batch of `b`.
    pub fn expanded_bytes(&self, b: usize) -> usize {
        b * self.weight.bytes()
    }

    pub fn num_params(&self) -> usize {
        [&self.weight, &self.shared, &self.kernel_head, &self.channel_head, &self.filter_head, &self.spatial_head]
            .iter()
            .map(|t| t.numel())
            .sum()
    }

    /// Multiply-accumulates of the attention heads for one sample.
    pub fn head_macs(&self) -> usize {
        self.num_params() - self.weight.numel()
    }
}
