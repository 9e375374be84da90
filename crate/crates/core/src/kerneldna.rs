//! Parent kernels, adapters and child convolution layers.
//!
//! A child layer owns no kernel. Its effective kernel is the parent's,
//! modulated per output filter by `(1 + α_f)` and per kernel position by
//! `(1 + α_s)`; both are static tensors that can be folded into a cached
//! kernel for inference. On top of that, a squeeze-style channel attention
//! `β = σ(FC2(ReLU(BN(FC1(AvgPool(x))))))` rescales the input channels.
//! Scaling input channels is the same as scaling the kernel's input-channel
//! slices, so the kernel is never expanded per sample.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};
use crate::memtrack::{KernelAlloc, LayerScope};
use crate::nn::conv::{conv2d, ConvGeom};
use crate::nn::norm::BnSlot;
use crate::nn::{ops, Mode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::{broadcast_shape, Tensor};

pub const DEFAULT_REDUCTION: usize = 4;

/// Width of the channel-attention bottleneck.
pub fn reduced_width(c_in: usize, reduction: usize) -> usize {
    (c_in / reduction.max(1)).max(1)
}

/// Which of the three attentions an adapter carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSet {
    pub channel: bool,
    pub spatial: bool,
    pub filter: bool,
}

impl AttentionSet {
    pub const ALL: Self = Self { channel: true, spatial: true, filter: true };
    pub const NONE: Self = Self { channel: false, spatial: false, filter: false };

    /// Parses a comma list such as `channel,spatial` (`all` and `none` are
    /// accepted too).
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        match s {
            "all" => return Some(Self::ALL),
            "none" | "" => return Some(Self::NONE),
            _ => {}
        }
        let mut set = Self::NONE;
        for part in s.split(',') {
            match part.trim() {
                "channel" => set.channel = true,
                "spatial" => set.spatial = true,
                "filter" => set.filter = true,
                _ => return None,
            }
        }
        Some(set)
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.channel, "channel"), (self.spatial, "spatial"), (self.filter, "filter")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(",")
        }
    }
}

/// The dynamic part of an adapter.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    /// `[c_in / r, c_in]`, bias-free.
    pub fc1: ParamId,
    pub bn: BnSlot,
    /// `[c_in, c_in / r]`, bias-free, zero at init so β starts at 0.5.
    pub fc2: ParamId,
    pub channels: usize,
    pub reduced: usize,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Self {
        let reduced = reduced_width(channels, reduction);
        let std = (2.0 / channels as f64).sqrt();
        let fc1_init: Vec<f64> = (0..reduced * channels).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        let fc1 = store.add(
            format!("{prefix}.fc1"),
            Tensor::from_vec(&[reduced, channels], fc1_init).expect("valid shape"),
            ParamKind::AttentionMlp,
        );
        let bn = BnSlot::new(store, &format!("{prefix}.bn"), reduced);
        let fc2 = store.add(format!("{prefix}.fc2"), Tensor::zeros(&[channels, reduced]), ParamKind::AttentionMlp);
        Self { fc1, bn, fc2, channels, reduced }
    }

    /// `β ∈ (0,1)^{b×c}` shaped `[b, c, 1, 1]`.
    pub fn forward(&self, x: &Tensor, store: &ParamStore, mode: Mode) -> Result<Tensor> {
        let (b, c) = self.check(x.shape())?;
        let pooled = ops::global_avg_pool(x)?.into_reshape(&[b, c])?;
        let h = ops::linear(&pooled, store.get(self.fc1), None)?;
        let h = ops::relu(&self.bn.forward(&h, store, mode)?);
        let z = ops::linear(&h, store.get(self.fc2), None)?;
        ops::sigmoid(&z).into_reshape(&[b, c, 1, 1])
    }

    pub fn forward_tape(&mut self, tape: &mut Tape, store: &ParamStore, x: NodeId, mode: Mode) -> Result<NodeId> {
        let (b, c) = self.check(tape.value(x).shape())?;
        let pooled = tape.global_avg_pool(x)?;
        let pooled = tape.reshape(pooled, &[b, c])?;
        let fc1 = tape.param(store, self.fc1);
        let h = tape.linear(pooled, fc1, None)?;
        let h = self.bn.forward_tape(tape, store, h, mode)?;
        let h = tape.relu(h);
        let fc2 = tape.param(store, self.fc2);
        let z = tape.linear(h, fc2, None)?;
        let beta = tape.sigmoid(z);
        tape.reshape(beta, &[b, c, 1, 1])
    }

    fn check(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match *shape {
            [b, c, _, _] if c == self.channels => Ok((b, c)),
            _ => Err(shape_err!("channel attention over {} channels cannot take input {shape:?}", self.channels)),
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels * self.reduced + 2 * self.reduced
    }

    /// Multiply-accumulates of the two FC layers for one sample.
    pub fn macs(&self) -> usize {
        2 * self.channels * self.reduced
    }
}

/// Per-child specialisation of a parent kernel.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub channel: Option<ChannelAttention>,
    /// `α_f`, `[c_out, 1, 1, 1]`.
    pub filter_attn: Option<ParamId>,
    /// `α_s`, `[1, 1, k, k]`.
    pub spatial_attn: Option<ParamId>,
    pub reduction: usize,
}

impl Adapter {
    /// Registers the adapter's parameters under `prefix`. The static
    /// attentions and FC2 start at zero so the child begins as its parent
    /// with a constant channel gate of 0.5.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kernel_shape: &[usize],
        reduction: usize,
        attentions: AttentionSet,
        rng: &mut R,
    ) -> Self {
        let (c_out, c_in, k) = (kernel_shape[0], kernel_shape[1], kernel_shape[2]);
        let channel = attentions
            .channel
            .then(|| ChannelAttention::new(store, &format!("{prefix}.channel"), c_in, reduction, rng));
        let filter_attn = attentions.filter.then(|| {
            store.add(format!("{prefix}.filter_attn"), Tensor::zeros(&[c_out, 1, 1, 1]), ParamKind::StaticAttention)
        });
        let spatial_attn = attentions.spatial.then(|| {
            store.add(format!("{prefix}.spatial_attn"), Tensor::zeros(&[1, 1, k, k]), ParamKind::StaticAttention)
        });
        Self { channel, filter_attn, spatial_attn, reduction }
    }

    pub fn attentions(&self) -> AttentionSet {
        AttentionSet {
            channel: self.channel.is_some(),
            spatial: self.spatial_attn.is_some(),
            filter: self.filter_attn.is_some(),
        }
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.channel.as_ref().map_or(0, ChannelAttention::num_params)
            + self.filter_attn.map_or(0, |p| store.get(p).numel())
            + self.spatial_attn.map_or(0, |p| store.get(p).numel())
    }
}

/// `weight ⊙ (1 + α_f) ⊙ (1 + α_s)` with trailing-aligned broadcasting.
/// The output has the parent's shape; there is no batch dimension.
pub fn modulate(weight: &Tensor, filter: Option<&Tensor>, spatial: Option<&Tensor>) -> Result<Tensor> {
    if weight.rank() != 4 {
        return Err(shape_err!("parent kernel must be rank 4, got {:?}", weight.shape()));
    }
    for a in [filter, spatial].into_iter().flatten() {
        let out = broadcast_shape(weight.shape(), a.shape())?;
        if out != weight.shape() {
            return Err(shape_err!("attention {:?} would expand kernel {:?}", a.shape(), weight.shape()));
        }
    }
    let mut w = weight.clone();
    if let Some(f) = filter {
        w = w.mul(&f.add_scalar(1.0))?;
    }
    if let Some(s) = spatial {
        w = w.mul(&s.add_scalar(1.0))?;
    }
    Ok(w)
}

/// Shared full kernel owned by one stage.
#[derive(Clone, Debug)]
pub struct ParentKernel {
    /// Stage-local identifier, also the parameter name in checkpoints.
    pub id: String,
    pub param: ParamId,
    /// Slot labels of the children bound to this parent.
    pub children: Vec<String>,
}

/// A convolution layer that derives its kernel from a parent.
#[derive(Clone, Debug)]
pub struct ChildConvLayer {
    pub parent: ParamId,
    pub adapter: Adapter,
    pub geom: ConvGeom,
    /// Cached static modulation of the parent kernel, eval mode only.
    pub fused_weight: Option<Tensor>,
    /// When false the channel attention is skipped (β ≡ 1).
    pub dynamic: bool,
}

impl ChildConvLayer {
    pub fn new(parent: ParamId, adapter: Adapter, geom: ConvGeom) -> Self {
        Self { parent, adapter, geom, fused_weight: None, dynamic: true }
    }

    /// The parent kernel with the static attentions applied.
    pub fn modulated_kernel(&self, store: &ParamStore) -> Result<Tensor> {
        modulate(
            store.get(self.parent),
            self.adapter.filter_attn.map(|p| store.get(p)),
            self.adapter.spatial_attn.map(|p| store.get(p)),
        )
    }

    /// Caches the modulated kernel. Refused in train mode, where the static
    /// attentions are still being learned.
    pub fn fuse_static(&mut self, store: &ParamStore, mode: Mode) -> Result<()> {
        if mode == Mode::Train {
            return Err(crate::Error::State("fuse_static requires eval mode".into()));
        }
        if self.fused_weight.is_none() {
            self.fused_weight = Some(self.modulated_kernel(store)?);
        }
        Ok(())
    }

    pub fn unfuse(&mut self) {
        self.fused_weight = None;
    }

    pub fn disable_dynamic(&mut self) {
        self.dynamic = false;
    }

    pub fn enable_dynamic(&mut self) {
        self.dynamic = true;
    }

    fn uses_channel_attention(&self) -> bool {
        self.dynamic && self.adapter.channel.is_some()
    }

    /// Channel gate for `x`, or `None` when dynamic attention is off.
    pub fn channel_attention(&self, x: &Tensor, store: &ParamStore, mode: Mode) -> Result<Option<Tensor>> {
        match (&self.adapter.channel, self.dynamic) {
            (Some(ca), true) => ca.forward(x, store, mode).map(Some),
            _ => Ok(None),
        }
    }

    /// Untaped forward: `conv(x ⊙ β, fused-or-modulated kernel)`.
    pub fn forward(&self, x: &Tensor, store: &ParamStore, mode: Mode) -> Result<Tensor> {
        let parent = store.get(self.parent);
        let _scope = LayerScope::enter(self.fused_weight.as_ref().unwrap_or(parent).bytes());
        let c_in = parent.shape()[1] * self.geom.groups;
        if x.rank() != 4 || x.shape()[1] != c_in {
            return Err(shape_err!("child layer expects {c_in} input channels, got {:?}", x.shape()));
        }
        let gated;
        let input = match self.channel_attention(x, store, mode)? {
            Some(beta) => {
                gated = x.mul(&beta)?;
                &gated
            }
            None => x,
        };
        match &self.fused_weight {
            Some(w) => conv2d(input, w, None, self.geom),
            None => {
                let _alloc = KernelAlloc::f64s(parent.numel());
                let w = self.modulated_kernel(store)?;
                conv2d(input, &w, None, self.geom)
            }
        }
    }

    /// Taped forward. The modulated kernel is rebuilt on the tape so
    /// gradients reach the parent, both static attentions and the MLP.
    pub fn forward_tape(&mut self, tape: &mut Tape, store: &ParamStore, x: NodeId, mode: Mode) -> Result<NodeId> {
        let mut w = tape.param(store, self.parent);
        if let Some(f) = self.adapter.filter_attn {
            let f = tape.param(store, f);
            let f1 = tape.add_scalar(f, 1.0);
            w = tape.mul(w, f1)?;
        }
        if let Some(s) = self.adapter.spatial_attn {
            let s = tape.param(store, s);
            let s1 = tape.add_scalar(s, 1.0);
            w = tape.mul(w, s1)?;
        }
        let input = if self.uses_channel_attention() {
            let ca = self.adapter.channel.as_mut().expect("checked above");
            let beta = ca.forward_tape(tape, store, x, mode)?;
            tape.mul(x, beta)?
        } else {
            x
        };
        tape.conv2d(input, w, None, self.geom)
    }
}
