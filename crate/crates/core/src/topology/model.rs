//! Residual CNN assembled from a [`ModelConfig`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{BatchExpandedDynConv, KernelPoolConv};
use crate::error::{shape_err, Error, Result};
use crate::kerneldna::{Adapter, ChildConvLayer};
use crate::memtrack::LayerScope;
use crate::nn::conv::{conv2d, ConvGeom};
use crate::nn::norm::BnSlot;
use crate::nn::{ops, Mode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::topology::config::{ConvKind, ModelConfig, Stem, Variant};
use crate::topology::layout::SlotTag;

pub const KERNEL: usize = 3;

/// How one 3×3 convolution of a stage gets its kernel.
#[derive(Clone, Debug)]
pub enum SlotKind {
    Full {
        weight: ParamId,
    },
    Child(ChildConvLayer),
    /// Parent kernel used verbatim on `input_scale · x`.
    Copy {
        parent: ParamId,
        input_scale: f64,
    },
    Pool(KernelPoolConv),
    Dynamic(BatchExpandedDynConv),
}

#[derive(Clone, Debug)]
pub struct ConvSlot {
    /// `stage<s>.slot<i>`, 1-based.
    pub label: String,
    pub tag: SlotTag,
    pub kind: SlotKind,
    pub geom: ConvGeom,
    pub c_in: usize,
    pub c_out: usize,
    /// Index within the stage of the slot whose kernel this one borrows.
    pub parent_slot: Option<usize>,
    pub bn: BnSlot,
}

impl ConvSlot {
    pub fn child(&self) -> Option<&ChildConvLayer> {
        match &self.kind {
            SlotKind::Child(c) => Some(c),
            _ => None,
        }
    }

    pub fn kernel_param(&self) -> Option<ParamId> {
        match &self.kind {
            SlotKind::Full { weight } => Some(*weight),
            SlotKind::Child(c) => Some(c.parent),
            SlotKind::Copy { parent, .. } => Some(*parent),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Downsample {
    pub weight: ParamId,
    pub geom: ConvGeom,
    pub bn: BnSlot,
}

#[derive(Clone, Debug)]
pub struct Block {
    /// Slot indices `start..end` within the stage.
    pub start: usize,
    pub end: usize,
    pub downsample: Option<Downsample>,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub slots: Vec<ConvSlot>,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct StemLayer {
    pub weight: ParamId,
    pub geom: ConvGeom,
    pub bn: BnSlot,
    pub max_pool: bool,
}

/// A parent kernel and the slots that read it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParentInfo {
    pub stage: usize,
    pub slot: usize,
    pub label: String,
    pub param_name: String,
    pub children: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stem: StemLayer,
    pub stages: Vec<Stage>,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
    mode: Mode,
}

fn he_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Independent generator per named tensor, so variants that share a
/// parameter name also share its initial value.
fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

fn conv_param(store: &mut ParamStore, name: String, shape: &[usize], seed: u64) -> ParamId {
    let value = he_normal(shape, &mut stream(seed, &name));
    store.add(name, value, ParamKind::ConvWeight)
}

impl Model {
    /// Builds and initialises a model; the same config and seed always give
    /// the same parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layouts = config.effective_layouts()?;
        let mut store = ParamStore::new();

        let stem = match config.stem {
            Stem::Imagenet => StemLayer {
                weight: conv_param(
                    &mut store,
                    "stem.conv.weight".into(),
                    &[config.stem_channels, config.in_channels, 7, 7],
                    seed,
                ),
                geom: ConvGeom::new(2, 3),
                bn: BnSlot::new(&mut store, "stem.bn", config.stem_channels),
                max_pool: true,
            },
            Stem::Cifar => StemLayer {
                weight: conv_param(
                    &mut store,
                    "stem.conv.weight".into(),
                    &[config.stem_channels, config.in_channels, 3, 3],
                    seed,
                ),
                geom: ConvGeom::new(1, 1),
                bn: BnSlot::new(&mut store, "stem.bn", config.stem_channels),
                max_pool: false,
            },
        };

        let mut stages = Vec::with_capacity(config.stages.len());
        let mut c_prev = config.stem_channels;
        for (si, (sc, layout)) in config.stages.iter().zip(&layouts).enumerate() {
            let prefix = format!("stage{}", si + 1);
            let tags = layout.slots();
            let binding = layout.bind_children();
            if config.conv != ConvKind::Standard && tags.contains(&SlotTag::Shared) {
                return Err(Error::Config(format!("{prefix}: baseline conv kinds need a layout without S")));
            }
            let io = |j: usize| if j == 0 { (c_prev, sc.channels) } else { (sc.channels, sc.channels) };
            let geom = |j: usize| ConvGeom::new(if j == 0 { sc.stride } else { 1 }, KERNEL / 2);

            // Parents first so that children can precede them in the layout.
            let mut kinds: Vec<Option<SlotKind>> = vec![None; tags.len()];
            for (j, tag) in tags.iter().enumerate() {
                if *tag != SlotTag::Full {
                    continue;
                }
                let (ci, co) = io(j);
                let name = format!("{prefix}.slot{}", j + 1);
                kinds[j] = Some(match config.conv {
                    ConvKind::Standard => SlotKind::Full {
                        weight: conv_param(&mut store, format!("{name}.weight"), &[co, ci, KERNEL, KERNEL], seed),
                    },
                    ConvKind::Pool(n) => SlotKind::Pool(KernelPoolConv::new(
                        n,
                        &[co, ci, KERNEL, KERNEL],
                        geom(j),
                        &mut stream(seed, &name),
                    )?),
                    ConvKind::Dynamic(n) => SlotKind::Dynamic(BatchExpandedDynConv::new(
                        n,
                        &[co, ci, KERNEL, KERNEL],
                        geom(j),
                        &mut stream(seed, &name),
                    )?),
                });
            }
            for (j, parent) in binding.iter().enumerate() {
                let Some(p) = *parent else { continue };
                let label = format!("{prefix}.slot{}", j + 1);
                if j == 0 && sc.stride != 1 {
                    return Err(Error::Config(format!("{label}: a strided convolution cannot be a child")));
                }
                if io(j) != io(p) {
                    return Err(Error::Config(format!(
                        "{label}: child needs a {:?} kernel but its parent {prefix}.slot{} is {:?}",
                        io(j),
                        p + 1,
                        io(p)
                    )));
                }
                let Some(SlotKind::Full { weight: parent }) = kinds[p] else { unreachable!("bound to a full slot") };
                let (ci, co) = io(j);
                kinds[j] = Some(match config.variant {
                    Variant::Copy => SlotKind::Copy { parent, input_scale: 1.0 },
                    _ => {
                        let adapter = Adapter::new(
                            &mut store,
                            &format!("{label}.adapter"),
                            &[co, ci, KERNEL, KERNEL],
                            config.reduction,
                            config.attentions,
                            &mut stream(seed, &label),
                        );
                        SlotKind::Child(ChildConvLayer::new(parent, adapter, geom(j)))
                    }
                });
            }
            let slots: Vec<ConvSlot> = kinds
                .into_iter()
                .enumerate()
                .map(|(j, kind)| {
                    let label = format!("{prefix}.slot{}", j + 1);
                    ConvSlot {
                        bn: BnSlot::new(&mut store, &format!("{label}.bn"), sc.channels),
                        label,
                        tag: tags[j],
                        kind: kind.expect("every slot resolved"),
                        geom: geom(j),
                        c_in: io(j).0,
                        c_out: io(j).1,
                        parent_slot: binding[j],
                    }
                })
                .collect();

            let mut blocks = Vec::with_capacity(layout.blocks.len());
            let mut start = 0;
            for (bi, b) in layout.blocks.iter().enumerate() {
                let downsample = (bi == 0 && (sc.stride != 1 || c_prev != sc.channels)).then(|| {
                    let name = format!("{prefix}.block1.down");
                    Downsample {
                        weight: conv_param(&mut store, format!("{name}.weight"), &[sc.channels, c_prev, 1, 1], seed),
                        geom: ConvGeom::new(sc.stride, 0),
                        bn: BnSlot::new(&mut store, &format!("{name}.bn"), sc.channels),
                    }
                });
                blocks.push(Block { start, end: start + b.len(), downsample });
                start += b.len();
            }
            stages.push(Stage { slots, blocks });
            c_prev = sc.channels;
        }

        let fc_weight = store.add(
            "fc.weight",
            Tensor::randn(&[config.num_classes, c_prev], (1.0 / c_prev as f64).sqrt(), &mut stream(seed, "fc.weight")),
            ParamKind::LinearWeight,
        );
        let fc_bias = store.add("fc.bias", Tensor::zeros(&[config.num_classes]), ParamKind::Bias);
        Ok(Self { config: config.clone(), store, stem, stages, fc_weight, fc_bias, mode: Mode::Eval })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Switching to train mode drops every fused kernel cache.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        if mode == Mode::Train {
            self.for_each_child(ChildConvLayer::unfuse);
        }
    }

    /// Folds the static attentions of every child into cached kernels.
    pub fn fuse(&mut self) -> Result<()> {
        let (store, mode) = (&self.store, self.mode);
        for stage in &mut self.stages {
            for slot in &mut stage.slots {
                if let SlotKind::Child(c) = &mut slot.kind {
                    c.fuse_static(store, mode)?;
                }
            }
        }
        Ok(())
    }

    pub fn unfuse(&mut self) {
        self.for_each_child(ChildConvLayer::unfuse);
    }

    pub fn is_fused(&self) -> bool {
        let mut any = false;
        for c in self.children() {
            if c.fused_weight.is_none() {
                return false;
            }
            any = true;
        }
        any
    }

    pub fn set_dynamic(&mut self, on: bool) {
        self.for_each_child(|c| if on { c.enable_dynamic() } else { c.disable_dynamic() });
    }

    fn for_each_child(&mut self, mut f: impl FnMut(&mut ChildConvLayer)) {
        for stage in &mut self.stages {
            for slot in &mut stage.slots {
                if let SlotKind::Child(c) = &mut slot.kind {
                    f(c);
                }
            }
        }
    }

    pub fn children(&self) -> impl Iterator<Item = &ChildConvLayer> {
        self.slots().filter_map(ConvSlot::child)
    }

    pub fn slots(&self) -> impl Iterator<Item = &ConvSlot> {
        self.stages.iter().flat_map(|s| s.slots.iter())
    }

    /// Parent kernels that have at least one borrower, in layout order.
    pub fn parents(&self) -> Vec<ParentInfo> {
        let mut out = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            for (j, slot) in stage.slots.iter().enumerate() {
                let children: Vec<String> =
                    stage.slots.iter().filter(|s| s.parent_slot == Some(j)).map(|s| s.label.clone()).collect();
                if children.is_empty() {
                    continue;
                }
                let weight = slot.kernel_param().expect("parents are full convolutions");
                out.push(ParentInfo {
                    stage: si + 1,
                    slot: j + 1,
                    label: slot.label.clone(),
                    param_name: self.store.name(weight).to_string(),
                    children,
                });
            }
        }
        out
    }

    /// Every batch-norm layer, including those inside adapters.
    pub fn bn_slots(&self) -> Vec<&BnSlot> {
        let mut out = vec![&self.stem.bn];
        for stage in &self.stages {
            for slot in &stage.slots {
                out.push(&slot.bn);
                if let Some(ca) = slot.child().and_then(|c| c.adapter.channel.as_ref()) {
                    out.push(&ca.bn);
                }
            }
            out.extend(stage.blocks.iter().filter_map(|b| b.downsample.as_ref().map(|d| &d.bn)));
        }
        out
    }

    pub fn bn_slots_mut(&mut self) -> Vec<&mut BnSlot> {
        let mut out = vec![&mut self.stem.bn];
        for stage in &mut self.stages {
            for slot in &mut stage.slots {
                out.push(&mut slot.bn);
                if let SlotKind::Child(c) = &mut slot.kind {
                    if let Some(ca) = c.adapter.channel.as_mut() {
                        out.push(&mut ca.bn);
                    }
                }
            }
            out.extend(stage.blocks.iter_mut().filter_map(|b| b.downsample.as_mut().map(|d| &mut d.bn)));
        }
        out
    }

    /// Total parameter count; shared kernels are stored, hence counted, once.
    pub fn num_params(&self) -> usize {
        self.store.numel() + self.baseline_params()
    }

    fn baseline_params(&self) -> usize {
        self.slots()
            .map(|s| match &s.kind {
                SlotKind::Pool(p) => p.num_params(),
                SlotKind::Dynamic(d) => d.num_params(),
                _ => 0,
            })
            .sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, c, _, _] if c == self.config.in_channels => Ok(()),
            _ => Err(shape_err!("model expects [b, {}, h, w] input, got {shape:?}", self.config.in_channels)),
        }
    }

    fn slot_conv(&self, slot: &ConvSlot, x: &Tensor) -> Result<Tensor> {
        match &slot.kind {
            SlotKind::Full { weight } => {
                let w = self.store.get(*weight);
                let _scope = LayerScope::enter(w.bytes());
                conv2d(x, w, None, slot.geom)
            }
            SlotKind::Child(c) => c.forward(x, &self.store, self.mode),
            SlotKind::Copy { parent, input_scale } => {
                let w = self.store.get(*parent);
                let _scope = LayerScope::enter(w.bytes());
                if *input_scale == 1.0 {
                    conv2d(x, w, None, slot.geom)
                } else {
                    conv2d(&x.scale(*input_scale), w, None, slot.geom)
                }
            }
            SlotKind::Pool(p) => p.forward(x),
            SlotKind::Dynamic(d) => d.forward(x),
        }
    }

    /// Logits for a batch, without recording gradients.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, &mut |_, _| {})
    }

    /// Logits plus the post-activation output of every stage slot. The last
    /// slot of a block is observed after the residual addition and ReLU.
    pub fn forward_probed(&self, x: &Tensor) -> Result<(Tensor, Vec<(String, Tensor)>)> {
        let mut probes = Vec::new();
        let logits = self.run(x, &mut |label, t| probes.push((label.to_string(), t.clone())))?;
        Ok((logits, probes))
    }

    /// Splits the batch across the threads of `pool`. Batch norm uses
    /// running statistics in eval mode, so the result equals [`Model::forward`].
    pub fn forward_parallel(&self, x: &Tensor, pool: &rayon::ThreadPool) -> Result<Tensor> {
        use rayon::prelude::*;
        let b = x.shape()[0];
        let parts = pool.current_num_threads().min(b).max(1);
        if parts == 1 || self.mode == Mode::Train {
            return self.forward(x);
        }
        let chunk = b.div_ceil(parts);
        let ranges: Vec<(usize, usize)> = (0..b).step_by(chunk).map(|s| (s, (s + chunk).min(b))).collect();
        let outs: Result<Vec<Tensor>> =
            pool.install(|| ranges.par_iter().map(|&(s, e)| self.forward(&x.slice0(s, e)?)).collect());
        Tensor::concat0(&outs?)
    }

    fn run(&self, x: &Tensor, probe: &mut dyn FnMut(&str, &Tensor)) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let (store, mode) = (&self.store, self.mode);
        let stem_w = store.get(self.stem.weight);
        let mut h = {
            let _scope = LayerScope::enter(stem_w.bytes());
            conv2d(x, stem_w, None, self.stem.geom)?
        };
        h = ops::relu(&self.stem.bn.forward(&h, store, mode)?);
        if self.stem.max_pool {
            h = ops::max_pool2d(&h, 3, 2, 1)?.0;
        }
        for stage in &self.stages {
            for block in &stage.blocks {
                let shortcut = match &block.downsample {
                    Some(d) => {
                        let w = store.get(d.weight);
                        let _scope = LayerScope::enter(w.bytes());
                        d.bn.forward(&conv2d(&h, w, None, d.geom)?, store, mode)?
                    }
                    None => h.clone(),
                };
                for j in block.start..block.end {
                    let slot = &stage.slots[j];
                    let y = slot.bn.forward(&self.slot_conv(slot, &h)?, store, mode)?;
                    h = if j + 1 == block.end { ops::relu(&y.add(&shortcut)?) } else { ops::relu(&y) };
                    probe(&slot.label, &h);
                }
            }
        }
        let b = h.shape()[0];
        let c = h.shape()[1];
        let pooled = ops::global_avg_pool(&h)?.into_reshape(&[b, c])?;
        ops::linear(&pooled, store.get(self.fc_weight), Some(store.get(self.fc_bias)))
    }

    /// Records the forward pass on `tape` and returns the logits node. In
    /// train mode batch-norm running statistics are updated.
    pub fn forward_tape(&mut self, tape: &mut Tape, x: &Tensor) -> Result<NodeId> {
        self.check_input(x.shape())?;
        let Self { store, stem, stages, fc_weight, fc_bias, mode, .. } = self;
        let (store, mode) = (&*store, *mode);
        let xn = tape.leaf(x.clone());
        let w = tape.param(store, stem.weight);
        let mut h = tape.conv2d(xn, w, None, stem.geom)?;
        h = stem.bn.forward_tape(tape, store, h, mode)?;
        h = tape.relu(h);
        if stem.max_pool {
            h = tape.max_pool(h, 3, 2, 1)?;
        }
        for stage in stages.iter_mut() {
            let Stage { slots, blocks } = stage;
            for block in blocks.iter_mut() {
                let shortcut = match &mut block.downsample {
                    Some(d) => {
                        let w = tape.param(store, d.weight);
                        let y = tape.conv2d(h, w, None, d.geom)?;
                        d.bn.forward_tape(tape, store, y, mode)?
                    }
                    None => h,
                };
                for (j, slot) in slots.iter_mut().enumerate().take(block.end).skip(block.start) {
                    let y = match &mut slot.kind {
                        SlotKind::Full { weight } => {
                            let w = tape.param(store, *weight);
                            tape.conv2d(h, w, None, slot.geom)?
                        }
                        SlotKind::Child(c) => c.forward_tape(tape, store, h, mode)?,
                        SlotKind::Copy { parent, input_scale } => {
                            let w = tape.param(store, *parent);
                            let xin = if *input_scale == 1.0 { h } else { tape.scale(h, *input_scale) };
                            tape.conv2d(xin, w, None, slot.geom)?
                        }
                        SlotKind::Pool(_) | SlotKind::Dynamic(_) => {
                            return Err(Error::State("baseline layers are inference-only".into()))
                        }
                    };
                    let y = slot.bn.forward_tape(tape, store, y, mode)?;
                    h = if j + 1 == block.end {
                        let s = tape.add(y, shortcut)?;
                        tape.relu(s)
                    } else {
                        tape.relu(y)
                    };
                }
            }
        }
        let shape = tape.value(h).shape().to_vec();
        let pooled = tape.global_avg_pool(h)?;
        let pooled = tape.reshape(pooled, &[shape[0], shape[1]])?;
        let w = tape.param(store, *fc_weight);
        let b = tape.param(store, *fc_bias);
        tape.linear(pooled, w, Some(b))
    }

    /// A copy of this model in which every child layer is replaced by its
    /// bare parent kernel applied to `input_scale · x`. With freshly
    /// initialised adapters and `input_scale = 0.5` both models compute the
    /// same function.
    pub fn with_children_as_copies(&self, input_scale: f64) -> Self {
        let mut m = self.clone();
        for stage in &mut m.stages {
            for slot in &mut stage.slots {
                if let SlotKind::Child(c) = &slot.kind {
                    slot.kind = SlotKind::Copy { parent: c.parent, input_scale };
                }
            }
        }
        m
    }
}

/// The configured layout with children reusing parent kernels verbatim.
pub fn variant_copy(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::build(&config.clone().with_variant(Variant::Copy), seed)
}

/// The configured layout with every child replaced by its own full kernel.
pub fn variant_expand(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::build(&config.clone().with_variant(Variant::Expand), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_rel_diff;

    fn input(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[b, cfg.in_channels, cfg.input_size, cfg.input_size], 1.0, &mut rng)
    }

    #[test]
    fn tiny_presets_build_and_run() {
        for name in ["tiny-orig", "tiny-kdna", "tiny-copy", "tiny-expand", "toy-kdna"] {
            let cfg = ModelConfig::preset(name).unwrap();
            let m = Model::build(&cfg, 0).unwrap();
            let y = m.forward(&input(&cfg, 2, 1)).unwrap();
            assert_eq!(y.shape(), &[2, cfg.num_classes], "{name}");
            assert!(y.is_finite());
        }
    }

    #[test]
    fn parents_and_children_follow_binding() {
        let m = Model::build(&ModelConfig::preset("tiny-kdna").unwrap(), 0).unwrap();
        let parents = m.parents();
        assert_eq!(parents.len(), 6);
        assert_eq!(parents[0].label, "stage1.slot4");
        assert_eq!(parents[0].children, vec!["stage1.slot2", "stage1.slot3"]);
        assert_eq!(parents[1].children, vec!["stage1.slot5"]);
        assert_eq!(m.children().count(), 9);
    }

    #[test]
    fn strided_or_mismatched_children_rejected() {
        let mut cfg = ModelConfig::preset("tiny-kdna").unwrap();
        cfg.stages[1].layout = "SF-FF".into();
        assert!(matches!(Model::build(&cfg, 0), Err(Error::Config(_))));
        cfg.stages[1].layout = "FS".into();
        assert!(matches!(Model::build(&cfg, 0), Err(Error::Config(_))));
        cfg.stages[1].stride = 1;
        cfg.stages[1].layout = "SF".into();
        assert!(matches!(Model::build(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn copy_equals_manual_double_application() {
        let mut cfg = ModelConfig::preset("tiny-copy").unwrap();
        cfg.stages = vec![cfg.stages[0].clone()];
        cfg.stages[0].layout = "FS".into();
        let m = Model::build(&cfg, 3).unwrap();
        let x = input(&cfg, 2, 4);
        let y = m.forward(&x).unwrap();
        // Manual oracle with the single kernel applied twice.
        let s = &m.store;
        let w = s.get(m.stages[0].slots[0].kernel_param().unwrap());
        let g = ConvGeom::new(1, 1);
        let h =
            ops::relu(&m.stem.bn.forward(&conv2d(&x, s.get(m.stem.weight), None, g).unwrap(), s, Mode::Eval).unwrap());
        let a = ops::relu(&m.stages[0].slots[0].bn.forward(&conv2d(&h, w, None, g).unwrap(), s, Mode::Eval).unwrap());
        let b = m.stages[0].slots[1].bn.forward(&conv2d(&a, w, None, g).unwrap(), s, Mode::Eval).unwrap();
        let out = ops::relu(&b.add(&h).unwrap());
        let pooled = ops::global_avg_pool(&out).unwrap().into_reshape(&[2, 16]).unwrap();
        let logits = ops::linear(&pooled, s.get(m.fc_weight), Some(s.get(m.fc_bias))).unwrap();
        assert!(max_rel_diff(&y, &logits) <= 1e-12);
    }

    #[test]
    fn expand_has_no_shared_kernels() {
        let cfg = ModelConfig::preset("tiny-kdna").unwrap();
        let m = variant_expand(&cfg, 0).unwrap();
        assert!(m.parents().is_empty());
        let ids: Vec<_> = m.slots().filter_map(ConvSlot::kernel_param).collect();
        let mut dedup = ids.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(ids.len(), dedup.len());
    }

    #[test]
    fn fresh_children_match_half_scaled_copies() {
        let cfg = ModelConfig::preset("tiny-kdna").unwrap();
        let m = Model::build(&cfg, 5).unwrap();
        let plain = m.with_children_as_copies(0.5);
        let x = input(&cfg, 3, 6);
        assert!(max_rel_diff(&m.forward(&x).unwrap(), &plain.forward(&x).unwrap()) <= 1e-12);
    }

    #[test]
    fn taped_forward_matches_untaped_in_eval() {
        let cfg = ModelConfig::preset("toy-kdna").unwrap();
        let mut m = Model::build(&cfg, 7).unwrap();
        let x = input(&cfg, 3, 8);
        let direct = m.forward(&x).unwrap();
        let mut tape = Tape::new();
        let y = m.forward_tape(&mut tape, &x).unwrap();
        assert!(max_rel_diff(tape.value(y), &direct) <= 1e-12);
    }

    #[test]
    fn fusion_and_mode_switching() {
        let cfg = ModelConfig::preset("toy-kdna").unwrap();
        let mut m = Model::build(&cfg, 9).unwrap();
        m.fuse().unwrap();
        assert!(m.is_fused());
        m.set_mode(Mode::Train);
        assert!(!m.is_fused());
        assert!(matches!(m.fuse(), Err(Error::State(_))));
    }

    #[test]
    fn parallel_forward_matches_serial() {
        let cfg = ModelConfig::preset("toy-kdna").unwrap();
        let m = Model::build(&cfg, 10).unwrap();
        let x = input(&cfg, 5, 11);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        assert_eq!(m.forward_parallel(&x, &pool).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn baseline_conv_models_run_but_do_not_train() {
        for name in ["tiny-pool", "tiny-dynamic"] {
            let cfg = ModelConfig::preset(name).unwrap();
            let mut m = Model::build(&cfg, 0).unwrap();
            assert_eq!(m.forward(&input(&cfg, 2, 0)).unwrap().shape(), &[2, 10]);
            let mut tape = Tape::new();
            assert!(matches!(m.forward_tape(&mut tape, &input(&cfg, 2, 0)), Err(Error::State(_))));
        }
    }
}
