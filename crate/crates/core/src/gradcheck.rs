//! Central-difference gradient checks for taped layers and whole models.
//!
//! Errors are norm-wise: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
//! per tensor, and 0 when both are exactly zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kerneldna::{Adapter, AttentionSet, ChildConvLayer};
use crate::nn::conv::ConvGeom;
use crate::nn::{ops, Mode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::topology::{Model, SlotKind};

pub const STEP: f64 = 1e-5;

pub fn rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic.data().iter().zip(numeric.data()).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .data()
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.data().iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// `∂f/∂x` by central differences with step `h`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = v - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = v;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Result of checking one tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub layer: String,
    pub tensor: String,
    pub shape: Vec<usize>,
    pub rel_error: f64,
}

/// Numeric gradients of every parameter in `ids`, perturbing `store` in
/// place and restoring it.
fn store_grads(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    loss: &mut dyn FnMut(&ParamStore) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let base = store.get(id).clone();
        let mut g = Tensor::zeros(base.shape());
        for i in 0..base.numel() {
            let v = base.data()[i];
            store.get_mut(id).data_mut()[i] = v + h;
            let up = loss(store)?;
            store.get_mut(id).data_mut()[i] = v - h;
            let down = loss(store)?;
            store.get_mut(id).data_mut()[i] = v;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Fixed random projection that turns any output into a scalar loss.
struct Projection(Tensor);

impl Projection {
    fn new(shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        Self(Tensor::randn(shape, 1.0, rng))
    }

    fn eval(&self, y: &Tensor) -> Result<f64> {
        Ok(y.mul(&self.0)?.sum())
    }

    fn tape(&self, tape: &mut Tape, y: NodeId) -> Result<NodeId> {
        let r = tape.leaf(self.0.clone());
        let p = tape.mul(y, r)?;
        Ok(tape.sum(p))
    }
}

type TapedFn<'a> = dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + 'a;
type PlainFn<'a> = dyn Fn(&[Tensor]) -> Result<Tensor> + 'a;

/// Checks every input of a pure op given its taped and plain forms.
fn check_op(
    layer: &str,
    names: &[&str],
    inputs: &[Tensor],
    taped: &TapedFn,
    plain: &PlainFn,
    rng: &mut ChaCha8Rng,
    h: f64,
) -> Result<Vec<GradCheck>> {
    let out_shape = plain(inputs)?.shape().to_vec();
    let proj = Projection::new(&out_shape, rng);
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = taped(&mut tape, &nodes)?;
    let loss = proj.tape(&mut tape, y)?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let analytic = grads.node(nodes[k]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let numeric = numeric_grad(&inputs[k], h, |v| {
            let mut args = inputs.to_vec();
            args[k] = v.clone();
            proj.eval(&plain(&args)?)
        })?;
        out.push(GradCheck {
            layer: layer.into(),
            tensor: (*name).into(),
            shape: inputs[k].shape().to_vec(),
            rel_error: rel_error(&analytic, &numeric),
        });
    }
    Ok(out)
}

/// Values bounded away from zero so ReLU and max-pool kinks are not hit
/// by a step of `h`.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

/// Distinct values so the max-pool argmax is stable under a step of `h`.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_vec(shape, vals).expect("shape matches")
}

/// One randomly sized instance of every taped layer type. Call with
/// different seeds to cover more shapes.
pub fn layer_suite(seed: u64, h: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let b = rng.gen_range(2..4);
    let ci = rng.gen_range(1..5);
    let co = rng.gen_range(1..5);
    let side = rng.gen_range(3..7);
    let k = [1, 3][rng.gen_range(0..2)];
    let stride = rng.gen_range(1..3);
    let pad = rng.gen_range(0..=k / 2);
    let geom = ConvGeom::new(stride, pad);

    let x = Tensor::randn(&[b, ci, side, side], 1.0, &mut rng);
    let w = Tensor::randn(&[co, ci, k, k], 1.0, &mut rng);
    let bias = Tensor::randn(&[co], 1.0, &mut rng);
    out.extend(check_op(
        &format!("conv2d k{k} s{stride} p{pad}"),
        &["input", "weight", "bias"],
        &[x.clone(), w, bias],
        &|t, n| t.conv2d(n[0], n[1], Some(n[2]), geom),
        &|a| crate::nn::conv::conv2d(&a[0], &a[1], Some(&a[2]), geom),
        &mut rng,
        h,
    )?);

    let feat = rng.gen_range(1..6);
    let outf = rng.gen_range(1..6);
    out.extend(check_op(
        "linear",
        &["input", "weight", "bias"],
        &[
            Tensor::randn(&[b, feat], 1.0, &mut rng),
            Tensor::randn(&[outf, feat], 1.0, &mut rng),
            Tensor::randn(&[outf], 1.0, &mut rng),
        ],
        &|t, n| t.linear(n[0], n[1], Some(n[2])),
        &|a| ops::linear(&a[0], &a[1], Some(&a[2])),
        &mut rng,
        h,
    )?);

    let gamma = Tensor::uniform(&[ci], 0.5, 1.5, &mut rng);
    let beta = Tensor::randn(&[ci], 1.0, &mut rng);
    out.extend(check_op(
        "batchnorm (batch statistics)",
        &["input", "gamma", "beta"],
        &[x.clone(), gamma.clone(), beta.clone()],
        &|t, n| Ok(t.batchnorm_train(n[0], n[1], n[2], 1e-5)?.0),
        &|a| Ok(crate::nn::norm::batchnorm_train(&a[0], &a[1], &a[2], 1e-5)?.0),
        &mut rng,
        h,
    )?);
    let rm = Tensor::randn(&[ci], 1.0, &mut rng);
    let rv = Tensor::uniform(&[ci], 0.5, 2.0, &mut rng);
    out.extend(check_op(
        "batchnorm (running statistics)",
        &["input", "gamma", "beta"],
        &[x.clone(), gamma, beta],
        &|t, n| t.batchnorm_eval(n[0], n[1], n[2], &rm, &rv, 1e-5),
        &|a| crate::nn::norm::batchnorm_eval(&a[0], &a[1], &a[2], &rm, &rv, 1e-5),
        &mut rng,
        h,
    )?);

    let xa = away_from_zero(&[b, ci, side, side], &mut rng);
    out.extend(check_op("relu", &["input"], &[xa], &|t, n| Ok(t.relu(n[0])), &|a| Ok(ops::relu(&a[0])), &mut rng, h)?);
    out.extend(check_op(
        "sigmoid",
        &["input"],
        std::slice::from_ref(&x),
        &|t, n| Ok(t.sigmoid(n[0])),
        &|a| Ok(ops::sigmoid(&a[0])),
        &mut rng,
        h,
    )?);
    out.extend(check_op(
        "global average pool",
        &["input"],
        std::slice::from_ref(&x),
        &|t, n| t.global_avg_pool(n[0]),
        &|a| ops::global_avg_pool(&a[0]),
        &mut rng,
        h,
    )?);
    out.extend(check_op(
        "max pool 3/2/1",
        &["input"],
        &[distinct(&[b, ci, side, side], &mut rng)],
        &|t, n| t.max_pool(n[0], 3, 2, 1),
        &|a| Ok(ops::max_pool2d(&a[0], 3, 2, 1)?.0),
        &mut rng,
        h,
    )?);
    out.extend(check_op(
        "broadcast multiply",
        &["input", "gate"],
        &[x.clone(), Tensor::randn(&[b, ci, 1, 1], 1.0, &mut rng)],
        &|t, n| t.mul(n[0], n[1]),
        &|a| a[0].mul(&a[1]),
        &mut rng,
        h,
    )?);
    out.extend(check_op(
        "broadcast add",
        &["input", "bias"],
        &[x.clone(), Tensor::randn(&[ci, 1, 1], 1.0, &mut rng)],
        &|t, n| t.add(n[0], n[1]),
        &|a| a[0].add(&a[1]),
        &mut rng,
        h,
    )?);
    let classes = rng.gen_range(2..5);
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();
    let logits = Tensor::randn(&[b, classes], 1.0, &mut rng);
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.softmax_cross_entropy(l, &labels)?;
    let analytic = tape.backward(loss)?.node(l).cloned().expect("logits on tape");
    let numeric = numeric_grad(&logits, h, |v| Ok(ops::softmax_cross_entropy(v, &labels)?.0))?;
    out.push(GradCheck {
        layer: "softmax cross-entropy".into(),
        tensor: "logits".into(),
        shape: logits.shape().to_vec(),
        rel_error: rel_error(&analytic, &numeric),
    });

    out.extend(child_layer_check(&mut rng, h)?);
    Ok(out)
}

/// Moves every parameter off its initial value, so that zero-initialised
/// adapter tensors and unit batch-norm scales do not hide gradient paths.
/// Randomly initialised weights keep their scale.
pub fn randomise(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = store.get(id).clone();
        let fresh = match store.param(id).kind {
            ParamKind::Norm if store.name(id).ends_with("gamma") => Tensor::uniform(t.shape(), 0.5, 1.5, rng),
            ParamKind::StaticAttention => Tensor::uniform(t.shape(), -0.5, 0.5, rng),
            _ if t.max_abs() == 0.0 => Tensor::randn(t.shape(), 0.3, rng),
            _ => t.add(&Tensor::randn(t.shape(), 0.05, rng)).expect("same shape"),
        };
        *store.get_mut(id) = fresh;
    }
}

/// Child layer with a random attention subset, checked for the input and
/// every parameter (parent kernel, MLP, its batch norm, both static
/// attentions).
fn child_layer_check(rng: &mut ChaCha8Rng, h: f64) -> Result<Vec<GradCheck>> {
    // Three or more samples: with two, batch norm over a single reduced
    // feature outputs ±1 regardless of its input and the MLP gradient
    // vanishes.
    let b = rng.gen_range(3..5);
    let ci = rng.gen_range(2..7);
    let co = rng.gen_range(1..5);
    let side = rng.gen_range(3..6);
    let reduction = rng.gen_range(1..4);
    let mut store = ParamStore::new();
    let parent = store.add("parent", Tensor::zeros(&[co, ci, 3, 3]), ParamKind::ConvWeight);
    let adapter = Adapter::new(&mut store, "adapter", &[co, ci, 3, 3], reduction, AttentionSet::ALL, rng);
    let mut child = ChildConvLayer::new(parent, adapter, ConvGeom::new(1, 1));
    randomise(&mut store, rng);
    let x = Tensor::randn(&[b, ci, side, side], 1.0, rng);
    let proj = Projection::new(&[b, co, side, side], rng);
    let layer = format!("child conv {co}x{ci}x3x3 r{reduction}");

    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone());
    let y = child.forward_tape(&mut tape, &store, xn, Mode::Train)?;
    let loss = proj.tape(&mut tape, y)?;
    let grads = tape.backward(loss)?;

    let mut out = Vec::new();
    let numeric_x = numeric_grad(&x, h, |v| proj.eval(&child.forward(v, &store, Mode::Train)?))?;
    out.push(GradCheck {
        layer: layer.clone(),
        tensor: "input".into(),
        shape: x.shape().to_vec(),
        rel_error: rel_error(grads.node(xn).expect("input on tape"), &numeric_x),
    });
    let ids: Vec<ParamId> = store.ids().collect();
    let numeric = store_grads(&mut store, &ids, h, &mut |s| proj.eval(&child.forward(&x, s, Mode::Train)?))?;
    for (id, n) in ids.iter().zip(numeric) {
        let a = grads.param(*id).ok_or_else(|| Error::State(format!("{} not on tape", store.name(*id))))?;
        out.push(GradCheck {
            layer: layer.clone(),
            tensor: store.name(*id).into(),
            shape: a.shape().to_vec(),
            rel_error: rel_error(a, &n),
        });
    }
    Ok(out)
}

fn model_loss(model: &Model, x: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(ops::softmax_cross_entropy(&model.forward(x)?, labels)?.0)
}

fn taped_grads(model: &mut Model, x: &Tensor, labels: &[usize]) -> Result<crate::tape::Gradients> {
    let mut tape = Tape::new();
    let logits = model.forward_tape(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    tape.backward(loss)
}

/// Checks every parameter of `model` on a cross-entropy loss in the
/// model's current mode. In train mode batch norm cancels any per-channel
/// scale of its input, so gradients of scale-like parameters (the filter
/// attention) vanish up to the epsilon term and their relative error is
/// dominated by rounding; eval mode keeps every gradient well conditioned.
pub fn check_model(model: &mut Model, x: &Tensor, labels: &[usize], h: f64) -> Result<Vec<GradCheck>> {
    let grads = taped_grads(model, x, labels)?;
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut store = model.store.clone();
    let probe = model.clone();
    let numeric = store_grads(&mut store, &ids, h, &mut |s| {
        let mut m = probe.clone();
        m.store = s.clone();
        model_loss(&m, x, labels)
    })?;
    let mut out = Vec::new();
    for (id, n) in ids.iter().zip(numeric) {
        let name = model.store.name(*id).to_string();
        let a = grads.param(*id).cloned().unwrap_or_else(|| Tensor::zeros(n.shape()));
        out.push(GradCheck {
            layer: model.config.name.clone(),
            tensor: name,
            shape: n.shape().to_vec(),
            rel_error: rel_error(&a, &n),
        });
    }
    Ok(out)
}

/// Gradient of each shared parent kernel versus the sum of the gradients
/// obtained when every user of the kernel reads its own untied copy.
/// Returns the largest absolute difference over all parents.
pub fn shared_parent_split(model: &mut Model, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let shared = taped_grads(model, x, labels)?;
    let mut untied = model.clone();
    let mut copies: Vec<(ParamId, ParamId)> = Vec::new();
    for stage in &mut untied.stages {
        for slot in &mut stage.slots {
            if let SlotKind::Child(c) = &mut slot.kind {
                let value = untied.store.get(c.parent).clone();
                let copy = untied.store.add(format!("{}.untied", slot.label), value, ParamKind::ConvWeight);
                copies.push((c.parent, copy));
                c.parent = copy;
            }
        }
    }
    if copies.is_empty() {
        return Err(Error::Input("model has no child layers".into()));
    }
    let split = taped_grads(&mut untied, x, labels)?;
    let mut worst: f64 = 0.0;
    for info in model.parents() {
        let pid = model.store.id_of(&info.param_name).expect("parent is registered");
        let mut sum = split.param(pid).cloned().unwrap_or_else(|| Tensor::zeros(model.store.get(pid).shape()));
        for (_, copy) in copies.iter().filter(|(p, _)| *p == pid) {
            sum.add_assign(split.param(*copy).expect("copy on tape"))?;
        }
        let whole = shared.param(pid).expect("parent on tape");
        worst = worst.max(whole.sub(&sum)?.max_abs());
    }
    Ok(worst)
}

/// A tiny two-stage network with every adapter attention, random
/// parameters and running statistics, in eval mode. Sized so a full
/// central-difference sweep over all its parameters is quick.
pub fn small_model(seed: u64) -> Result<(Model, Tensor, Vec<usize>)> {
    let mut cfg = crate::topology::ModelConfig::preset("toy-kdna")?;
    cfg.input_size = 6;
    cfg.stem_channels = 3;
    cfg.stages.truncate(2);
    cfg.stages[0].channels = 3;
    cfg.stages[1].channels = 4;
    cfg.num_classes = 3;
    cfg.reduction = 2;
    let mut model = Model::build(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    randomise(&mut model.store, &mut rng);
    for bn in model.bn_slots_mut() {
        bn.running_mean = Tensor::randn(bn.running_mean.shape(), 0.3, &mut rng);
        bn.running_var = Tensor::uniform(bn.running_var.shape(), 0.5, 2.0, &mut rng);
    }
    let x = Tensor::randn(&[3, 1, 6, 6], 1.0, &mut rng);
    let labels = vec![0, 2, 1];
    Ok((model, x, labels))
}
