//! Reverse-mode gradient tape.
//!
//! Each op evaluates eagerly, stores its output and whatever its backward
//! rule needs, and appends a node. [`Tape::backward`] replays the nodes in
//! reverse and accumulates adjoints additively, so a parameter read by `k`
//! ops receives `k` contributions. Parameters are bound to a single leaf per
//! tape through [`Tape::param`], which is what makes a shared parent kernel
//! collect gradients from every child that uses it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::conv::{conv2d, conv2d_backward, ConvGeom};
use crate::nn::norm::{self, BnCache};
use crate::nn::ops;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    GlobalAvgPool(NodeId),
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Conv { x: NodeId, w: NodeId, bias: Option<NodeId>, geom: ConvGeom },
    Linear { x: NodeId, w: NodeId, bias: Option<NodeId> },
    BnTrain { x: NodeId, gamma: NodeId, beta: NodeId, cache: BnCache },
    BnEval { x: NodeId, gamma: NodeId, beta: NodeId, rm: Tensor, rv: Tensor, eps: f64 },
    SoftmaxCe { logits: NodeId, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

/// Adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, NodeId>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a parameter, `None` when it was never read on the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|n| self.grads[n.0].as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|(p, n)| self.grads[n.0].as_ref().map(|g| (*p, g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// An input or constant leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// The leaf bound to `id`, created on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, n);
        n
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Elementwise product with trailing-aligned broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).add_scalar(s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = ops::relu(self.value(a));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = ops::sigmoid(self.value(a));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::global_avg_pool(self.value(a))?;
        Ok(self.push(v, Op::GlobalAvgPool(a)))
    }

    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize, padding: usize) -> Result<NodeId> {
        let (v, argmax) = ops::max_pool2d(self.value(x), k, stride, padding)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>, geom: ConvGeom) -> Result<NodeId> {
        let v = conv2d(self.value(x), self.value(w), bias.map(|b| self.value(b)), geom)?;
        Ok(self.push(v, Op::Conv { x, w, bias, geom }))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let v = ops::linear(self.value(x), self.value(w), bias.map(|b| self.value(b)))?;
        Ok(self.push(v, Op::Linear { x, w, bias }))
    }

    /// Train-mode batch norm. Returns the output node plus the per-channel
    /// batch mean and biased variance so the caller can update its running
    /// estimates.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let (v, cache) = norm::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (mean, var) = (cache.mean.clone(), cache.var.clone());
        Ok((self.push(v, Op::BnTrain { x, gamma, beta, cache }), mean, var))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        rm: &Tensor,
        rv: &Tensor,
        eps: f64,
    ) -> Result<NodeId> {
        let v = norm::batchnorm_eval(self.value(x), self.value(gamma), self.value(beta), rm, rv, eps)?;
        Ok(self.push(v, Op::BnEval { x, gamma, beta, rm: rm.clone(), rv: rv.clone(), eps }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }))
    }

    /// Backpropagates from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node has shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for i in (0..=loss.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                    acc(&mut grads, *a, g.sum_to_shape(&sa)?)?;
                    acc(&mut grads, *b, g.sum_to_shape(&sb)?)?;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = Tensor::mul_sum_to_shape(&g, vb, va.shape())?;
                    let gb = Tensor::mul_sum_to_shape(&g, va, vb.shape())?;
                    acc(&mut grads, *a, ga)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g)?,
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s))?,
                Op::Relu(a) => acc(&mut grads, *a, ops::relu_backward(&g, self.value(*a)))?,
                Op::Sigmoid(a) => acc(&mut grads, *a, ops::sigmoid_backward(&g, &node.value))?,
                Op::Reshape(a) => acc(&mut grads, *a, g.into_reshape(self.value(*a).shape())?)?,
                Op::Sum(a) => acc(&mut grads, *a, Tensor::full(self.value(*a).shape(), g.data()[0]))?,
                Op::GlobalAvgPool(a) => {
                    acc(&mut grads, *a, ops::global_avg_pool_backward(&g, self.value(*a).shape())?)?
                }
                Op::MaxPool { x, argmax } => {
                    acc(&mut grads, *x, ops::max_pool2d_backward(&g, argmax, self.value(*x).shape())?)?
                }
                Op::Conv { x, w, bias, geom } => {
                    let cg = conv2d_backward(&g, self.value(*x), self.value(*w), *geom)?;
                    acc(&mut grads, *x, cg.x)?;
                    acc(&mut grads, *w, cg.w)?;
                    if let Some(b) = bias {
                        acc(&mut grads, *b, cg.bias)?;
                    }
                }
                Op::Linear { x, w, bias } => {
                    let (gx, gw, gb) = ops::linear_backward(&g, self.value(*x), self.value(*w))?;
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *w, gw)?;
                    if let Some(b) = bias {
                        acc(&mut grads, *b, gb)?;
                    }
                }
                Op::BnTrain { x, gamma, beta, cache } => {
                    let (gx, gg, gb) = norm::batchnorm_backward(&g, cache, self.value(*gamma))?;
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *gamma, gg)?;
                    acc(&mut grads, *beta, gb)?;
                }
                Op::BnEval { x, gamma, beta, rm, rv, eps } => {
                    let (gx, gg, gb) =
                        norm::batchnorm_eval_backward(&g, self.value(*x), self.value(*gamma), rm, rv, *eps)?;
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *gamma, gg)?;
                    acc(&mut grads, *beta, gb)?;
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let gl = ops::softmax_cross_entropy_backward(probs, labels, g.data()[0]);
                    acc(&mut grads, *logits, gl)?;
                }
            }
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn half_square_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0), ParamKind::LinearWeight);
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let sq = tape.mul(wn, wn).unwrap();
        let loss = tape.scale(sq, 0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(w).unwrap().data(), &[3.0]);
    }

    #[test]
    fn shared_weight_collects_both_branches() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap(), ParamKind::LinearWeight);
        let x1 = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let x2 = Tensor::from_vec(&[3], vec![-4.0, 0.5, 7.0]).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(x1.clone()), tape.leaf(x2.clone()));
        let w1 = tape.param(&store, w);
        let p1 = tape.mul(w1, a).unwrap();
        let w2 = tape.param(&store, w);
        assert_eq!(w1, w2);
        let p2 = tape.mul(w2, b).unwrap();
        let s = tape.add(p1, p2).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(w).unwrap(), &x1.add(&x2).unwrap());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }
}
