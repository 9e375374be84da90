//! Named parameter storage shared by every layer of a model.
//!
//! Layers hold [`ParamId`]s rather than tensors, so a parent kernel used by
//! several child layers is stored, updated and counted exactly once.

use std::collections::HashMap;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// What a parameter is for; decides weight-decay eligibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    /// Batch-norm scale and shift, excluded from weight decay.
    Norm,
    /// Static filter/spatial attention tensors of an adapter.
    StaticAttention,
    /// Channel-attention MLP weights.
    AttentionMlp,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::Norm)
    }

    pub fn tag(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv",
            ParamKind::LinearWeight => "linear",
            ParamKind::Bias => "bias",
            ParamKind::Norm => "norm",
            ParamKind::StaticAttention => "static_attn",
            ParamKind::AttentionMlp => "attn_mlp",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names are unique; re-registering a name panics
    /// because it indicates a model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        assert!(self.index.insert(name.clone(), id).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, value, kind });
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
