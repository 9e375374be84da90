//! Layout strings, model configuration, model construction and cost
//! accounting.

pub mod config;
pub mod cost;
pub mod layout;
pub mod model;

pub use config::{ConvKind, ModelConfig, StageConfig, Stem, Variant};
pub use cost::{count_costs, count_macs, flop_calibration, CostReport};
pub use layout::{Layout, SlotTag};
pub use model::{variant_copy, variant_expand, ConvSlot, Model, ParentInfo, SlotKind};
