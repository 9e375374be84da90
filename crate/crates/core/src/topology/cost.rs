//! Parameter and FLOP accounting.
//!
//! Raw FLOPs are `2 · MACs` over convolutions, the classifier, adapter MLPs,
//! the channel-gate multiplies and the baseline layers' kernel blending.
//! Reported FLOPs are raw FLOPs times [`flop_calibration`], a single
//! constant chosen so that the original ResNet-18 at 224×224 reports
//! 1.82 G.

use std::sync::OnceLock;

use crate::error::Result;
use crate::nn::conv::out_extent;
use crate::topology::config::ModelConfig;
use crate::topology::model::{Model, SlotKind};

pub const RESNET18_REFERENCE_FLOPS: f64 = 1.82e9;

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub name: String,
    pub total_params: usize,
    /// Parameters grouped by top-level module (`stem`, `stage1`, …, `fc`).
    pub module_params: Vec<(String, usize)>,
    pub macs: u64,
    /// Calibrated FLOPs.
    pub flops: f64,
}

impl CostReport {
    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.flops / 1e9
    }
}

/// Multiplier applied to raw FLOPs.
pub fn flop_calibration() -> f64 {
    static CAL: OnceLock<f64> = OnceLock::new();
    *CAL.get_or_init(|| {
        let cfg = ModelConfig::preset("resnet18-orig").expect("built-in preset");
        let model = Model::build(&cfg, 0).expect("built-in preset builds");
        let macs = count_macs(&model, 224).expect("224 is a valid resolution");
        RESNET18_REFERENCE_FLOPS / (2.0 * macs as f64)
    })
}

fn module_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Counts parameters and FLOPs for a square input of side `resolution`.
pub fn count_costs(model: &Model, resolution: usize) -> Result<CostReport> {
    let mut modules: Vec<(String, usize)> = Vec::new();
    let mut add = |module: &str, n: usize| match modules.iter_mut().find(|(m, _)| m == module) {
        Some((_, v)) => *v += n,
        None => modules.push((module.to_string(), n)),
    };
    for (_, p) in model.store.iter() {
        add(module_of(&p.name), p.value.numel());
    }
    for slot in model.slots() {
        let n = match &slot.kind {
            SlotKind::Pool(p) => p.num_params(),
            SlotKind::Dynamic(d) => d.num_params(),
            _ => 0,
        };
        if n > 0 {
            add(module_of(&slot.label), n);
        }
    }
    let macs = count_macs(model, resolution)?;
    Ok(CostReport {
        name: model.config.name.clone(),
        total_params: modules.iter().map(|(_, n)| n).sum(),
        module_params: modules,
        macs,
        flops: 2.0 * macs as f64 * flop_calibration(),
    })
}

/// Multiply-accumulates of one forward pass for a single sample.
pub fn count_macs(model: &Model, resolution: usize) -> Result<u64> {
    let cfg = &model.config;
    let conv = |c_out: usize, c_in: usize, k: usize, hw: usize| (c_out * c_in * k * k * hw) as u64;
    let (k_stem, s_stem, p_stem) = if model.stem.max_pool { (7, 2, 3) } else { (3, 1, 1) };
    let mut h = out_extent(resolution, k_stem, s_stem, p_stem)?;
    let mut macs = conv(cfg.stem_channels, cfg.in_channels, k_stem, h * h);
    if model.stem.max_pool {
        h = out_extent(h, 3, 2, 1)?;
    }
    for stage in &model.stages {
        for block in &stage.blocks {
            if let Some(d) = &block.downsample {
                let ho = out_extent(h, 1, d.geom.stride, 0)?;
                let c_in = model.store.get(d.weight).shape()[1];
                macs += conv(stage.slots[block.start].c_out, c_in, 1, ho * ho);
            }
            for slot in &stage.slots[block.start..block.end] {
                let k = crate::topology::model::KERNEL;
                let ho = out_extent(h, k, slot.geom.stride, slot.geom.padding)?;
                let w = (slot.c_out * slot.c_in * k * k) as u64;
                macs += conv(slot.c_out, slot.c_in, k, ho * ho);
                macs += match &slot.kind {
                    SlotKind::Child(c) if c.adapter.channel.is_some() => {
                        let ca = c.adapter.channel.as_ref().unwrap();
                        (ca.macs() + slot.c_in * h * h) as u64
                    }
                    SlotKind::Copy { input_scale, .. } if *input_scale != 1.0 => (slot.c_in * h * h) as u64,
                    SlotKind::Pool(p) => p.pool_size() as u64 * w + p.router.macs() as u64,
                    SlotKind::Dynamic(d) => {
                        let n = d.pool_size() as u64;
                        // kernel and spatial scaling, reduction over the pool,
                        // heads, channel gate and filter gate
                        2 * n * w + d.head_macs() as u64 + (slot.c_in * h * h + slot.c_out * ho * ho) as u64
                    }
                    _ => 0,
                };
                h = ho;
            }
        }
    }
    let c_last = cfg.stages.last().map_or(cfg.stem_channels, |s| s.channels);
    macs += (c_last * cfg.num_classes) as u64;
    Ok(macs)
}

/// Adapter parameters a child with a `[c_out, c_in, k, k]` parent adds:
/// two bias-free FC layers, the BN between them, α_f and α_s.
pub fn adapter_param_formula(c_in: usize, c_out: usize, k: usize, reduction: usize) -> usize {
    let r = crate::kerneldna::reduced_width(c_in, reduction);
    2 * c_in * r + 2 * r + c_out + k * k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(name: &str) -> CostReport {
        let cfg = ModelConfig::preset(name).unwrap();
        count_costs(&Model::build(&cfg, 0).unwrap(), cfg.input_size).unwrap()
    }

    #[test]
    fn resnet18_original_count_is_exact() {
        let r = report("resnet18-orig");
        assert_eq!(r.total_params, 11_689_512);
        assert!((r.flops - 1.82e9).abs() < 1.0);
        assert_eq!(r.module_params.iter().map(|(_, n)| n).sum::<usize>(), r.total_params);
        assert_eq!(
            r.module_params.iter().map(|(m, _)| m.as_str()).collect::<Vec<_>>(),
            ["stem", "stage1", "stage2", "stage3", "stage4", "fc"]
        );
    }

    #[test]
    fn raw_resnet18_macs() {
        // 1.814 G multiply-accumulates is the usual figure for ResNet-18.
        let cfg = ModelConfig::preset("resnet18-orig").unwrap();
        let macs = count_macs(&Model::build(&cfg, 0).unwrap(), 224).unwrap();
        assert_eq!(macs, 1_814_073_344);
    }

    #[test]
    fn adapter_overhead_is_exact() {
        for name in ["tiny-kdna", "resnet18-kdna"] {
            let cfg = ModelConfig::preset(name).unwrap();
            let a = Model::build(&cfg, 0).unwrap();
            let c = Model::build(&cfg.clone().with_variant(crate::topology::Variant::Copy), 0).unwrap();
            let expected: usize = a
                .slots()
                .filter(|s| s.child().is_some())
                .map(|s| adapter_param_formula(s.c_in, s.c_out, 3, cfg.reduction))
                .sum();
            assert_eq!(a.num_params() - c.num_params(), expected, "{name}");
        }
    }

    #[test]
    fn sharing_reduces_count() {
        let kdna = report("tiny-kdna");
        let expand = report("tiny-expand");
        assert!(kdna.total_params < expand.total_params);
        assert!(kdna.macs > report("tiny-orig").macs);
    }
}
