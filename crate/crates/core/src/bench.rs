//! Inference timing and kernel-memory measurement.
//!
//! Variants are derived from one base configuration so they share a layer
//! structure: `standard` gives every slot its own kernel, the `kdna-*`
//! variants keep the base layout's shared kernels, and the two baselines
//! swap every stage convolution for a 4-kernel dynamic layer.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::memtrack;
use crate::tensor::Tensor;
use crate::topology::{count_costs, ConvKind, Model, ModelConfig, Variant};

pub const MIN_WARMUP: usize = 10;
pub const MIN_ITERS: usize = 100;

pub const STANDARD: &str = "standard";
/// Fused static attention, channel attention still on.
pub const KDNA_FUSED: &str = "kdna-fused";
/// Fused static attention with the channel attention disabled.
pub const KDNA_FUSED_STATIC: &str = "kdna-fused-static";
pub const KDNA_UNFUSED: &str = "kdna-unfused";
pub const KERNEL_POOL: &str = "kernel-pool-n4";
pub const BATCH_EXPANDED: &str = "batch-expanded-n4";

pub const VARIANTS: [&str; 6] = [STANDARD, KDNA_FUSED, KDNA_FUSED_STATIC, KDNA_UNFUSED, KERNEL_POOL, BATCH_EXPANDED];

/// Builds a benchmark variant of `base` in eval mode.
pub fn variant_model(base: &ModelConfig, variant: &str, seed: u64) -> Result<Model> {
    let adapter = base.clone().with_variant(Variant::Adapter).with_conv(ConvKind::Standard);
    let expanded = base.clone().with_variant(Variant::Expand);
    let mut model = match variant {
        STANDARD => Model::build(&expanded.with_conv(ConvKind::Standard), seed)?,
        KERNEL_POOL => Model::build(&expanded.with_conv(ConvKind::Pool(4)), seed)?,
        BATCH_EXPANDED => Model::build(&expanded.with_conv(ConvKind::Dynamic(4)), seed)?,
        KDNA_FUSED | KDNA_FUSED_STATIC | KDNA_UNFUSED => Model::build(&adapter, seed)?,
        other => return Err(Error::Config(format!("unknown bench variant {other:?}"))),
    };
    match variant {
        KDNA_FUSED => model.fuse()?,
        KDNA_FUSED_STATIC => {
            model.fuse()?;
            model.set_dynamic(false);
        }
        _ => {}
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchCase {
    pub variant: String,
    pub batch: usize,
    /// Input side; 0 uses the model's configured size.
    pub resolution: usize,
    pub warmup: usize,
    pub iters: usize,
    pub threads: usize,
}

impl BenchCase {
    pub fn new(variant: &str, batch: usize) -> Self {
        Self { variant: variant.into(), batch, resolution: 0, warmup: MIN_WARMUP, iters: MIN_ITERS, threads: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup < MIN_WARMUP || self.iters < MIN_ITERS {
            return Err(Error::Config(format!(
                "benchmarks need at least {MIN_WARMUP} warmup and {MIN_ITERS} measured iterations"
            )));
        }
        if self.batch == 0 || self.threads == 0 {
            return Err(Error::Config("batch and threads must be positive".into()));
        }
        Ok(())
    }
}

/// Inputs shared by every variant of a run: one batch and one single
/// sample, both drawn before any timing starts.
#[derive(Clone, Debug)]
pub struct BenchInput {
    pub batch: Tensor,
    pub single: Tensor,
}

impl BenchInput {
    pub fn random(batch: usize, channels: usize, side: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = Tensor::randn(&[batch, channels, side, side], 1.0, &mut rng);
        let single = batch.slice0(0, 1).expect("batch is non-empty");
        Self { batch, single }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub variant: String,
    pub batch: usize,
    pub threads: usize,
    /// Samples per second at `batch`.
    pub throughput: f64,
    /// Batch-1 forward latency.
    pub latency_ms: f64,
    pub latency_p95_ms: f64,
    /// Largest persistent + transient kernel bytes inside one layer during a
    /// forward at `batch`.
    pub peak_kernel_bytes: usize,
    /// Largest amount of transient kernel bytes live at once.
    pub transient_kernel_bytes: usize,
    pub params: usize,
    pub flops: f64,
}

/// A variant either measured or skipped with a reason.
#[derive(Clone, Debug, PartialEq)]
pub enum BenchEntry {
    Done(BenchResult),
    Skipped { variant: String, batch: usize, reason: String },
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

/// Times `model` on pre-generated inputs. Input generation is not timed.
pub fn run_bench(model: &Model, case: &BenchCase, input: &BenchInput) -> Result<BenchResult> {
    case.validate()?;
    if input.batch.shape()[0] != case.batch {
        return Err(Error::Input(format!("input batch is {}, case wants {}", input.batch.shape()[0], case.batch)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(case.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let forward = |x: &Tensor| if case.threads > 1 { model.forward_parallel(x, &pool) } else { model.forward(x) };

    for _ in 0..case.warmup {
        forward(&input.single)?;
    }
    let mut lat = Vec::with_capacity(case.iters);
    for _ in 0..case.iters {
        let t = Instant::now();
        std::hint::black_box(forward(&input.single)?);
        lat.push(t.elapsed().as_secs_f64() * 1e3);
    }
    lat.sort_by(f64::total_cmp);

    for _ in 0..case.warmup {
        forward(&input.batch)?;
    }
    let t = Instant::now();
    for _ in 0..case.iters {
        std::hint::black_box(forward(&input.batch)?);
    }
    let throughput = (case.batch * case.iters) as f64 / t.elapsed().as_secs_f64();

    let (out, peaks) = memtrack::measure(|| model.forward(&input.batch));
    out?;
    let side = input.batch.shape()[2];
    let cost = count_costs(model, side)?;
    Ok(BenchResult {
        variant: case.variant.clone(),
        batch: case.batch,
        threads: case.threads,
        throughput,
        latency_ms: percentile(&lat, 0.5),
        latency_p95_ms: percentile(&lat, 0.95),
        peak_kernel_bytes: peaks.layer,
        transient_kernel_bytes: peaks.transient,
        params: cost.total_params,
        flops: cost.flops,
    })
}

/// Kernel bytes of one forward at the given batch size, without timing.
pub fn kernel_peaks(model: &Model, batch: usize, seed: u64) -> Result<memtrack::KernelPeaks> {
    let cfg = &model.config;
    let x = BenchInput::random(batch, cfg.in_channels, cfg.input_size, seed).batch;
    let (out, peaks) = memtrack::measure(|| model.forward(&x));
    out?;
    Ok(peaks)
}

/// Runs every case against `base`. Variants that fail to build are skipped.
pub fn run_suite(base: &ModelConfig, cases: &[BenchCase], seed: u64) -> Result<Vec<BenchEntry>> {
    let mut out = Vec::new();
    for case in cases {
        case.validate()?;
        let side = if case.resolution == 0 { base.input_size } else { case.resolution };
        let input = BenchInput::random(case.batch, base.in_channels, side, seed);
        match variant_model(base, &case.variant, seed) {
            Ok(model) => out.push(BenchEntry::Done(run_bench(&model, case, &input)?)),
            Err(e) => out.push(BenchEntry::Skipped {
                variant: case.variant.clone(),
                batch: case.batch,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

fn sort_key(e: &BenchEntry) -> (String, usize, usize) {
    match e {
        BenchEntry::Done(r) => (r.variant.clone(), r.batch, r.threads),
        BenchEntry::Skipped { variant, batch, .. } => (variant.clone(), *batch, 0),
    }
}

/// CSV and markdown tables, rows sorted by variant name, then batch and
/// thread count. Skipped variants appear with empty measurements in the
/// CSV and a note in the markdown.
pub fn emit_report(entries: &[BenchEntry]) -> (String, String) {
    let mut sorted: Vec<&BenchEntry> = entries.iter().collect();
    sorted.sort_by_key(|e| sort_key(e));
    let mut csv = String::from("variant,batch,throughput,latency_ms,peak_kernel_bytes,params,flops\n");
    let mut md = String::from(
        "| Variant | Batch | Params (M) | FLOPs (G) | Throughput (samples/s) | Latency (ms) | Peak kernel (KiB) |\n\
         |---|---:|---:|---:|---:|---:|---:|\n",
    );
    for e in sorted {
        match e {
            BenchEntry::Done(r) => {
                let name =
                    if r.threads > 1 { format!("{} ({} threads)", r.variant, r.threads) } else { r.variant.clone() };
                csv.push_str(&format!(
                    "{},{},{:.3},{:.4},{},{},{:.0}\n",
                    name, r.batch, r.throughput, r.latency_ms, r.peak_kernel_bytes, r.params, r.flops
                ));
                md.push_str(&format!(
                    "| {} | {} | {:.3} | {:.4} | {:.1} | {:.3} | {:.1} |\n",
                    name,
                    r.batch,
                    r.params as f64 / 1e6,
                    r.flops / 1e9,
                    r.throughput,
                    r.latency_ms,
                    r.peak_kernel_bytes as f64 / 1024.0
                ));
            }
            BenchEntry::Skipped { variant, batch, reason } => {
                csv.push_str(&format!("{variant},{batch},,,,,\n"));
                md.push_str(&format!("| {variant} | {batch} | skipped: {reason} | | | | |\n"));
            }
        }
    }
    (csv, md)
}
