use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use kdna::analysis;
use kdna::bench::{self, BenchCase};
use kdna::checkpoint;
use kdna::io::write_atomic;
use kdna::kerneldna::AttentionSet;
use kdna::topology::{count_costs, Model, ModelConfig, Variant};
use kdna::trainer::{self, Dataset, SynthSpec, TrainConfig};
use kdna::Error;

#[derive(Parser)]
#[command(
    name = "kdna",
    version,
    about = "Shared-kernel convolutional networks: accounting, training, analysis and benchmarks"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Built-in model preset (e.g. resnet18-kdna, tiny-kdna, toy-kdna).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Model configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print parameter and FLOP counts.
    Count {
        #[command(flatten)]
        model: ModelArgs,
        /// Square input side; defaults to the configured input size.
        #[arg(long)]
        resolution: Option<usize>,
        /// Also write count.csv with per-module parameters.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on `<data>/{train,val}-{images,labels}.idx`.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// adapter, copy or expand.
        #[arg(long)]
        variant: Option<String>,
        /// Adapter attentions: all, none, or a list such as channel,spatial.
        #[arg(long)]
        attentions: Option<String>,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 1e-4)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random horizontal flips.
        #[arg(long)]
        flip: bool,
    },
    /// Report accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        /// Also write eval.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold static attention into child kernels; writes `<out>/fused.kdck`.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear CKA between the 3×3 conv outputs of one or two models.
    Cka {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Untrained model instead of a checkpoint.
        #[command(flatten)]
        model: ModelArgs,
        /// Second checkpoint; rows come from the first model, columns from this one.
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = analysis::DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Throughput, latency and kernel memory across conv variants.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = bench::MIN_ITERS)]
        iters: usize,
        #[arg(long, default_value_t = bench::MIN_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Comma-separated subset of variants.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path (`*.csv`) or output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write every child's spatial attention as PGM and CSV.
    ExportAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that a configuration parses and builds.
    Validate {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write the synthetic grating task as IDX files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        val: usize,
        #[arg(long, default_value_t = 0.9)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A failure before any work starts; exits with status 2.
struct Usage(String);

enum Failure {
    Usage(Usage),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u)
    }
}

type Outcome = Result<(), Failure>;

fn config_of(m: &ModelArgs) -> Result<ModelConfig, Failure> {
    if m.preset.is_none() && m.config.is_none() {
        return Err(Usage("a model is required: pass --preset <name> or --config <file>".into()).into());
    }
    if let Some(path) = &m.config {
        if !path.is_file() {
            return Err(Usage(format!("config file {} not found", path.display())).into());
        }
    }
    let cfg = ModelConfig::load(m.preset.as_deref(), m.config.as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Plain-text `key = value` record of how an output directory was produced.
fn write_manifest(dir: &Path, config: Option<&ModelConfig>, seed: Option<u64>) -> kdna::Result<()> {
    let mut s = String::new();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let _ = writeln!(s, "tool = kdna {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "args = {}", args.join(" "));
    if let Some(cfg) = config {
        let _ = writeln!(s, "model = {}", cfg.name);
        let _ = writeln!(s, "config_sha256 = {}", sha256_hex(cfg.to_text().as_bytes()));
    }
    if let Some(seed) = seed {
        let _ = writeln!(s, "seed = {seed}");
    }
    let _ = writeln!(s, "checkpoint_format = KDCK v1");
    write_atomic(&dir.join("manifest.txt"), s.as_bytes())?;
    if let Some(cfg) = config {
        write_atomic(&dir.join("model.cfg"), cfg.to_text().as_bytes())?;
    }
    Ok(())
}

/// Loads a split normalised with the training split's statistics when the
/// directory has one.
fn load_split(dir: &Path, split: &str, classes: usize) -> kdna::Result<Dataset> {
    let train_images = dir.join("train-images.idx");
    if split != "train" && train_images.is_file() {
        let train = Dataset::load_idx(dir, "train", classes, None)?;
        Dataset::load_idx(dir, split, classes, Some(&train.norm))
    } else {
        Dataset::load_idx(dir, split, classes, None)
    }
}

fn count(model: &ModelArgs, resolution: Option<usize>, out: Option<&Path>) -> Outcome {
    let cfg = config_of(model)?;
    let m = Model::build(&cfg, 0)?;
    let res = resolution.unwrap_or(cfg.input_size);
    let r = count_costs(&m, res)?;
    println!("model: {}", r.name);
    println!("resolution: {res}");
    println!("params: {} ({:.3} M)", r.total_params, r.params_millions());
    println!("flops: {:.0} ({:.3} G)", r.flops, r.gflops());
    for (module, n) in &r.module_params {
        println!("  {module}: {n}");
    }
    if let Some(dir) = out {
        let mut csv = String::from("module,params\n");
        for (module, n) in &r.module_params {
            let _ = writeln!(csv, "{module},{n}");
        }
        let _ = writeln!(csv, "total,{}", r.total_params);
        write_atomic(&dir.join("count.csv"), csv.as_bytes())?;
        write_manifest(dir, Some(&cfg), None)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    model: &ModelArgs,
    data: &Path,
    out: &Path,
    variant: Option<&str>,
    attentions: Option<&str>,
    tc: TrainConfig,
) -> Outcome {
    let mut cfg = config_of(model)?;
    if let Some(v) = variant {
        cfg.variant = match v {
            "adapter" => Variant::Adapter,
            "copy" => Variant::Copy,
            "expand" => Variant::Expand,
            other => return Err(Usage(format!("unknown variant {other:?}; expected adapter, copy or expand")).into()),
        };
    }
    if let Some(a) = attentions {
        cfg.attentions = AttentionSet::parse(a).ok_or_else(|| Usage(format!("unknown attention set {a:?}")))?;
    }
    let train_set = load_split(data, "train", cfg.num_classes)?;
    let val_set = load_split(data, "val", cfg.num_classes)?;
    let mut m = Model::build(&cfg, tc.seed)?;
    let outcome = trainer::train(&mut m, &train_set, &val_set, &tc, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.4}  val {:.4}  lr {:.5}",
            e.epoch, e.train_loss, e.train_acc, e.val_acc, e.lr
        );
    })?;
    write_atomic(&out.join("train_log.csv"), trainer::log_csv(&outcome.log).as_bytes())?;
    write_atomic(&out.join("best.kdck"), &outcome.best_checkpoint)?;
    write_atomic(&out.join("last.kdck"), &outcome.last_checkpoint)?;
    write_manifest(out, Some(&cfg), Some(tc.seed))?;
    if let Some(msg) = outcome.diverged {
        return Err(Error::NonFinite(format!("training diverged at {msg}; last good state saved")).into());
    }
    println!("best_epoch: {}", outcome.best_epoch);
    println!("best_val_acc: {:.6}", outcome.best_val_acc);
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, split: &str, batch_size: usize, out: Option<&Path>) -> Outcome {
    let mut m = checkpoint::load(ckpt)?;
    let ds = load_split(data, split, m.config.num_classes)?;
    let acc = trainer::evaluate(&mut m, &ds, batch_size)?;
    println!("accuracy: {acc:.6}");
    println!("samples: {}", ds.len());
    if let Some(dir) = out {
        write_atomic(
            &dir.join("eval.txt"),
            format!("split = {split}\naccuracy = {acc:.6}\nsamples = {}\n", ds.len()).as_bytes(),
        )?;
        write_manifest(dir, Some(&m.config), None)?;
    }
    Ok(())
}

fn fuse(ckpt: &Path, out: &Path) -> Outcome {
    let mut m = checkpoint::load(ckpt)?;
    m.fuse()?;
    checkpoint::save(&m, &out.join("fused.kdck"))?;
    write_manifest(out, Some(&m.config), None)?;
    println!("fused: {} child layers", m.children().count());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cka(
    ckpt: Option<&Path>,
    model: &ModelArgs,
    against: Option<&Path>,
    data: &Path,
    split: &str,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Outcome {
    let a = match ckpt {
        Some(p) => checkpoint::load(p)?,
        None => Model::build(&config_of(model)?, seed)?,
    };
    let ds = load_split(data, split, a.config.num_classes)?;
    if ds.len() < samples {
        return Err(Error::Input(format!("split {split} has {} samples, {samples} requested", ds.len())).into());
    }
    let x = ds.head(samples)?;
    let probes_a = analysis::probe(&a, &x)?;
    let grid = match against {
        Some(p) => analysis::cka_between(&probes_a, &analysis::probe(&checkpoint::load(p)?, &x)?)?,
        None => analysis::cka_grid(&probes_a)?,
    };
    write_atomic(&out.join("cka.csv"), grid.to_csv().as_bytes())?;
    write_atomic(&out.join("cka.pgm"), &grid.to_pgm())?;
    let mut meta = format!(
        "probe = post-relu output of each 3x3 conv slot\nrows = sample x height x width positions\nmismatched resolutions = larger map average-pooled\nsamples = {samples}\nsplit = {split}\n"
    );
    if against.is_none() {
        if let Ok((within, cross)) = analysis::kernel_group_similarity(&a, &grid) {
            let _ = writeln!(meta, "shared_kernel_mean = {within:.9}\ncross_kernel_mean = {cross:.9}");
            println!("shared-kernel pairs: {within:.4}  cross-kernel pairs: {cross:.4}");
        }
    }
    write_atomic(&out.join("cka_meta.txt"), meta.as_bytes())?;
    write_manifest(out, Some(&a.config), Some(seed))?;
    println!("cka: {}x{} written", grid.rows(), grid.cols());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_bench(
    model: &ModelArgs,
    batch: usize,
    iters: usize,
    warmup: usize,
    threads: usize,
    variants: Option<&str>,
    seed: u64,
    out: &Path,
) -> Outcome {
    let cfg = config_of(model)?;
    let names: Vec<String> = match variants {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => bench::VARIANTS.iter().map(|s| s.to_string()).collect(),
    };
    let cases: Vec<BenchCase> =
        names.iter().map(|v| BenchCase { iters, warmup, threads, ..BenchCase::new(v, batch) }).collect();
    if let Some(c) = cases.first() {
        c.validate().map_err(|e| Usage(e.to_string()))?;
    }
    let entries = bench::run_suite(&cfg, &cases, seed)?;
    let (csv, md) = bench::emit_report(&entries);
    let (csv_path, dir) = if out.extension().is_some_and(|e| e == "csv") {
        (out.to_path_buf(), out.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf))
    } else {
        (out.join("report.csv"), out.to_path_buf())
    };
    write_atomic(&csv_path, csv.as_bytes())?;
    write_atomic(&csv_path.with_extension("md"), md.as_bytes())?;
    write_manifest(&dir, Some(&cfg), Some(seed))?;
    print!("{md}");
    Ok(())
}

fn export_attn(ckpt: &Path, out: &Path) -> Outcome {
    let m = checkpoint::load(ckpt)?;
    let files = analysis::export_spatial_attn(&m, out)?;
    write_manifest(out, Some(&m.config), None)?;
    println!("wrote {} files", files.len());
    Ok(())
}

fn validate(model: &ModelArgs) -> Outcome {
    let cfg = config_of(model)?;
    let m = Model::build(&cfg, 0)?;
    println!("ok: {} ({} parameters)", cfg.name, m.num_params());
    for (i, layout) in cfg.effective_layouts()?.iter().enumerate() {
        println!("  stage{}: {layout}", i + 1);
    }
    for p in m.parents() {
        println!("  {} -> {}", p.label, p.children.join(", "));
    }
    Ok(())
}

fn gen_data(out: &Path, n_train: usize, n_val: usize, noise: f64, seed: u64) -> Outcome {
    if n_train == 0 || n_val == 0 || noise.is_nan() || noise < 0.0 {
        return Err(Usage("--train and --val must be positive and --noise non-negative".into()).into());
    }
    let spec = SynthSpec { noise, ..SynthSpec::default() };
    trainer::write_synth(out, n_train, n_val, &spec, seed)?;
    write_manifest(out, None, Some(seed))?;
    println!("wrote {n_train} training and {n_val} validation images");
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Count { model, resolution, out } => count(&model, resolution, out.as_deref()),
        Command::Train {
            model,
            data,
            out,
            variant,
            attentions,
            epochs,
            batch_size,
            lr,
            momentum,
            weight_decay,
            seed,
            flip,
        } => {
            let tc = TrainConfig { lr0: lr, momentum, weight_decay, epochs, batch_size, seed, flip };
            train(&model, &data, &out, variant.as_deref(), attentions.as_deref(), tc)
        }
        Command::Eval { ckpt, data, split, batch_size, out } => eval(&ckpt, &data, &split, batch_size, out.as_deref()),
        Command::Fuse { ckpt, out } => fuse(&ckpt, &out),
        Command::Cka { ckpt, model, against, data, split, samples, seed, out } => {
            cka(ckpt.as_deref(), &model, against.as_deref(), &data, &split, samples, seed, &out)
        }
        Command::Bench { model, batch, iters, warmup, threads, variants, seed, out } => {
            run_bench(&model, batch, iters, warmup, threads, variants.as_deref(), seed, &out)
        }
        Command::ExportAttn { ckpt, out } => export_attn(&ckpt, &out),
        Command::Validate { model } => validate(&model),
        Command::GenData { out, train, val, noise, seed } => gen_data(&out, train, val, noise, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(Usage(msg))) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
