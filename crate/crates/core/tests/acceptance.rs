//! End-to-end acceptance checks. Prints one `criterion N: PASS|FAIL` line per
//! criterion and exits non-zero if any fails.
//!
//! `KDNA_ACCEPTANCE=1,4,10` restricts the run to the listed criteria.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kdna::analysis::{self, kernel_group_similarity, linear_cka};
use kdna::bench::{self, BenchCase, BenchInput, BATCH_EXPANDED, KDNA_FUSED, KDNA_UNFUSED, KERNEL_POOL, STANDARD};
use kdna::checkpoint;
use kdna::gradcheck::{self, STEP};
use kdna::kerneldna::{Adapter, AttentionSet, ChildConvLayer};
use kdna::nn::{conv2d_per_sample, ConvGeom, Mode};
use kdna::params::{ParamKind, ParamStore};
use kdna::tensor::{max_rel_diff, Tensor};
use kdna::topology::{count_costs, Model, ModelConfig, Variant};
use kdna::trainer::{evaluate, synth_splits, train, Dataset, SynthSpec, TrainConfig, TrainOutcome};
use kdna::Result;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value / target - 1.0).abs() <= tol
}

fn criterion1() -> Result<Verdict> {
    let cases: [(&str, f64, f64); 12] = [
        ("resnet18-orig", 11.69, 0.005),
        ("resnet18-ff-ff-ff", 17.59, 0.01),
        ("resnet18-ff-fff", 14.64, 0.01),
        ("resnet18-fs-ssf", 6.29, 0.02),
        ("resnet18-fs-sf-sf", 9.24, 0.02),
        ("resnet18-copy", 8.74, 0.02),
        ("resnet18-expand", 14.64, 0.01),
        ("resnet18-kdna-r1", 10.719, 0.02),
        ("resnet18-kdna-r2", 9.733, 0.02),
        ("resnet18-kdna-r4", 9.241, 0.02),
        ("resnet18-kdna-r8", 8.994, 0.02),
        ("resnet18-kdna-r16", 8.871, 0.02),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, target, tol) in cases {
        let m = Model::build(&ModelConfig::preset(name)?, 0)?;
        let got = count_costs(&m, 224)?.params_millions();
        let ok = within(got, target, tol);
        pass &= ok;
        parts.push(format!("{name} {got:.3}M/{target}M{}", if ok { "" } else { " (out of range)" }));
    }
    Ok(verdict(pass, parts.join(", ")))
}

fn criterion2() -> Result<Verdict> {
    let orig = count_costs(&Model::build(&ModelConfig::preset("resnet18-orig")?, 0)?, 224)?.gflops();
    let kdna = count_costs(&Model::build(&ModelConfig::preset("resnet18-kdna")?, 0)?, 224)?.gflops();
    let pass = (orig - 1.82).abs() <= 1e-9 && (2.0..=2.5).contains(&kdna);
    Ok(verdict(pass, format!("orig {orig:.4} G, kdna {kdna:.4} G")))
}

/// A tiny network with every parameter moved off its initial value and
/// random running statistics, in eval mode.
fn randomised_tiny(seed: u64) -> Result<Model> {
    let mut m = Model::build(&ModelConfig::preset("tiny-kdna")?, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gradcheck::randomise(&mut m.store, &mut rng);
    for bn in m.bn_slots_mut() {
        bn.running_mean = Tensor::randn(bn.running_mean.shape(), 0.3, &mut rng);
        bn.running_var = Tensor::uniform(bn.running_var.shape(), 0.5, 2.0, &mut rng);
    }
    m.set_mode(Mode::Eval);
    Ok(m)
}

fn criterion3_forward() -> Result<(bool, String)> {
    let unfused = randomised_tiny(31)?;
    let mut fused = unfused.clone();
    fused.fuse()?;
    let cfg = &unfused.config;
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = Tensor::randn(&[10, cfg.in_channels, cfg.input_size, cfg.input_size], 1.0, &mut rng);
        worst = worst.max(max_rel_diff(&unfused.forward(&x)?, &fused.forward(&x)?));
    }
    Ok((worst <= 1e-10, format!("100 inputs, max rel diff {worst:.2e}")))
}

fn criterion3_checkpoint(best: &[u8], val: &Dataset) -> Result<(bool, String)> {
    let mut unfused = checkpoint::from_bytes(best)?;
    let mut fused = checkpoint::from_bytes(best)?;
    fused.fuse()?;
    let mut reloaded = checkpoint::from_bytes(&checkpoint::to_bytes(&fused)?)?;
    let a = evaluate(&mut unfused, val, 256)?;
    let b = evaluate(&mut reloaded, val, 256)?;
    Ok((a == b, format!("checkpoint accuracy unfused {a:.4}, fused {b:.4}")))
}

fn criterion4() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (b, ci, co, side) = (rng.gen_range(1..5), rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(3..9));
        let reduction = rng.gen_range(1..5);
        let shape = [co, ci, 3, 3];
        let mut store = ParamStore::new();
        let parent = store.add("parent", Tensor::randn(&shape, 0.5, &mut rng), ParamKind::ConvWeight);
        let adapter = Adapter::new(&mut store, "child", &shape, reduction, AttentionSet::ALL, &mut rng);
        let child = ChildConvLayer::new(parent, adapter, ConvGeom::new(rng.gen_range(1..3), 1));
        gradcheck::randomise(&mut store, &mut rng);
        let x = Tensor::randn(&[b, ci, side, side], 1.0, &mut rng);
        let input_side = child.forward(&x, &store, Mode::Eval)?;
        let beta = child.channel_attention(&x, &store, Mode::Eval)?.expect("channel attention enabled");
        let w = child.modulated_kernel(&store)?;
        let mut kernels = Vec::with_capacity(b * w.numel());
        for s in 0..b {
            let gate = beta.slice0(s, s + 1)?.into_reshape(&[1, ci, 1, 1])?;
            kernels.extend_from_slice(w.mul(&gate)?.data());
        }
        let kernel_side = conv2d_per_sample(&x, &kernels, w.shape(), child.geom)?;
        worst = worst.max(max_rel_diff(&input_side, &kernel_side));
    }
    Ok(verdict(worst <= 1e-10, format!("100 cases, max rel diff {worst:.2e}")))
}

fn criterion5() -> Result<Verdict> {
    let mut worst = 0.0f64;
    let mut layers = std::collections::BTreeSet::new();
    for seed in 0..24 {
        for c in gradcheck::layer_suite(seed, STEP)? {
            layers.insert(c.layer.split(' ').next().unwrap_or("").to_string());
            worst = worst.max(c.rel_error);
        }
    }
    let mut model_worst = 0.0f64;
    for seed in 0..2 {
        let (mut m, x, labels) = gradcheck::small_model(seed)?;
        for c in gradcheck::check_model(&mut m, &x, &labels, STEP)? {
            model_worst = model_worst.max(c.rel_error);
        }
    }
    let (mut m, x, labels) = gradcheck::small_model(7)?;
    let split = gradcheck::shared_parent_split(&mut m, &x, &labels)?;
    let pass = worst <= 1e-5 && model_worst <= 1e-5 && split <= 1e-9 && layers.len() >= 10;
    Ok(verdict(
        pass,
        format!(
            "{} layer types over 24 seeds worst {worst:.2e}, whole-model worst {model_worst:.2e}, shared-parent split {split:.2e}",
            layers.len()
        ),
    ))
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if syy == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

fn coeff_of_variation(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt() / mean
}

fn criterion6() -> Result<Verdict> {
    let base = ModelConfig::preset("tiny-kdna")?;
    let batches = [1usize, 2, 4, 8, 16, 32];
    let xs: Vec<f64> = batches.iter().map(|&b| b as f64).collect();
    let transient = |variant: &str| -> Result<Vec<f64>> {
        let m = bench::variant_model(&base, variant, 0)?;
        batches.iter().map(|&b| Ok(bench::kernel_peaks(&m, b, 1)?.transient as f64)).collect()
    };
    let expanded = transient(BATCH_EXPANDED)?;
    let unfused = transient(KDNA_UNFUSED)?;
    let fused = transient(KDNA_FUSED)?;
    let r2 = r_squared(&xs, &expanded);
    let (cv_u, cv_f) = (coeff_of_variation(&unfused), coeff_of_variation(&fused));
    let pass = r2 >= 0.99 && cv_u <= 0.01 && cv_f <= 0.01;
    Ok(verdict(
        pass,
        format!(
            "batch-expanded R² {r2:.6} ({:.0}..{:.0} B), kdna unfused CV {cv_u:.4} ({:.0} B), kdna fused CV {cv_f:.4} ({:.0} B)",
            expanded[0],
            expanded[5],
            unfused[0],
            fused[0]
        ),
    ))
}

fn criterion7() -> Result<Verdict> {
    let base = ModelConfig::preset("tiny-kdna")?;
    let input = BenchInput::random(32, base.in_channels, base.input_size, 7);
    // The two close variants are timed twice in mirrored order to cancel drift.
    let order = [STANDARD, KDNA_FUSED, KERNEL_POOL, BATCH_EXPANDED, KDNA_FUSED, STANDARD];
    let mut sums = std::collections::BTreeMap::<&str, (f64, usize)>::new();
    for v in order {
        let model = bench::variant_model(&base, v, 0)?;
        let r = bench::run_bench(&model, &BenchCase::new(v, 32), &input)?;
        let e = sums.entry(v).or_default();
        e.0 += r.throughput;
        e.1 += 1;
    }
    let tp = |v: &str| sums[v].0 / sums[v].1 as f64;
    let (std_, fused, pool, expanded) = (tp(STANDARD), tp(KDNA_FUSED), tp(KERNEL_POOL), tp(BATCH_EXPANDED));
    let checks = [
        ("standard >= fused", std_ >= fused),
        ("fused >= 0.85 standard", fused >= 0.85 * std_),
        ("fused >= 1.3 pool", fused >= 1.3 * pool),
        ("pool >= 1.3 expanded", pool >= 1.3 * expanded),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let mut detail = format!(
        "samples/s standard {std_:.1}, kdna-fused {fused:.1}, kernel-pool {pool:.1}, batch-expanded {expanded:.1}; \
         fused/standard {:.3}, fused/pool {:.3}, pool/expanded {:.3}",
        fused / std_,
        fused / pool,
        pool / expanded
    );
    if !failed.is_empty() {
        detail.push_str(&format!("; not met: {}", failed.join(", ")));
    }
    Ok(verdict(failed.is_empty(), detail))
}

const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATIONS: [&str; 3] = ["channel", "filter", "spatial"];

/// The toy network at half width, which trains in well under a minute.
fn training_config() -> Result<ModelConfig> {
    let mut cfg = ModelConfig::preset("toy-kdna")?;
    cfg.stem_channels = 4;
    for (i, st) in cfg.stages.iter_mut().enumerate() {
        st.channels = 4 << i;
    }
    Ok(cfg)
}

struct Run {
    outcome: TrainOutcome,
    model: Model,
}

fn train_run(cfg: &ModelConfig, seed: u64, data: &(Dataset, Dataset)) -> Result<Run> {
    let mut model = Model::build(cfg, seed)?;
    let tc = TrainConfig { lr0: 0.05, epochs: 8, batch_size: 32, seed, ..TrainConfig::default() };
    let outcome = train(&mut model, &data.0, &data.1, &tc, |_| {})?;
    Ok(Run { outcome, model })
}

fn final_acc(r: &Run) -> f64 {
    r.outcome.log.last().map_or(0.0, |e| e.val_acc)
}

struct Trained {
    verdict: Verdict,
    /// Seed-0 full-attention run, reused by the fusion and CKA checks.
    reference: Run,
    data: (Dataset, Dataset),
}

fn criterion8() -> Result<Trained> {
    let spec = SynthSpec { noise: 0.9, ..SynthSpec::default() };
    let data = synth_splits(3000, 2000, &spec, 1)?;
    let base = training_config()?;
    let (mut copy_sum, mut full_sum, mut wins) = (0.0, 0.0, 0);
    let mut rows = Vec::new();
    let mut reference = None;
    for seed in TRAIN_SEEDS {
        let full = train_run(&base, seed, &data)?;
        let copy = train_run(&base.clone().with_variant(Variant::Copy), seed, &data)?;
        let mut singles = Vec::new();
        for a in ABLATIONS {
            let set = AttentionSet::parse(a).expect("known attention name");
            singles.push(final_acc(&train_run(&base.clone().with_attentions(set), seed, &data)?));
        }
        let f = final_acc(&full);
        full_sum += f;
        copy_sum += final_acc(&copy);
        if singles.iter().all(|&s| f >= s) {
            wins += 1;
        }
        rows.push(format!(
            "seed {seed}: all {f:.4} copy {:.4} {}",
            final_acc(&copy),
            ABLATIONS.iter().zip(&singles).map(|(a, s)| format!("{a} {s:.4}")).collect::<Vec<_>>().join(" ")
        ));
        if seed == 0 {
            reference = Some(full);
        }
    }
    let reference = reference.expect("seed 0 is in the list");
    let rerun = train_run(&base, 0, &data)?;
    let identical = rerun.outcome.best_checkpoint == reference.outcome.best_checkpoint
        && rerun.outcome.last_checkpoint == reference.outcome.last_checkpoint
        && rerun.outcome.log == reference.outcome.log;
    let n = TRAIN_SEEDS.len() as f64;
    let (a, b) = (full_sum / n >= copy_sum / n, wins >= 2);
    let detail = format!(
        "(a) mean val acc adapter {:.4} vs copy {:.4}: {}; (b) full >= every single attention in {wins}/3 seeds: {}; \
         (c) rerun bit-identical: {}; {}",
        full_sum / n,
        copy_sum / n,
        ok(a),
        ok(b),
        ok(identical),
        rows.join("; ")
    );
    Ok(Trained { verdict: verdict(a && b && identical, detail), reference, data })
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "not met"
    }
}

fn orthogonal(p: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < p {
        let mut v: Vec<f64> = (0..p).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|a| a / n).collect());
    }
    let mut data = vec![0.0; p * p];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            data[i * p + j] = *v;
        }
    }
    Tensor::from_vec(&[p, p], data).expect("square")
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let av = a.data()[i * k + l];
            for j in 0..m {
                out[i * m + j] += av * b.data()[l * m + j];
            }
        }
    }
    Tensor::from_vec(&[n, m], out).expect("shape")
}

/// `HSIC(K, L) / sqrt(HSIC(K, K) · HSIC(L, L))` with linear kernels and an
/// explicit centring matrix.
fn hsic_ratio(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.shape()[0];
    let gram = |t: &Tensor| {
        let p = t.shape()[1];
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] = (0..p).map(|c| t.data()[i * p + c] * t.data()[j * p + c]).sum();
            }
        }
        g
    };
    let centre = |g: &[f64]| {
        let h = |i: usize, j: usize| if i == j { 1.0 - 1.0 / n as f64 } else { -1.0 / n as f64 };
        let mut hg = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                hg[i * n + j] = (0..n).map(|l| h(i, l) * g[l * n + j]).sum();
            }
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n).map(|l| hg[i * n + l] * h(l, j)).sum();
            }
        }
        out
    };
    let (k, l) = (centre(&gram(x)), centre(&gram(y)));
    let hsic = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

fn criterion9(trained: &Model, val: &Dataset) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let x = Tensor::randn(&[64, 32], 1.0, &mut rng);
    let y = Tensor::randn(&[64, 32], 1.0, &mut rng).add(&x.scale(0.5))?;
    let self_err = (linear_cka(&x, &x)? - 1.0).abs();
    let base = linear_cka(&x, &y)?;
    let rotated = linear_cka(&matmul(&x, &orthogonal(32, &mut rng)), &y.scale(3.7))?;
    let invariance = (rotated - base).abs();
    let oracle = (hsic_ratio(&x, &y) - base).abs();

    let probes = analysis::probe(trained, &val.head(analysis::DEFAULT_SAMPLES)?)?;
    let grid = analysis::cka_grid(&probes)?;
    let (within, cross) = kernel_group_similarity(trained, &grid)?;
    let pass = self_err <= 1e-9 && invariance <= 1e-9 && oracle <= 1e-9 && within > cross;
    Ok(verdict(
        pass,
        format!(
            "self {self_err:.1e}, orthogonal+scale {invariance:.1e}, HSIC oracle {oracle:.1e}; \
             trained toy model within-parent {within:.4} vs cross-parent {cross:.4}"
        ),
    ))
}

fn criterion10() -> Result<Verdict> {
    let cfg = ModelConfig::preset("tiny-kdna")?;
    let m = Model::build(&cfg, 100)?;
    let plain = m.with_children_as_copies(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst, mut agree) = (0.0f64, 0);
    for _ in 0..20 {
        let x = Tensor::randn(&[50, cfg.in_channels, cfg.input_size, cfg.input_size], 1.0, &mut rng);
        let (a, b) = (m.forward(&x)?, plain.forward(&x)?);
        worst = worst.max(max_rel_diff(&a, &b));
        let k = cfg.num_classes;
        for (ra, rb) in a.data().chunks(k).zip(b.data().chunks(k)) {
            agree += usize::from(argmax(ra) == argmax(rb));
        }
    }
    Ok(verdict(worst <= 1e-12 && agree == 1000, format!("max rel diff {worst:.2e}, argmax agrees on {agree}/1000")))
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

type Check = fn() -> Result<Verdict>;

fn timed(n: usize, f: impl FnOnce() -> Result<Verdict>) -> (usize, Verdict, f64) {
    let t = Instant::now();
    let v = f().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
    let secs = t.elapsed().as_secs_f64();
    eprintln!("criterion {n} finished in {secs:.1}s");
    (n, v, secs)
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("KDNA_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results = Vec::new();
    let simple: [(usize, Check); 6] =
        [(1, criterion1), (2, criterion2), (4, criterion4), (5, criterion5), (6, criterion6), (10, criterion10)];
    for (n, f) in simple {
        if wanted(n) {
            results.push(timed(n, f));
        }
    }

    // Training feeds the fused-checkpoint and trained-model CKA checks.
    let mut trained: Option<Trained> = None;
    if wanted(3) || wanted(8) || wanted(9) {
        let r = timed(8, || {
            let mut t8 = criterion8()?;
            let v = std::mem::replace(&mut t8.verdict, verdict(true, ""));
            trained = Some(t8);
            Ok(v)
        });
        if wanted(8) {
            results.push(r);
        }
    }
    if wanted(3) {
        results.push(timed(3, || {
            let (fwd_ok, fwd) = criterion3_forward()?;
            let Some(t8) = &trained else {
                return Ok(verdict(false, format!("{fwd}; no trained model")));
            };
            let (ck_ok, ck) = criterion3_checkpoint(&t8.reference.outcome.best_checkpoint, &t8.data.1)?;
            Ok(verdict(fwd_ok && ck_ok, format!("{fwd}; {ck}")))
        }));
    }
    if wanted(9) {
        results.push(timed(9, || match &trained {
            Some(t8) => {
                let mut m = t8.reference.model.clone();
                m.set_mode(Mode::Eval);
                criterion9(&m, &t8.data.1)
            }
            None => Ok(verdict(false, "no trained model")),
        }));
    }
    if wanted(7) {
        results.push(timed(7, criterion7));
    }

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, v, secs) in &results {
        println!("criterion {n}: {} ({secs:.1}s) {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
