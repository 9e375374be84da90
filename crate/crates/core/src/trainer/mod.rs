//! Supervised training on small image sets.

pub mod data;
pub mod idx;
pub mod sgd;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{ops, Mode};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::topology::Model;

pub use data::{synth_splits, write_synth, Dataset, Normalization, SynthSpec};
pub use sgd::{cosine_lr, Sgd, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Checkpoint of the epoch with the highest validation accuracy (the
    /// earliest on ties).
    pub best_checkpoint: Vec<u8>,
    /// Checkpoint after the last completed epoch.
    pub last_checkpoint: Vec<u8>,
    /// Set when training stopped on a non-finite loss or gradient; the
    /// checkpoints then hold the last good state.
    pub diverged: Option<String>,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,train_acc,val_acc,lr\n");
    for e in log {
        s.push_str(&format!("{},{:.6},{:.6},{:.6},{:.8}\n", e.epoch, e.train_loss, e.train_acc, e.val_acc, e.lr));
    }
    s
}

/// Classification accuracy in eval mode.
pub fn evaluate(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    let prev = model.mode();
    model.set_mode(Mode::Eval);
    let mut correct = 0;
    for start in (0..data.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(data.len());
        let logits = model.forward(&data.images.slice0(start, end)?)?;
        correct += ops::argmax_rows(&logits).iter().zip(&data.labels[start..end]).filter(|(p, l)| p == l).count();
    }
    model.set_mode(prev);
    Ok(correct as f64 / data.len().max(1) as f64)
}

fn flip_horizontal(x: &mut Tensor, sample: usize) {
    let [_, c, h, w] = *x.shape() else { return };
    let n = c * h * w;
    for row in x.data_mut()[sample * n..(sample + 1) * n].chunks_exact_mut(w) {
        row.reverse();
    }
}

/// One SGD step on a batch; returns the loss and the number of correct
/// predictions.
pub fn train_step(model: &mut Model, opt: &mut Sgd, x: &Tensor, labels: &[usize], lr: f64) -> Result<(f64, usize)> {
    model.set_mode(Mode::Train);
    let mut tape = Tape::new();
    let logits = model.forward_tape(&mut tape, x)?;
    let correct = ops::argmax_rows(tape.value(logits)).iter().zip(labels).filter(|(p, l)| p == l).count();
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    opt.step(&mut model.store, &grads, lr)?;
    Ok((value, correct))
}

/// Trains `model` in place. Shuffling and flips draw from a generator seeded
/// with `cfg.seed`, so identical inputs give bit-identical results.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train_set.num_classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            train_set.num_classes, model.config.num_classes
        )));
    }
    if cfg.batch_size < 2 || cfg.epochs == 0 {
        return Err(Error::Config("training needs batch_size ≥ 2 and epochs ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let n = train_set.len();
    let steps_per_epoch = n / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!("{n} training samples cannot fill a batch of {}", cfg.batch_size)));
    }
    let total = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::new();
    let mut last_checkpoint = checkpoint::to_bytes(model)?;
    let (mut best_checkpoint, mut best_val_acc, mut best_epoch) = (last_checkpoint.clone(), f64::NEG_INFINITY, 0);
    let mut t = 0;
    let mut diverged = None;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen, mut lr) = (0.0, 0, 0, cfg.lr0);
        for batch in order.chunks_exact(cfg.batch_size) {
            let mut x = train_set.images.gather0(batch)?;
            if cfg.flip {
                for i in 0..batch.len() {
                    if rng.gen_bool(0.5) {
                        flip_horizontal(&mut x, i);
                    }
                }
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            lr = cosine_lr(cfg.lr0, t, total);
            match train_step(model, &mut opt, &x, &labels, lr) {
                Ok((loss, c)) => {
                    loss_sum += loss * batch.len() as f64;
                    correct += c;
                    seen += batch.len();
                }
                Err(Error::NonFinite(msg)) => {
                    diverged = Some(format!("epoch {epoch}, step {t}: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            t += 1;
        }
        let val_acc = evaluate(model, val_set, 256)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc,
            lr,
        };
        on_epoch(&entry);
        log.push(entry);
        model.set_mode(Mode::Eval);
        last_checkpoint = checkpoint::to_bytes(model)?;
        if val_acc > best_val_acc {
            best_val_acc = val_acc;
            best_epoch = epoch;
            best_checkpoint = last_checkpoint.clone();
        }
    }
    model.set_mode(Mode::Eval);
    Ok(TrainOutcome { log, best_epoch, best_val_acc, best_checkpoint, last_checkpoint, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::ModelConfig;

    fn toy_model(seed: u64) -> Model {
        let mut cfg = ModelConfig::preset("toy-kdna").unwrap();
        cfg.num_classes = 2;
        cfg.input_size = 8;
        cfg.stages.truncate(2);
        Model::build(&cfg, seed).unwrap()
    }

    /// Two classes separated by the sign of the mean intensity.
    fn separable(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = (i % 2) as u8;
            let base = if l == 0 { 70.0 } else { 185.0 };
            pixels.extend((0..64).map(|_| (base + rng.gen_range(-40.0..40.0f64)) as u8));
            labels.push(l);
        }
        Dataset::from_u8(&[n, 1, 8, 8], &pixels, &labels, 2, None, "train").unwrap()
    }

    #[test]
    fn frozen_batch_loss_decreases() {
        let mut m = toy_model(0);
        let ds = separable(16, 1);
        let mut opt = Sgd::new(0.9, 1e-4);
        let mut prev = f64::INFINITY;
        for _ in 0..5 {
            let (loss, _) = train_step(&mut m, &mut opt, &ds.images, &ds.labels, 1e-2).unwrap();
            assert!(loss < prev, "{loss} !< {prev}");
            prev = loss;
        }
    }

    #[test]
    fn separable_task_is_learned_and_deterministic() {
        let ds = separable(200, 2);
        let cfg = TrainConfig { lr0: 0.05, epochs: 6, batch_size: 20, seed: 3, ..TrainConfig::default() };
        let mut a = toy_model(4);
        let out_a = train(&mut a, &ds, &ds, &cfg, |_| {}).unwrap();
        assert!(out_a.log.last().unwrap().train_acc >= 0.99, "{:?}", out_a.log);
        let mut b = toy_model(4);
        let out_b = train(&mut b, &ds, &ds, &cfg, |_| {}).unwrap();
        assert_eq!(out_a.last_checkpoint, out_b.last_checkpoint);
        assert_eq!(out_a.log, out_b.log);
        assert!(log_csv(&out_a.log).starts_with("epoch,train_loss,train_acc,val_acc,lr\n1,"));
    }

    #[test]
    fn every_adapter_parameter_moves() {
        let mut m = toy_model(5);
        let before = m.store.clone();
        let ds = separable(16, 6);
        let mut tape = Tape::new();
        m.set_mode(Mode::Train);
        let logits = m.forward_tape(&mut tape, &ds.images).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &ds.labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        Sgd::new(0.9, 0.0).step(&mut m.store, &grads, 0.1).unwrap();
        for (id, p) in m.store.iter() {
            if !p.name.contains(".adapter.") {
                continue;
            }
            let g = grads.param(id).expect("adapter parameter on tape");
            let zero_grad = g.data().iter().all(|&v| v == 0.0);
            assert!(zero_grad || p.value != *before.get(id), "{} did not move", p.name);
            assert!(!zero_grad || p.name.ends_with("fc1") || p.name.contains(".bn."), "{} has zero gradient", p.name);
        }
    }

    #[test]
    fn class_mismatch_rejected() {
        let mut m = toy_model(0);
        let mut ds = separable(4, 0);
        ds.num_classes = 3;
        assert!(matches!(train(&mut m, &ds, &ds, &TrainConfig::default(), |_| {}), Err(Error::Config(_))));
    }
}
