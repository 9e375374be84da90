//! In-memory labelled image sets and the synthetic grating task.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::idx;

/// Per-channel mean and standard deviation of pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, c, h, w]`, normalised.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub norm: Normalization,
    pub split: String,
}

impl Dataset {
    /// Builds a dataset from raw bytes `[n, c, h, w]`, scaling to `[0, 1]`
    /// and normalising with `norm` (or with its own statistics).
    pub fn from_u8(
        dims: &[usize],
        pixels: &[u8],
        labels: &[u8],
        num_classes: usize,
        norm: Option<&Normalization>,
        split: &str,
    ) -> Result<Self> {
        let [n, c, h, w] = *dims else {
            return Err(Error::Input(format!("images must be [n, c, h, w], got {dims:?}")));
        };
        if labels.len() != n {
            return Err(Error::Input(format!("{n} images but {} labels", labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_classes) {
            return Err(Error::Input(format!("label {l} at index {i} is out of range for {num_classes} classes")));
        }
        let raw: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let norm = match norm {
            Some(nm) if nm.mean.len() == c => nm.clone(),
            Some(_) => return Err(Error::Input("normalisation channel count mismatch".into())),
            None => channel_stats(&raw, n, c, h * w),
        };
        let mut images = Tensor::from_vec(&[n, c, h, w], raw)?;
        for (i, v) in images.data_mut().iter_mut().enumerate() {
            let ch = (i / (h * w)) % c;
            *v = (*v - norm.mean[ch]) / norm.std[ch];
        }
        Ok(Self {
            images,
            labels: labels.iter().map(|&l| l as usize).collect(),
            num_classes,
            norm,
            split: split.into(),
        })
    }

    /// Reads `<split>-images.idx` and `<split>-labels.idx` from `dir`.
    pub fn load_idx(dir: &Path, split: &str, num_classes: usize, norm: Option<&Normalization>) -> Result<Self> {
        let images = idx::read(&dir.join(format!("{split}-images.idx")))?;
        let labels = idx::read(&dir.join(format!("{split}-labels.idx")))?;
        if labels.dims.len() != 1 {
            return Err(Error::Format { offset: 0, msg: "label file must be one-dimensional".into() });
        }
        let dims = match *images.dims.as_slice() {
            [n, h, w] => vec![n, 1, h, w],
            [n, c, h, w] => vec![n, c, h, w],
            _ => return Err(Error::Format { offset: 0, msg: "image file must have 3 or 4 dimensions".into() }),
        };
        Self::from_u8(&dims, &images.data, &labels.data, num_classes, norm, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<Tensor> {
        self.images.slice0(0, n.min(self.len()))
    }
}

fn channel_stats(raw: &[f64], n: usize, c: usize, hw: usize) -> Normalization {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (i, &v) in raw.iter().enumerate() {
        let ch = (i / hw) % c;
        mean[ch] += v;
        sq[ch] += v * v;
    }
    let mean: Vec<f64> = mean.iter().map(|m| m / count).collect();
    let std = sq.iter().zip(&mean).map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-6)).collect();
    Normalization { mean, std }
}

/// Parameters of the synthetic task.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub classes: usize,
    /// Standard deviation of the additive pixel noise, in grating amplitudes.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { size: 16, classes: 4, noise: 0.9 }
    }
}

/// Single-channel images of a windowed sinusoidal grating whose orientation
/// (`class · π / classes`) is the label, with a weaker distractor grating of
/// random orientation and Gaussian pixel noise. Returns `(pixels, labels)`
/// with pixels laid out `[n, size, size]`.
pub fn synth_gratings(n: usize, spec: &SynthSpec, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.size;
    let mut pixels = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(0..spec.classes);
        let theta = class as f64 * std::f64::consts::PI / spec.classes as f64 + rng.gen_range(-0.12..0.12);
        let freq = rng.gen_range(0.25..0.55);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let (cx, cy) = (rng.gen_range(0.3..0.7) * s as f64, rng.gen_range(0.3..0.7) * s as f64);
        let radius = rng.gen_range(0.25..0.45) * s as f64;
        let d_theta = rng.gen_range(0.0..std::f64::consts::PI);
        let d_freq = rng.gen_range(0.25..0.55);
        let d_amp = rng.gen_range(0.2..0.5);
        let contrast = rng.gen_range(0.5..1.0);
        for y in 0..s {
            for x in 0..s {
                let (fx, fy) = (x as f64, y as f64);
                let r2 = ((fx - cx).powi(2) + (fy - cy).powi(2)) / (radius * radius);
                let window = (-r2).exp();
                let g = (freq * (fx * theta.cos() + fy * theta.sin()) + phase).sin();
                let d = (d_freq * (fx * d_theta.cos() + fy * d_theta.sin())).sin();
                let noise: f64 = rng.sample(StandardNormal);
                let v = contrast * (window * g + d_amp * (1.0 - window) * d) + spec.noise * 0.5 * noise;
                pixels.push((128.0 + 100.0 * v).round().clamp(0.0, 255.0) as u8);
            }
        }
        labels.push(class as u8);
    }
    (pixels, labels)
}

/// Writes train and validation splits of the synthetic task into `dir`.
pub fn write_synth(dir: &Path, n_train: usize, n_val: usize, spec: &SynthSpec, seed: u64) -> Result<()> {
    for (split, n, s) in [("train", n_train, seed), ("val", n_val, seed.wrapping_add(0x9e37_79b9))] {
        let (pixels, labels) = synth_gratings(n, spec, s);
        idx::write(&dir.join(format!("{split}-images.idx")), &[n, spec.size, spec.size], &pixels)?;
        idx::write(&dir.join(format!("{split}-labels.idx")), &[n], &labels)?;
    }
    Ok(())
}

/// Both splits of the synthetic task in memory, validation normalised with
/// training statistics.
pub fn synth_splits(n_train: usize, n_val: usize, spec: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let (p, l) = synth_gratings(n_train, spec, seed);
    let train = Dataset::from_u8(&[n_train, 1, spec.size, spec.size], &p, &l, spec.classes, None, "train")?;
    let (p, l) = synth_gratings(n_val, spec, seed.wrapping_add(0x9e37_79b9));
    let val = Dataset::from_u8(&[n_val, 1, spec.size, spec.size], &p, &l, spec.classes, Some(&train.norm), "val")?;
    Ok((train, val))
}
