//! Layer similarity (linear CKA) and adapter exports.
//!
//! Activations are taken after each slot's ReLU. Every spatial position of a
//! feature map is one row of the probe matrix; when two maps differ in
//! resolution the larger one is average-pooled down to the smaller first.

use std::path::{Path, PathBuf};

use crate::error::{shape_err, Error, Result};
use crate::io::write_atomic;
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;
use crate::topology::{Model, SlotKind};

/// Smallest sample set a grid is computed over.
pub const MIN_SAMPLES: usize = 64;
pub const DEFAULT_SAMPLES: usize = 256;

/// Post-activation feature map `[n, c, h, w]` of one conv slot.
#[derive(Clone, Debug)]
pub struct ActivationProbe {
    pub label: String,
    pub maps: Tensor,
}

/// Runs `x` through `model` and keeps every 3×3 slot's output.
pub fn probe(model: &Model, x: &Tensor) -> Result<Vec<ActivationProbe>> {
    let (_, probes) = model.forward_probed(x)?;
    Ok(probes.into_iter().map(|(label, maps)| ActivationProbe { label, maps }).collect())
}

fn column_gram(x: &[f64], n: usize, p: usize, y: &[f64], q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    gemm(MatRef::row_major(x, n, p).t(), MatRef::row_major(y, n, q), &mut out, 0.0);
    out
}

fn centered(m: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let &[n, p] = m.shape() else {
        return Err(shape_err!("probe matrix must be [n, features], got {:?}", m.shape()));
    };
    if n < 2 || p == 0 {
        return Err(Error::Degenerate(format!("linear CKA needs at least 2 rows and 1 column, got [{n}, {p}]")));
    }
    let mut data = m.data().to_vec();
    for j in 0..p {
        let mean = (0..n).map(|i| data[i * p + j]).sum::<f64>() / n as f64;
        (0..n).for_each(|i| data[i * p + j] -= mean);
    }
    Ok((data, n, p))
}

fn frob_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Linear CKA between `[n, p1]` and `[n, p2]`; columns are centred here.
pub fn linear_cka(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (x, n, p) = centered(a)?;
    let (y, m, q) = centered(b)?;
    if n != m {
        return Err(shape_err!("probe matrices have {n} and {m} rows"));
    }
    let xx = frob_sq(&column_gram(&x, n, p, &x, p)).sqrt();
    let yy = frob_sq(&column_gram(&y, n, q, &y, q)).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Degenerate("a probe is constant across samples".into()));
    }
    let yx = frob_sq(&column_gram(&y, n, q, &x, p));
    Ok((yx / (xx * yy)).clamp(0.0, 1.0))
}

/// Average-pools `[n, c, h, w]` to `side × side` and lays it out as rows of
/// `(sample, y, x)` with one column per channel.
fn rows_at(maps: &Tensor, side: usize) -> Result<Tensor> {
    let &[n, c, h, w] = maps.shape() else {
        return Err(shape_err!("feature map must be [n, c, h, w], got {:?}", maps.shape()));
    };
    if side == 0 || h % side != 0 || w % side != 0 || h / side != w / side {
        return Err(shape_err!("cannot pool a {h}×{w} map to {side}×{side}"));
    }
    let f = h / side;
    let norm = 1.0 / (f * f) as f64;
    let d = maps.data();
    let mut out = vec![0.0; n * side * side * c];
    for s in 0..n {
        for ch in 0..c {
            let plane = &d[(s * c + ch) * h * w..][..h * w];
            for (i, row) in plane.chunks_exact(w).enumerate() {
                for (j, v) in row.iter().enumerate() {
                    out[((s * side + i / f) * side + j / f) * c + ch] += v * norm;
                }
            }
        }
    }
    Tensor::from_vec(&[n * side * side, c], out)
}

fn side(p: &ActivationProbe) -> usize {
    p.maps.shape().get(2).copied().unwrap_or(0)
}

/// Similarities between two probe sets (rows from `a`, columns from `b`).
#[derive(Clone, Debug, PartialEq)]
pub struct CkaMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Row-major `[rows, cols]`.
    pub values: Vec<f64>,
}

impl CkaMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.col_labels.len() + j]
    }

    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    /// Header row of column labels, then one row per row label.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for l in &self.col_labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (i, l) in self.row_labels.iter().enumerate() {
            s.push_str(l);
            for j in 0..self.cols() {
                s.push_str(&format!(",{:.9}", self.get(i, j)));
            }
            s.push('\n');
        }
        s
    }

    /// Binary 8-bit heatmap, one pixel per cell, 0 black and 1 white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let pixels: Vec<u8> = self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        pgm(self.cols(), self.rows(), &pixels)
    }
}

fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Pairwise CKA between every probe of `a` and every probe of `b`. Both
/// sets must come from the same inputs in the same order.
pub fn cka_between(a: &[ActivationProbe], b: &[ActivationProbe]) -> Result<CkaMatrix> {
    let n = a.first().or(b.first()).map_or(0, |p| p.maps.shape()[0]);
    if n < MIN_SAMPLES {
        return Err(Error::Input(format!("CKA needs at least {MIN_SAMPLES} samples, got {n}")));
    }
    if let Some(p) = a.iter().chain(b).find(|p| p.maps.shape()[0] != n) {
        return Err(shape_err!("probe {} has {} samples, expected {n}", p.label, p.maps.shape()[0]));
    }
    let mut values = Vec::with_capacity(a.len() * b.len());
    for pa in a {
        for pb in b {
            let s = side(pa).min(side(pb));
            values.push(linear_cka(&rows_at(&pa.maps, s)?, &rows_at(&pb.maps, s)?)?);
        }
    }
    Ok(CkaMatrix {
        row_labels: a.iter().map(|p| p.label.clone()).collect(),
        col_labels: b.iter().map(|p| p.label.clone()).collect(),
        values,
    })
}

/// Square grid over one probe set. Only the upper triangle is computed; the
/// diagonal is 1 by definition.
pub fn cka_grid(probes: &[ActivationProbe]) -> Result<CkaMatrix> {
    let k = probes.len();
    let n = probes.first().map_or(0, |p| p.maps.shape()[0]);
    if n < MIN_SAMPLES {
        return Err(Error::Input(format!("CKA needs at least {MIN_SAMPLES} samples, got {n}")));
    }
    let mut values = vec![0.0; k * k];
    for i in 0..k {
        values[i * k + i] = 1.0;
        for j in i + 1..k {
            let s = side(&probes[i]).min(side(&probes[j]));
            let v = linear_cka(&rows_at(&probes[i].maps, s)?, &rows_at(&probes[j].maps, s)?)?;
            values[i * k + j] = v;
            values[j * k + i] = v;
        }
    }
    let labels: Vec<String> = probes.iter().map(|p| p.label.clone()).collect();
    Ok(CkaMatrix { row_labels: labels.clone(), col_labels: labels, values })
}

/// Mean CKA over pairs of slots that read the same kernel versus pairs in
/// the same stage that read different kernels. Returns `(within, cross)`.
pub fn kernel_group_similarity(model: &Model, grid: &CkaMatrix) -> Result<(f64, f64)> {
    let mut owner = Vec::new();
    for (si, stage) in model.stages.iter().enumerate() {
        for slot in &stage.slots {
            let kernel = match &slot.kind {
                SlotKind::Child(c) => Some(c.parent),
                _ => slot.kernel_param(),
            };
            owner.push((slot.label.clone(), si, kernel));
        }
    }
    let index = |label: &str| owner.iter().position(|(l, _, _)| l == label);
    let (mut within, mut cross) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..grid.rows() {
        for j in i + 1..grid.cols() {
            let (Some(a), Some(b)) = (index(&grid.row_labels[i]), index(&grid.col_labels[j])) else {
                continue;
            };
            let ((_, sa, ka), (_, sb, kb)) = (&owner[a], &owner[b]);
            if sa != sb || ka.is_none() || kb.is_none() {
                continue;
            }
            let acc = if ka == kb { &mut within } else { &mut cross };
            acc.0 += grid.get(i, j);
            acc.1 += 1;
        }
    }
    if within.1 == 0 || cross.1 == 0 {
        return Err(Error::Input("grid has no shared-kernel pairs to compare".into()));
    }
    Ok((within.0 / within.1 as f64, cross.0 / cross.1 as f64))
}

/// One child's spatial multiplier `1 + α_s`, `k × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap {
    pub label: String,
    pub k: usize,
    pub values: Vec<f64>,
}

impl SpatialMap {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.k) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.12}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Grey level `v / 2 · 255`, so the initial value 1 is mid-grey.
    pub fn to_pgm(&self) -> Vec<u8> {
        let pixels: Vec<u8> = self.values.iter().map(|v| (v / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        pgm(self.k, self.k, &pixels)
    }
}

/// Spatial multipliers of every child that has a spatial attention.
pub fn spatial_maps(model: &Model) -> Vec<SpatialMap> {
    model
        .slots()
        .filter_map(|s| {
            let id = s.child()?.adapter.spatial_attn?;
            let t = model.store.get(id);
            Some(SpatialMap {
                label: s.label.clone(),
                k: t.shape()[3],
                values: t.data().iter().map(|a| 1.0 + a).collect(),
            })
        })
        .collect()
}

/// Writes `attn_<layer>.pgm` and `attn_<layer>.csv` per child into `dir`.
pub fn export_spatial_attn(model: &Model, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for map in spatial_maps(model) {
        for (ext, bytes) in [("pgm", map.to_pgm()), ("csv", map.to_csv().into_bytes())] {
            let path = dir.join(format!("attn_{}.{ext}", map.label));
            write_atomic(&path, &bytes)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::ModelConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(n: usize, p: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, p], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = (0..k).map(|t| a.at(&[i, t]) * b.at(&[t, j])).sum();
            }
        }
        Tensor::from_vec(&[n, m], out).unwrap()
    }

    /// Gram–Schmidt on a random square matrix.
    fn orthogonal(p: usize, seed: u64) -> Tensor {
        let r = rand_mat(p, p, seed);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for j in 0..p {
            let mut v: Vec<f64> = (0..p).map(|i| r.at(&[i, j])).collect();
            for u in &cols {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
        Tensor::from_vec(&[p, p], (0..p * p).map(|i| cols[i % p][i / p]).collect()).unwrap()
    }

    /// HSIC ratio on explicit n×n Gram matrices.
    fn hsic_cka(x: &Tensor, y: &Tensor) -> f64 {
        let n = x.shape()[0];
        let gram = |m: &Tensor| {
            let p = m.shape()[1];
            let mut k = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    k[i * n + j] = (0..p).map(|t| m.at(&[i, t]) * m.at(&[j, t])).sum();
                }
            }
            k
        };
        let center = |k: Vec<f64>| {
            let mut h = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] = if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64;
                }
            }
            let mul = |a: &[f64], b: &[f64]| {
                let mut c = vec![0.0; n * n];
                for i in 0..n {
                    for t in 0..n {
                        for j in 0..n {
                            c[i * n + j] += a[i * n + t] * b[t * n + j];
                        }
                    }
                }
                c
            };
            mul(&mul(&h, &k), &h)
        };
        let (kx, ky) = (center(gram(x)), center(gram(y)));
        let hsic = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        hsic(&kx, &ky) / (hsic(&kx, &kx) * hsic(&ky, &ky)).sqrt()
    }

    #[test]
    fn matches_hsic_ratio() {
        for seed in 0..3 {
            let (x, y) = (rand_mat(64, 32, seed), rand_mat(64, 32, seed + 100));
            let v = linear_cka(&x, &y).unwrap();
            assert!((v - hsic_cka(&x, &y)).abs() <= 1e-9);
            assert!(v < 0.7, "independent matrices gave {v}");
        }
    }

    #[test]
    fn self_similarity_and_invariances() {
        let x = rand_mat(50, 7, 1);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() <= 1e-9);
        let y = rand_mat(50, 5, 2);
        let base = linear_cka(&x, &y).unwrap();
        let rotated = matmul(&x, &orthogonal(7, 3));
        assert!((linear_cka(&rotated, &y).unwrap() - base).abs() <= 1e-9);
        assert!((linear_cka(&x, &y.scale(-3.5)).unwrap() - base).abs() <= 1e-9);
        assert!((linear_cka(&x, &rotated).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(linear_cka(&rand_mat(1, 3, 0), &rand_mat(1, 3, 1)), Err(Error::Degenerate(_))));
        let constant = Tensor::full(&[10, 2], 4.0);
        assert!(matches!(linear_cka(&constant, &rand_mat(10, 3, 0)), Err(Error::Degenerate(_))));
        assert!(matches!(linear_cka(&rand_mat(10, 3, 0), &rand_mat(11, 3, 0)), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(seed in 0u64..1000, n in 3usize..20, p in 1usize..6, q in 1usize..6) {
            let (a, b) = (rand_mat(n, p, seed), rand_mat(n, q, seed ^ 77));
            let ab = linear_cka(&a, &b).unwrap();
            prop_assert!((ab - linear_cka(&b, &a).unwrap()).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }

    fn toy_probes(seed: u64) -> (Model, Vec<ActivationProbe>) {
        let m = Model::build(&ModelConfig::preset("toy-kdna").unwrap(), seed).unwrap();
        let x = Tensor::randn(&[64, 1, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let p = probe(&m, &x).unwrap();
        (m, p)
    }

    #[test]
    fn untrained_grid_contract() {
        let (m, probes) = toy_probes(0);
        let g = cka_grid(&probes).unwrap();
        assert_eq!(g.rows(), 18);
        for i in 0..g.rows() {
            assert_eq!(g.get(i, i), 1.0);
            for j in 0..g.cols() {
                assert_eq!(g.get(i, j), g.get(j, i));
                assert!((0.0..=1.0).contains(&g.get(i, j)));
            }
        }
        assert_eq!(g, cka_grid(&probes).unwrap());
        // computed diagonal agrees with the shortcut
        let full = cka_between(&probes, &probes).unwrap();
        for i in 0..g.rows() {
            assert!((full.get(i, i) - 1.0).abs() <= 1e-9);
        }
        let (w, c) = kernel_group_similarity(&m, &g).unwrap();
        assert!(w.is_finite() && c.is_finite());
    }

    #[test]
    fn too_few_samples() {
        let m = Model::build(&ModelConfig::preset("toy-kdna").unwrap(), 0).unwrap();
        let x = Tensor::randn(&[8, 1, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(cka_grid(&probe(&m, &x).unwrap()), Err(Error::Input(_))));
    }

    #[test]
    fn pooling_folds_space_into_rows() {
        let maps = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(rows_at(&maps, 2).unwrap().data(), &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        assert_eq!(rows_at(&maps, 1).unwrap().data(), &[2.5, 25.0]);
        assert!(rows_at(&maps, 3).is_err());
    }

    /// Minimal binary PGM reader.
    fn read_pgm(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap().to_string());
        }
        assert_eq!(fields[0], "P5");
        assert_eq!(fields[3], "255");
        let (w, h): (usize, usize) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
        let data = bytes[pos + 1..].to_vec();
        assert_eq!(data.len(), w * h);
        (w, h, data)
    }

    #[test]
    fn exports_round_trip() {
        let (_, probes) = toy_probes(1);
        let g = cka_grid(&probes[..3]).unwrap();
        let (w, h, px) = read_pgm(&g.to_pgm());
        assert_eq!((w, h), (3, 3));
        assert_eq!(px[0], 255);
        assert_eq!(px[1], (g.get(0, 1) * 255.0).round() as u8);
        let csv = g.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,stage1.slot1,stage1.slot2,stage1.slot3");
        let cell: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
        assert!((cell - g.get(0, 1)).abs() < 1e-9);
    }

    #[test]
    fn untrained_spatial_maps_are_uniform() {
        let m = Model::build(&ModelConfig::preset("toy-kdna").unwrap(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_spatial_attn(&m, dir.path()).unwrap();
        assert_eq!(files.len(), 2 * 9);
        let (w, h, px) = read_pgm(&std::fs::read(dir.path().join("attn_stage1.slot2.pgm")).unwrap());
        assert_eq!((w, h), (3, 3));
        assert!(px.iter().all(|&p| p == 128));
        let csv = std::fs::read_to_string(dir.path().join("attn_stage1.slot2.csv")).unwrap();
        assert!(csv.split([',', '\n']).filter(|s| !s.is_empty()).all(|v| v.parse::<f64>().unwrap() == 1.0));
    }
}
