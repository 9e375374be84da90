//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a shape plus a flat buffer. Every extent is at least one
//! and `shape.iter().product() == data.len()` always holds. Broadcasting
//! aligns trailing dimensions, so `[1, 1, 3, 3]` broadcasts against
//! `[2, 3, 3, 3]` and `[3, 1, 1, 1]` against `[3, 4, 3, 3]`.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(shape_err!("tensor rank must be at least 1"));
    }
    if let Some(d) = shape.iter().position(|&e| e == 0) {
        return Err(shape_err!("extent of dimension {d} is zero in {shape:?}"));
    }
    Ok(())
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Output shape of a trailing-aligned broadcast between `a` and `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let eb = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => return Err(Error::Broadcast { dim: i, left: x, right: y }),
        };
    }
    Ok(out)
}

/// Strides of `shape` when read through an `out` shape: broadcast dims get 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let lead = out.len() - shape.len();
    (0..out.len()).map(|i| if i < lead || shape[i - lead] == 1 { 0 } else { own[i - lead] }).collect()
}

/// Walks an output shape in row-major order, yielding the flat offsets into
/// two broadcast operands.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // advance the odometer over all but the innermost dimension
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], fill: f64) -> Result<Self> {
        check_extents(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![fill; shape.iter().product()] })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_extents(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {shape:?} needs {n} elements, got {}", data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Panicking constructor for shapes that are known-valid by construction.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, 0.0).expect("valid shape")
    }

    pub fn full(shape: &[usize], fill: f64) -> Self {
        Self::new(shape, fill).expect("valid shape")
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::from_vec(shape, data).expect("valid shape")
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::from_vec(shape, data).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Byte footprint of the payload.
    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(self.strides()).map(|(i, s)| i * s).sum()
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err!("expected a single element, shape is {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn zip_broadcast(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        let out = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out);
        let sb = broadcast_strides(&other.shape, &out);
        let mut data = vec![0.0; out.iter().product()];
        for_each_broadcast(&out, &sa, &sb, |o, a, b| data[o] = f(self.data[a], other.data[b]));
        Ok(Tensor { shape: out, data })
    }

    /// Elementwise product with trailing-aligned broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, |a, b| a * b)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(|v| v + s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("add_assign: {:?} vs {:?}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sums `self` down to `shape`, the adjoint of broadcasting `shape` up to
    /// `self.shape()`.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let out = broadcast_shape(shape, &self.shape)?;
        if out != self.shape {
            return Err(shape_err!("cannot reduce {:?} to {shape:?}", self.shape));
        }
        let st = broadcast_strides(shape, &out);
        let zero = vec![0; out.len()];
        let mut acc = Tensor::zeros(shape);
        for_each_broadcast(&out, &st, &zero, |o, t, _| acc.data[t] += self.data[o]);
        Ok(acc)
    }

    /// Product of `a` and `b` summed down to `shape`, without materialising the
    /// broadcast product. This is the backward rule of broadcast multiply.
    pub fn mul_sum_to_shape(a: &Tensor, b: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let out = broadcast_shape(&a.shape, &b.shape)?;
        if a.shape == out && b.shape == out && shape == out.as_slice() {
            return a.mul(b);
        }
        let sa = broadcast_strides(&a.shape, &out);
        let sb = broadcast_strides(&b.shape, &out);
        let st = broadcast_strides(shape, &out);
        let mut acc = Tensor::zeros(shape);
        // Walk (a, b) and recover the target offset from the same odometer.
        let rank = out.len();
        let mut idx = vec![0usize; rank];
        let total: usize = out.iter().product();
        let (mut oa, mut ob, mut ot) = (0usize, 0usize, 0usize);
        for _ in 0..total {
            acc.data[ot] += a.data[oa] * b.data[ob];
            let mut d = rank;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                oa += sa[d];
                ob += sb[d];
                ot += st[d];
                if idx[d] < out[d] {
                    break;
                }
                oa -= sa[d] * out[d];
                ob -= sb[d] * out[d];
                ot -= st[d] * out[d];
                idx[d] = 0;
            }
        }
        Ok(acc)
    }

    /// Concatenates tensors along the leading dimension.
    pub fn concat0(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(shape_err!("concat: {:?} vs {:?}", p.shape, first.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Tensor::from_vec(&shape, data)
    }

    /// Rows `start..end` of the leading dimension.
    pub fn slice0(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.shape[0] {
            return Err(shape_err!("slice {start}..{end} out of range for {:?}", self.shape));
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::from_vec(&shape, self.data[start * row..end * row].to_vec())
    }

    /// Gathers rows of the leading dimension.
    pub fn gather0(&self, rows: &[usize]) -> Result<Tensor> {
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(shape_err!("row {r} out of range for {:?}", self.shape));
            }
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::from_vec(&shape, data)
    }

    const MAGIC: &'static [u8; 4] = b"KTNS";

    /// Writes the little-endian `KTNS` encoding: magic, u32 rank, u32
    /// extents, f64 payload.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.rank() + 8 * self.numel());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one `KTNS` record. `base` is the stream position of the record,
    /// used only to report byte offsets in errors.
    pub fn read_from<R: Read>(r: &mut R, base: u64) -> Result<Tensor> {
        let fmt = |offset: u64, msg: &str| Error::Format { offset, msg: msg.to_string() };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fmt(base, "truncated tensor header"))?;
        if &magic != Self::MAGIC {
            return Err(fmt(base, "bad tensor magic, expected KTNS"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| fmt(base + 4, "truncated tensor rank"))?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank == 0 || rank > 8 {
            return Err(fmt(base + 4, "tensor rank out of range"));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let off = base + 8 + 4 * i as u64;
            r.read_exact(&mut word).map_err(|_| fmt(off, "truncated tensor extents"))?;
            let e = u32::from_le_bytes(word) as usize;
            if e == 0 {
                return Err(fmt(off, "zero tensor extent"));
            }
            shape.push(e);
        }
        let n: usize = shape.iter().product();
        let payload = base + 8 + 4 * rank as u64;
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|_| fmt(payload, "truncated tensor payload"))?;
        let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::from_vec(&shape, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cursor = bytes;
        let t = Self::read_from(&mut cursor, 0)?;
        if !cursor.is_empty() {
            return Err(Error::Format { offset: (bytes.len() - cursor.len()) as u64, msg: "trailing bytes".into() });
        }
        Ok(t)
    }
}

/// Max over elements of |a - b|, normalised by the larger of the two
/// infinity norms. Zero when both are zero.
pub fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_diff shape mismatch");
    let scale = a.max_abs().max(b.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
