//! 2-D convolution with zero padding.
//!
//! `Y[b, m, i, j] = Σ_{n,p,q} W[m, n, p, q] · X[b, n, i·s + p − pad, j·s + q − pad] + bias[m]`
//!
//! Two implementations are kept side by side: [`conv2d_direct`] is the
//! nested-loop reference and [`conv2d`] lowers to im2col + GEMM over the whole
//! batch. They agree to ~1e-15 relative.

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::memtrack::LayerScope;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding, groups: 1 }
    }

    pub fn grouped(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride, padding, groups }
    }
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self::new(1, 0)
    }
}

/// `floor((extent + 2·padding − k) / stride) + 1`, or a shape error when the
/// kernel does not fit.
pub fn out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let padded = extent + 2 * padding;
    if k > padded {
        return Err(shape_err!("kernel {k} larger than padded extent {padded}"));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    cig: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

impl Dims {
    fn l(&self) -> usize {
        self.ho * self.wo
    }

    fn kk(&self) -> usize {
        self.cig * self.k * self.k
    }
}

fn dims(x_shape: &[usize], w_shape: &[usize], g: ConvGeom) -> Result<Dims> {
    if x_shape.len() != 4 {
        return Err(shape_err!("conv input must be rank 4 [b,c,h,w], got {x_shape:?}"));
    }
    if w_shape.len() != 4 {
        return Err(shape_err!("conv weight must be rank 4 [c_out,c_in,k,k], got {w_shape:?}"));
    }
    if w_shape[2] != w_shape[3] {
        return Err(shape_err!("only square kernels are supported, got {w_shape:?}"));
    }
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (co, cig, k) = (w_shape[0], w_shape[1], w_shape[2]);
    if g.groups == 0 || c % g.groups != 0 || co % g.groups != 0 {
        return Err(shape_err!("groups {} must divide c_in {c} and c_out {co}", g.groups));
    }
    if cig * g.groups != c {
        return Err(shape_err!("channel mismatch: input has {c} channels, weight expects {}", cig * g.groups));
    }
    let ho = out_extent(h, k, g.stride, g.padding)?;
    let wo = out_extent(w, k, g.stride, g.padding)?;
    Ok(Dims { b, c, h, w, co, cig, k, ho, wo })
}

/// Unrolls group `grp` of `x` into `col[(ci, p, q), (b, i, j)]`.
fn im2col(x: &[f64], d: &Dims, geom: ConvGeom, grp: usize, col: &mut [f64]) {
    let bl = d.b * d.l();
    let pad = geom.padding as isize;
    let s = geom.stride as isize;
    for ci in 0..d.cig {
        let chan = grp * d.cig + ci;
        for p in 0..d.k {
            for q in 0..d.k {
                let row = (ci * d.k + p) * d.k + q;
                let dst = &mut col[row * bl..(row + 1) * bl];
                // output columns j whose input column j·s + q − pad is inside
                let off = q as isize - pad;
                let j_lo = if off < 0 { ((-off + s - 1) / s) as usize } else { 0 }.min(d.wo);
                let j_hi = (((d.w as isize - off + s - 1) / s).max(0) as usize).clamp(j_lo, d.wo);
                for bi in 0..d.b {
                    let src = &x[(bi * d.c + chan) * d.h * d.w..(bi * d.c + chan + 1) * d.h * d.w];
                    let dst = &mut dst[bi * d.l()..(bi + 1) * d.l()];
                    for i in 0..d.ho {
                        let ih = i as isize * s + p as isize - pad;
                        let out_row = &mut dst[i * d.wo..(i + 1) * d.wo];
                        if ih < 0 || ih >= d.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src_row = &src[ih as usize * d.w..(ih as usize + 1) * d.w];
                        out_row[..j_lo].fill(0.0);
                        out_row[j_hi..].fill(0.0);
                        let first = (j_lo as isize * s + off) as usize;
                        if geom.stride == 1 {
                            out_row[j_lo..j_hi].copy_from_slice(&src_row[first..first + (j_hi - j_lo)]);
                        } else {
                            for (v, iw) in out_row[j_lo..j_hi].iter_mut().zip((first..).step_by(geom.stride)) {
                                *v = src_row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` back into `gx`.
fn col2im(col: &[f64], d: &Dims, geom: ConvGeom, grp: usize, gx: &mut [f64]) {
    let bl = d.b * d.l();
    let pad = geom.padding as isize;
    let s = geom.stride as isize;
    for ci in 0..d.cig {
        let chan = grp * d.cig + ci;
        for p in 0..d.k {
            for q in 0..d.k {
                let row = (ci * d.k + p) * d.k + q;
                let src = &col[row * bl..(row + 1) * bl];
                let off = q as isize - pad;
                let j_lo = if off < 0 { ((-off + s - 1) / s) as usize } else { 0 }.min(d.wo);
                let j_hi = (((d.w as isize - off + s - 1) / s).max(0) as usize).clamp(j_lo, d.wo);
                for bi in 0..d.b {
                    let dst = &mut gx[(bi * d.c + chan) * d.h * d.w..(bi * d.c + chan + 1) * d.h * d.w];
                    let src = &src[bi * d.l()..(bi + 1) * d.l()];
                    for i in 0..d.ho {
                        let ih = i as isize * s + p as isize - pad;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ih as usize * d.w..(ih as usize + 1) * d.w];
                        let first = (j_lo as isize * s + off) as usize;
                        let src_row = &src[i * d.wo + j_lo..i * d.wo + j_hi];
                        for (v, iw) in src_row.iter().zip((first..).step_by(geom.stride)) {
                            dst_row[iw] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Samples unrolled together: enough columns to keep the GEMM efficient,
/// few enough that the column buffer stays cache-sized.
fn chunk_len(d: &Dims) -> usize {
    const TARGET_COLS: usize = 512;
    const MAX_COL_VALUES: usize = 1 << 15;
    let by_cols = TARGET_COLS.div_ceil(d.l());
    let by_cache = (MAX_COL_VALUES / (d.kk() * d.l()).max(1)).max(1);
    by_cols.min(by_cache).clamp(1, d.b.max(1))
}

/// Core GEMM-lowered forward over raw buffers; `out` is `[b, co, ho, wo]`.
fn forward_raw(x: &[f64], w: &[f64], d: &Dims, geom: ConvGeom, out: &mut [f64]) {
    let cog = d.co / geom.groups;
    let (kk, l) = (d.kk(), d.l());
    let (xn, on) = (d.c * d.h * d.w, d.co * l);
    let chunk = chunk_len(d);
    let mut col = vec![0.0; kk * chunk * l];
    let mut prod = if chunk > 1 { vec![0.0; cog * chunk * l] } else { Vec::new() };
    for b0 in (0..d.b).step_by(chunk) {
        let nb = chunk.min(d.b - b0);
        let part = Dims { b: nb, ..*d };
        let cl = nb * l;
        let xs = &x[b0 * xn..(b0 + nb) * xn];
        for grp in 0..geom.groups {
            im2col(xs, &part, geom, grp, &mut col[..kk * cl]);
            let wg = MatRef::row_major(&w[grp * cog * kk..(grp + 1) * cog * kk], cog, kk);
            let colm = MatRef::row_major(&col[..kk * cl], kk, cl);
            if nb == 1 {
                gemm(wg, colm, &mut out[b0 * on + grp * cog * l..b0 * on + (grp + 1) * cog * l], 0.0);
                continue;
            }
            gemm(wg, colm, &mut prod[..cog * cl], 0.0);
            for m in 0..cog {
                for bi in 0..nb {
                    let dst = ((b0 + bi) * d.co + grp * cog + m) * l;
                    out[dst..dst + l].copy_from_slice(&prod[m * cl + bi * l..m * cl + (bi + 1) * l]);
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &Tensor, b: usize, co: usize, l: usize) -> Result<()> {
    if bias.shape() != [co] {
        return Err(shape_err!("bias shape {:?} does not match c_out {co}", bias.shape()));
    }
    for bi in 0..b {
        for (m, &bv) in bias.data().iter().enumerate() {
            out[(bi * co + m) * l..(bi * co + m + 1) * l].iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(())
}

/// im2col + GEMM convolution.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Result<Tensor> {
    let d = dims(x.shape(), w.shape(), geom)?;
    let mut out = vec![0.0; d.b * d.co * d.l()];
    forward_raw(x.data(), w.data(), &d, geom, &mut out);
    if let Some(bias) = bias {
        add_bias(&mut out, bias, d.b, d.co, d.l())?;
    }
    Tensor::from_vec(&[d.b, d.co, d.ho, d.wo], out)
}

/// Nested-loop reference convolution.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Result<Tensor> {
    let d = dims(x.shape(), w.shape(), geom)?;
    let cog = d.co / geom.groups;
    let mut out = Tensor::zeros(&[d.b, d.co, d.ho, d.wo]);
    let (xs, ws) = (x.data(), w.data());
    let pad = geom.padding as isize;
    let o = out.data_mut();
    for bi in 0..d.b {
        for m in 0..d.co {
            let grp = m / cog;
            for i in 0..d.ho {
                for j in 0..d.wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[m]);
                    for n in 0..d.cig {
                        let chan = grp * d.cig + n;
                        for p in 0..d.k {
                            let ih = (i * geom.stride) as isize + p as isize - pad;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            for q in 0..d.k {
                                let iw = (j * geom.stride) as isize + q as isize - pad;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                acc += ws[((m * d.cig + n) * d.k + p) * d.k + q]
                                    * xs[((bi * d.c + chan) * d.h + ih as usize) * d.w + iw as usize];
                            }
                        }
                    }
                    o[((bi * d.co + m) * d.ho + i) * d.wo + j] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Batch-grouped convolution: sample `b` is convolved with its own kernel
/// `kernels[b·|W| .. (b+1)·|W|]` of shape `w_shape`.
pub fn conv2d_per_sample(x: &Tensor, kernels: &[f64], w_shape: &[usize], geom: ConvGeom) -> Result<Tensor> {
    let d = dims(x.shape(), w_shape, geom)?;
    let wn: usize = w_shape.iter().product();
    if kernels.len() < d.b * wn {
        return Err(shape_err!("need {} per-sample kernel values, got {}", d.b * wn, kernels.len()));
    }
    let one = Dims { b: 1, ..d };
    let (xn, on) = (d.c * d.h * d.w, d.co * d.l());
    let mut out = vec![0.0; d.b * on];
    for bi in 0..d.b {
        forward_raw(
            &x.data()[bi * xn..(bi + 1) * xn],
            &kernels[bi * wn..(bi + 1) * wn],
            &one,
            geom,
            &mut out[bi * on..(bi + 1) * on],
        );
    }
    Tensor::from_vec(&[d.b, d.co, d.ho, d.wo], out)
}

/// Gradients of a convolution with respect to its three inputs.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(grad_out: &Tensor, x: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<ConvGrads> {
    let d = dims(x.shape(), w.shape(), geom)?;
    if grad_out.shape() != [d.b, d.co, d.ho, d.wo] {
        return Err(Error::Contract(format!(
            "conv backward: grad_out {:?} does not match forward output [{}, {}, {}, {}]",
            grad_out.shape(),
            d.b,
            d.co,
            d.ho,
            d.wo
        )));
    }
    let cog = d.co / geom.groups;
    let (kk, l) = (d.kk(), d.l());
    let go = grad_out.data();
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; d.co];
    for bi in 0..d.b {
        for (m, g) in gb.iter_mut().enumerate() {
            *g += go[(bi * d.co + m) * l..(bi * d.co + m + 1) * l].iter().sum::<f64>();
        }
    }
    let xn = d.c * d.h * d.w;
    let chunk = chunk_len(&d);
    let mut col = vec![0.0; kk * chunk * l];
    let mut gcol = vec![0.0; kk * chunk * l];
    let mut gmat = vec![0.0; cog * chunk * l];
    for b0 in (0..d.b).step_by(chunk) {
        let nb = chunk.min(d.b - b0);
        let part = Dims { b: nb, ..d };
        let cl = nb * l;
        let xs = &x.data()[b0 * xn..(b0 + nb) * xn];
        let gxs = &mut gx[b0 * xn..(b0 + nb) * xn];
        for grp in 0..geom.groups {
            im2col(xs, &part, geom, grp, &mut col[..kk * cl]);
            for m in 0..cog {
                for bi in 0..nb {
                    let src = ((b0 + bi) * d.co + grp * cog + m) * l;
                    gmat[m * cl + bi * l..m * cl + (bi + 1) * l].copy_from_slice(&go[src..src + l]);
                }
            }
            let gm = MatRef::row_major(&gmat[..cog * cl], cog, cl);
            gemm(
                gm,
                MatRef::row_major(&col[..kk * cl], kk, cl).t(),
                &mut gw[grp * cog * kk..(grp + 1) * cog * kk],
                1.0,
            );
            let wg = MatRef::row_major(&w.data()[grp * cog * kk..(grp + 1) * cog * kk], cog, kk);
            gemm(wg.t(), gm, &mut gcol[..kk * cl], 0.0);
            col2im(&gcol[..kk * cl], &part, geom, grp, gxs);
        }
    }
    Ok(ConvGrads {
        x: Tensor::from_vec(x.shape(), gx)?,
        w: Tensor::from_vec(w.shape(), gw)?,
        bias: Tensor::from_vec(&[d.co], gb)?,
    })
}

/// A standalone convolution layer owning its weights.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub geom: ConvGeom,
}

impl Conv2dLayer {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(shape_err!("conv weight must be rank 4, got {:?}", weight.shape()));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(Self { weight, bias, geom: ConvGeom::new(stride, padding) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let _scope = LayerScope::enter(self.weight.bytes());
        conv2d(x, &self.weight, self.bias.as_ref(), self.geom)
    }

    pub fn backward(&self, grad_out: &Tensor, x: &Tensor) -> Result<ConvGrads> {
        conv2d_backward(grad_out, x, &self.weight, self.geom)
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_rel_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, ConvGeom::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
        let y = conv2d(&x, &w, Some(&t(&[1], &[0.5])), ConvGeom::default()).unwrap();
        assert_eq!(y.data(), &[9.5]);
    }

    #[test]
    fn diagonal_kernel_hand_dot_product() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let w = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
        assert_eq!(conv2d(&x, &w, None, ConvGeom::default()).unwrap().data(), &[5.0]);
        assert_eq!(conv2d_direct(&x, &w, None, ConvGeom::default()).unwrap().data(), &[5.0]);
    }

    #[test]
    fn identity_kernel_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 1, 4, 5], 1.0, &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &w, None, ConvGeom::default()).unwrap(), x);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, None, ConvGeom::default()), Err(Error::Shape(_))));
        let w = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(matches!(conv2d(&x, &w, None, ConvGeom::default()), Err(Error::Shape(_))));
        assert_eq!(out_extent(7, 3, 2, 1).unwrap(), 4);
    }

    #[test]
    fn box_sum_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (h, w) in [(1, 1), (3, 5), (6, 6), (4, 2)] {
            let x = Tensor::randn(&[1, 1, h, w], 1.0, &mut rng);
            let k = Tensor::full(&[1, 1, 3, 3], 1.0);
            let y = conv2d(&x, &k, None, ConvGeom::new(1, 1)).unwrap();
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0;
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            let (a, b) = (i as i64 + di, j as i64 + dj);
                            if a >= 0 && b >= 0 && (a as usize) < h && (b as usize) < w {
                                s += x.at(&[0, 0, a as usize, b as usize]);
                            }
                        }
                    }
                    assert!((y.at(&[0, 0, i, j]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gemm_path_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(b, c, co, h, k, s, p, g) in &[
            (2, 3, 4, 5, 3, 1, 1, 1),
            (3, 4, 6, 7, 3, 2, 1, 2),
            (1, 4, 4, 6, 3, 1, 1, 4),
            (2, 2, 5, 6, 1, 2, 0, 1),
            (1, 3, 2, 9, 7, 2, 3, 1),
        ] {
            let x = Tensor::randn(&[b, c, h, h + 1], 1.0, &mut rng);
            let w = Tensor::randn(&[co, c / g, k, k], 1.0, &mut rng);
            let bias = Tensor::randn(&[co], 1.0, &mut rng);
            let geom = ConvGeom::grouped(s, p, g);
            let fast = conv2d(&x, &w, Some(&bias), geom).unwrap();
            let slow = conv2d_direct(&x, &w, Some(&bias), geom).unwrap();
            assert!(max_rel_diff(&fast, &slow) <= 1e-10);
        }
    }

    #[test]
    fn per_sample_kernels_match_individual_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 2, 5, 5], 1.0, &mut rng);
        let ks = Tensor::randn(&[3, 4, 2, 3, 3], 1.0, &mut rng);
        let y = conv2d_per_sample(&x, ks.data(), &[4, 2, 3, 3], ConvGeom::new(1, 1)).unwrap();
        for bi in 0..3 {
            let xb = x.slice0(bi, bi + 1).unwrap();
            let wb = ks.slice0(bi, bi + 1).unwrap().into_reshape(&[4, 2, 3, 3]).unwrap();
            let yb = conv2d_direct(&xb, &wb, None, ConvGeom::new(1, 1)).unwrap();
            assert!(max_rel_diff(&yb, &y.slice0(bi, bi + 1).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let g = conv2d_backward(&Tensor::zeros(&[2, 4, 5, 5]), &x, &w, ConvGeom::new(1, 1)).unwrap();
        assert_eq!(g.x.max_abs() + g.w.max_abs() + g.bias.max_abs(), 0.0);
        let bad = conv2d_backward(&Tensor::zeros(&[2, 4, 4, 4]), &x, &w, ConvGeom::new(1, 1));
        assert!(matches!(bad, Err(Error::Contract(_))));
    }

    #[test]
    fn one_by_one_weight_grad_is_scalar_chain_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[2, 1, 3, 3], 1.0, &mut rng);
        let go = Tensor::randn(&[2, 1, 3, 3], 1.0, &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 0.7);
        let g = conv2d_backward(&go, &x, &w, ConvGeom::default()).unwrap();
        let expect: f64 = x.data().iter().zip(go.data()).map(|(a, b)| a * b).sum();
        assert!((g.w.data()[0] - expect).abs() < 1e-12);
        assert!(max_rel_diff(&g.x, &go.scale(0.7)) < 1e-15);
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(s, p, g) in &[(1, 1, 1), (2, 1, 1), (1, 0, 2)] {
            let x = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 4 / g, 3, 3], 1.0, &mut rng);
            let geom = ConvGeom::grouped(s, p, g);
            let y = conv2d(&x, &w, None, geom).unwrap();
            let r = Tensor::randn(y.shape(), 1.0, &mut rng);
            let loss =
                |x: &Tensor, w: &Tensor| -> f64 { conv2d_direct(x, w, None, geom).unwrap().mul(&r).unwrap().sum() };
            let grads = conv2d_backward(&r, &x, &w, geom).unwrap();
            let h = 1e-5;
            let fd = |t: &Tensor, f: &dyn Fn(&Tensor) -> f64| -> Tensor {
                let mut out = Tensor::zeros(t.shape());
                for i in 0..t.numel() {
                    let mut tp = t.clone();
                    tp.data_mut()[i] += h;
                    let mut tm = t.clone();
                    tm.data_mut()[i] -= h;
                    out.data_mut()[i] = (f(&tp) - f(&tm)) / (2.0 * h);
                }
                out
            };
            let nx = fd(&x, &|xx| loss(xx, &w));
            let nw = fd(&w, &|ww| loss(&x, ww));
            assert!(max_rel_diff(&grads.x, &nx) <= 1e-6);
            assert!(max_rel_diff(&grads.w, &nw) <= 1e-6);
        }
    }
}
