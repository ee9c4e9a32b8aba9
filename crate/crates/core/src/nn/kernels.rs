//! Forward and backward kernels on raw tensors.
//!
//! Convolutions go through im2col and a plain row-major GEMM. Batch samples
//! are processed in parallel; every reduction across samples is summed in
//! sample order so results do not depend on thread scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize, groups: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            groups,
        }
    }

    /// Output extent of a forward convolution over `n` input cells.
    pub fn out_size(&self, n: usize) -> Result<usize> {
        let padded = n + 2 * self.pad;
        if padded < self.kernel {
            return Err(Error::invalid(format!(
                "input extent {n} smaller than kernel {}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

// ---------------------------------------------------------------------------
// GEMM helpers. All accumulate into `c`.

/// `c[m x n] += a[m x k] * b[k x n]`
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m x n] += a^T * b` where `a` is stored `[k x m]` and `b` is `[k x n]`.
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

/// `c[m x n] += a * b^T` where `a` is `[m x k]` and `b` is stored `[n x k]`.
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

// ---------------------------------------------------------------------------
// im2col / col2im for one sample and a contiguous channel range.

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    channels: usize,
    h: usize,
    w: usize,
    geom: &ConvGeom,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let k = geom.kernel;
    let mut cols = vec![T::zero(); channels * k * k * oh * ow];
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `dst` (accumulating).
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    geom: &ConvGeom,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    let k = geom.kernel;
    for c in 0..channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sum_in_order<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Convolution

fn check_conv(x: &Tensor<impl Scalar>, w: &Tensor<impl Scalar>, geom: &ConvGeom) -> Result<()> {
    let (_, cin, _, _) = x.dims4();
    if w.shape().len() != 4 {
        return Err(Error::invalid(format!("conv weight must be rank 4, got {:?}", w.shape())));
    }
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if geom.groups == 0 || cin % geom.groups != 0 || cout % geom.groups != 0 {
        return Err(Error::invalid(format!(
            "groups {} must divide in {cin} and out {cout} channels",
            geom.groups
        )));
    }
    if cin_g * geom.groups != cin || kh != geom.kernel || kw != geom.kernel {
        return Err(Error::invalid(format!(
            "conv weight {:?} does not match input channels {cin} / geometry {geom:?}",
            w.shape()
        )));
    }
    Ok(())
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    check_conv(x, w, &geom)?;
    let (n, cin, h, wd) = x.dims4();
    let cout = w.shape()[0];
    let (oh, ow) = (geom.out_size(h)?, geom.out_size(wd)?);
    let (cin_g, cout_g) = (cin / geom.groups, cout / geom.groups);
    let kk = cin_g * geom.kernel * geom.kernel;
    let ohw = oh * ow;
    let in_len = cin * h * wd;
    let out_len = cout * ohw;

    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(s, dst)| {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        for g in 0..geom.groups {
            let src = &xs[g * cin_g * h * wd..(g + 1) * cin_g * h * wd];
            let wg = &w.data()[g * cout_g * kk..(g + 1) * cout_g * kk];
            let og = &mut dst[g * cout_g * ohw..(g + 1) * cout_g * ohw];
            if geom.is_pointwise() {
                gemm_nn(wg, src, og, cout_g, kk, ohw);
            } else {
                let cols = im2col(src, cin_g, h, wd, &geom, oh, ow);
                gemm_nn(wg, &cols, og, cout_g, kk, ohw);
            }
        }
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                for v in &mut dst[co * ohw..(co + 1) * ohw] {
                    *v += bv;
                }
            }
        }
    });
    Tensor::from_vec(&[n, cout, oh, ow], out)
}

/// Returns `(dx, dw, db)`; `dx` only when `need_dx`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geom: ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, cin, h, wd) = x.dims4();
    let (_, cout, oh, ow) = dy.dims4();
    let (cin_g, cout_g) = (cin / geom.groups, cout / geom.groups);
    let kk = cin_g * geom.kernel * geom.kernel;
    let ohw = oh * ow;
    let in_len = cin * h * wd;
    let out_len = cout * ohw;

    let per_sample: Vec<(Option<Vec<T>>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let xs = &x.data()[s * in_len..(s + 1) * in_len];
            let dys = &dy.data()[s * out_len..(s + 1) * out_len];
            let mut dw = vec![T::zero(); w.numel()];
            let mut dx = need_dx.then(|| vec![T::zero(); in_len]);
            for g in 0..geom.groups {
                let src = &xs[g * cin_g * h * wd..(g + 1) * cin_g * h * wd];
                let dyg = &dys[g * cout_g * ohw..(g + 1) * cout_g * ohw];
                let wg = &w.data()[g * cout_g * kk..(g + 1) * cout_g * kk];
                let dwg = &mut dw[g * cout_g * kk..(g + 1) * cout_g * kk];
                if geom.is_pointwise() {
                    gemm_nt(dyg, src, dwg, cout_g, ohw, kk);
                    if let Some(dx) = dx.as_mut() {
                        let dxg = &mut dx[g * cin_g * h * wd..(g + 1) * cin_g * h * wd];
                        gemm_tn(wg, dyg, dxg, kk, cout_g, ohw);
                    }
                } else {
                    let cols = im2col(src, cin_g, h, wd, &geom, oh, ow);
                    gemm_nt(dyg, &cols, dwg, cout_g, ohw, kk);
                    if let Some(dx) = dx.as_mut() {
                        let mut dcols = vec![T::zero(); kk * ohw];
                        gemm_tn(wg, dyg, &mut dcols, kk, cout_g, ohw);
                        let dxg = &mut dx[g * cin_g * h * wd..(g + 1) * cin_g * h * wd];
                        col2im(&dcols, cin_g, h, wd, &geom, oh, ow, dxg);
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let mut db = vec![T::zero(); cout];
    for s in 0..n {
        let dys = &dy.data()[s * out_len..(s + 1) * out_len];
        for (co, b) in db.iter_mut().enumerate() {
            *b += dys[co * ohw..(co + 1) * ohw].iter().copied().sum::<T>();
        }
    }
    let mut dxs = Vec::with_capacity(if need_dx { n * in_len } else { 0 });
    let mut dws = Vec::with_capacity(n);
    for (dx, dw) in per_sample {
        if let Some(dx) = dx {
            dxs.extend(dx);
        }
        dws.push(dw);
    }
    let dw = Tensor::from_vec(w.shape(), sum_in_order(dws, w.numel())).expect("dw shape");
    let dx = need_dx.then(|| Tensor::from_vec(x.shape(), dxs).expect("dx shape"));
    (dx, dw, Tensor::from_vec(&[cout], db).expect("db shape"))
}

// ---------------------------------------------------------------------------
// Transposed convolution. Weight layout `[C_in, C_out / groups, k, k]`.

pub fn conv_transpose2d_out_size(n: usize, geom: &ConvGeom, output_pad: usize) -> usize {
    (n - 1) * geom.stride + geom.kernel + output_pad - 2 * geom.pad
}

pub fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
    output_pad: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, wd) = x.dims4();
    if w.shape().len() != 4 || w.shape()[0] != cin || w.shape()[2] != geom.kernel {
        return Err(Error::invalid(format!(
            "transposed conv weight {:?} does not match input channels {cin}",
            w.shape()
        )));
    }
    if cin % geom.groups != 0 {
        return Err(Error::invalid(format!("groups {} must divide {cin}", geom.groups)));
    }
    let cin_g = cin / geom.groups;
    let cout_g = w.shape()[1];
    let cout = cout_g * geom.groups;
    let oh = conv_transpose2d_out_size(h, &geom, output_pad);
    let ow = conv_transpose2d_out_size(wd, &geom, output_pad);
    if geom.out_size(oh)? != h || geom.out_size(ow)? != wd {
        return Err(Error::invalid("inconsistent transposed conv geometry"));
    }
    let kk = cout_g * geom.kernel * geom.kernel;
    let hw = h * wd;
    let in_len = cin * hw;
    let out_len = cout * oh * ow;

    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(s, dst)| {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        for g in 0..geom.groups {
            let xg = &xs[g * cin_g * hw..(g + 1) * cin_g * hw];
            let wg = &w.data()[g * cin_g * kk..(g + 1) * cin_g * kk];
            let mut cols = vec![T::zero(); kk * hw];
            gemm_tn(wg, xg, &mut cols, kk, cin_g, hw);
            let og = &mut dst[g * cout_g * oh * ow..(g + 1) * cout_g * oh * ow];
            col2im(&cols, cout_g, oh, ow, &geom, h, wd, og);
        }
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                for v in &mut dst[co * oh * ow..(co + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
    });
    Tensor::from_vec(&[n, cout, oh, ow], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geom: ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, cin, h, wd) = x.dims4();
    let (_, cout, oh, ow) = dy.dims4();
    let cin_g = cin / geom.groups;
    let cout_g = cout / geom.groups;
    let kk = cout_g * geom.kernel * geom.kernel;
    let hw = h * wd;
    let in_len = cin * hw;
    let out_len = cout * oh * ow;

    let per_sample: Vec<(Option<Vec<T>>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let xs = &x.data()[s * in_len..(s + 1) * in_len];
            let dys = &dy.data()[s * out_len..(s + 1) * out_len];
            let mut dw = vec![T::zero(); w.numel()];
            let mut dx = need_dx.then(|| vec![T::zero(); in_len]);
            for g in 0..geom.groups {
                let dyg = &dys[g * cout_g * oh * ow..(g + 1) * cout_g * oh * ow];
                let dcols = im2col(dyg, cout_g, oh, ow, &geom, h, wd);
                let xg = &xs[g * cin_g * hw..(g + 1) * cin_g * hw];
                let wg = &w.data()[g * cin_g * kk..(g + 1) * cin_g * kk];
                gemm_nt(xg, &dcols, &mut dw[g * cin_g * kk..(g + 1) * cin_g * kk], cin_g, hw, kk);
                if let Some(dx) = dx.as_mut() {
                    gemm_nn(wg, &dcols, &mut dx[g * cin_g * hw..(g + 1) * cin_g * hw], cin_g, kk, hw);
                }
            }
            (dx, dw)
        })
        .collect();

    let mut db = vec![T::zero(); cout];
    for s in 0..n {
        let dys = &dy.data()[s * out_len..(s + 1) * out_len];
        for (co, b) in db.iter_mut().enumerate() {
            *b += dys[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum::<T>();
        }
    }
    let mut dxs = Vec::new();
    let mut dws = Vec::with_capacity(n);
    for (dx, dw) in per_sample {
        if let Some(dx) = dx {
            dxs.extend(dx);
        }
        dws.push(dw);
    }
    let dw = Tensor::from_vec(w.shape(), sum_in_order(dws, w.numel())).expect("dw shape");
    let dx = need_dx.then(|| Tensor::from_vec(x.shape(), dxs).expect("dx shape"));
    (dx, dw, Tensor::from_vec(&[cout], db).expect("db shape"))
}

// ---------------------------------------------------------------------------
// Max pooling (padding cells never win).

pub fn max_pool2d_forward<T: Scalar>(x: &Tensor<T>, geom: ConvGeom) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (geom.out_size(h)?, geom.out_size(w)?);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..geom.kernel {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..geom.kernel {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(plane * h * w + best_idx);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, argmax))
}

pub fn max_pool2d_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        d[idx] += g;
    }
    dx
}

// ---------------------------------------------------------------------------
// Nearest-neighbour 2x upsampling.

pub fn upsample_nearest2x_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out).expect("upsample shape")
}

pub fn upsample_nearest2x_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &dy.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], dx).expect("upsample grad shape")
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

pub struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, used for running statistics.
    pub batch_var: Vec<T>,
}

pub fn batch_norm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor<T>, BatchNormSaved<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let m = n * hw;
    let mf = T::from_usize_lossy(m);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for s_i in 0..n {
            let base = (s_i * c + ch) * hw;
            s += x.data()[base..base + hw].iter().copied().sum::<T>();
        }
        let mu = s / mf;
        let mut v = T::zero();
        for s_i in 0..n {
            let base = (s_i * c + ch) * hw;
            for &xv in &x.data()[base..base + hw] {
                v += (xv - mu) * (xv - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / mf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    for s_i in 0..n {
        for ch in 0..c {
            let base = (s_i * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let unbiased = if m > 1 {
        let scale = mf / T::from_usize_lossy(m - 1);
        var.iter().map(|&v| v * scale).collect()
    } else {
        var.clone()
    };
    (
        Tensor::from_vec(x.shape(), out).expect("bn shape"),
        BatchNormSaved {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: unbiased,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)` for training-mode batch norm.
pub fn batch_norm_train_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &[T],
    saved: &BatchNormSaved<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = dy.dims4();
    let hw = h * w;
    let mf = T::from_usize_lossy(n * hw);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s_i in 0..n {
        for ch in 0..c {
            let base = (s_i * c + ch) * hw;
            for i in base..base + hw {
                dbeta[ch] += dy.data()[i];
                dgamma[ch] += dy.data()[i] * saved.xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.numel()];
    for s_i in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * saved.inv_std[ch] / mf;
            let base = (s_i * c + ch) * hw;
            for i in base..base + hw {
                dx[i] = k * (mf * dy.data()[i] - dbeta[ch] - saved.xhat[i] * dgamma[ch]);
            }
        }
    }
    (Tensor::from_vec(dy.shape(), dx).expect("bn grad shape"), dgamma, dbeta)
}

/// Inference-mode batch norm: returns `(y, xhat)`.
pub fn batch_norm_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> (Tensor<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    for s_i in 0..n {
        for ch in 0..c {
            let inv = T::one() / (running_var[ch] + eps).sqrt();
            let base = (s_i * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x.data()[i] - running_mean[ch]) * inv;
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (Tensor::from_vec(x.shape(), out).expect("bn shape"), xhat)
}

// ---------------------------------------------------------------------------
// Fully connected: x `[R, In]`, w `[Out, In]`, b `[Out]`.

pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (r, fin) = x.dims2();
    let (fout, win) = w.dims2();
    if fin != win {
        return Err(Error::invalid(format!(
            "linear layer expects {win} features, got {fin}"
        )));
    }
    let mut out = vec![T::zero(); r * fout];
    gemm_nt(x.data(), w.data(), &mut out, r, fin, fout);
    if let Some(b) = b {
        for row in out.chunks_mut(fout) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Tensor::from_vec(&[r, fout], out)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (r, fin) = x.dims2();
    let (_, fout) = dy.dims2();
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); r * fin];
        gemm_nn(dy.data(), w.data(), &mut dx, r, fout, fin);
        Tensor::from_vec(&[r, fin], dx).expect("dx shape")
    });
    let mut dw = vec![T::zero(); fout * fin];
    gemm_tn(dy.data(), x.data(), &mut dw, fout, r, fin);
    let mut db = vec![T::zero(); fout];
    for row in dy.data().chunks(fout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    (
        dx,
        Tensor::from_vec(&[fout, fin], dw).expect("dw shape"),
        Tensor::from_vec(&[fout], db).expect("db shape"),
    )
}

// ---------------------------------------------------------------------------
// ROI Align

/// Region to pool: sample index in the batch plus an image-space box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiRef<T> {
    pub batch: usize,
    pub bbox: BBox<T>,
}

/// One bilinear tap: flat plane offset and weight.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    bin: usize,
    offset: usize,
    weight: T,
}

/// Bilinear taps for one ROI on an `h x w` plane. Cell `i` has its center at
/// feature coordinate `i + 0.5`; image coordinates are divided by `stride`.
fn roi_taps<T: Scalar>(bbox: &BBox<T>, stride: T, h: usize, w: usize, pooled: usize, sampling: usize) -> Result<Vec<Tap<T>>> {
    let half = T::lit(0.5);
    let x0 = bbox.x1 / stride - half;
    let y0 = bbox.y1 / stride - half;
    let rw = (bbox.x2 - bbox.x1) / stride;
    let rh = (bbox.y2 - bbox.y1) / stride;
    if !(rw >= T::lit(1e-6)) || !(rh >= T::lit(1e-6)) {
        return Err(Error::DegenerateRoi(format!(
            "box ({}, {}, {}, {}) spans less than 1e-6 feature cells at stride {stride}",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2
        )));
    }
    let pf = T::from_usize_lossy(pooled);
    let sf = T::from_usize_lossy(sampling);
    let bin_w = rw / pf;
    let bin_h = rh / pf;
    let sample_w = T::one() / T::from_usize_lossy(sampling * sampling);
    let (hf, wf) = (T::from_usize_lossy(h), T::from_usize_lossy(w));
    let mut taps = Vec::with_capacity(pooled * pooled * sampling * sampling * 4);
    for py in 0..pooled {
        for px in 0..pooled {
            let bin = py * pooled + px;
            for sy in 0..sampling {
                let y_sample = y0
                    + T::from_usize_lossy(py) * bin_h
                    + (T::from_usize_lossy(sy) + half) * bin_h / sf;
                for sx in 0..sampling {
                    let mut y = y_sample;
                    let mut x = x0
                        + T::from_usize_lossy(px) * bin_w
                        + (T::from_usize_lossy(sx) + half) * bin_w / sf;
                    if y < -T::one() || y > hf || x < -T::one() || x > wf {
                        continue;
                    }
                    y = y.max(T::zero());
                    x = x.max(T::zero());
                    let mut yl = y.floor().to_usize().unwrap_or(0);
                    let mut xl = x.floor().to_usize().unwrap_or(0);
                    let (yh, xh);
                    if yl >= h - 1 {
                        yl = h - 1;
                        yh = h - 1;
                        y = T::from_usize_lossy(yl);
                    } else {
                        yh = yl + 1;
                    }
                    if xl >= w - 1 {
                        xl = w - 1;
                        xh = w - 1;
                        x = T::from_usize_lossy(xl);
                    } else {
                        xh = xl + 1;
                    }
                    let ly = y - T::from_usize_lossy(yl);
                    let lx = x - T::from_usize_lossy(xl);
                    let (hy, hx) = (T::one() - ly, T::one() - lx);
                    for (offset, wgt) in [
                        (yl * w + xl, hy * hx),
                        (yl * w + xh, hy * lx),
                        (yh * w + xl, ly * hx),
                        (yh * w + xh, ly * lx),
                    ] {
                        taps.push(Tap {
                            bin,
                            offset,
                            weight: wgt * sample_w,
                        });
                    }
                }
            }
        }
    }
    Ok(taps)
}

/// Pools each ROI to `[C, P, P]`; output `[R, C, P, P]`.
pub fn roi_align_forward<T: Scalar>(
    feature: &Tensor<T>,
    rois: &[RoiRef<T>],
    stride: T,
    pooled: usize,
    sampling: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = feature.dims4();
    let pp = pooled * pooled;
    let mut out = vec![T::zero(); rois.len() * c * pp];
    for (r, roi) in rois.iter().enumerate() {
        if roi.batch >= n {
            return Err(Error::invalid(format!("roi batch index {} out of range {n}", roi.batch)));
        }
        let taps = roi_taps(&roi.bbox, stride, h, w, pooled, sampling)?;
        for ch in 0..c {
            let plane = &feature.data()[(roi.batch * c + ch) * h * w..(roi.batch * c + ch + 1) * h * w];
            let dst = &mut out[(r * c + ch) * pp..(r * c + ch + 1) * pp];
            for t in &taps {
                dst[t.bin] += t.weight * plane[t.offset];
            }
        }
    }
    Tensor::from_vec(&[rois.len(), c, pooled, pooled], out)
}

/// Gradient with respect to the feature map; box coordinates are constants.
pub fn roi_align_backward<T: Scalar>(
    feature_shape: &[usize],
    rois: &[RoiRef<T>],
    stride: T,
    pooled: usize,
    sampling: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (_, c, h, w) = (feature_shape[0], feature_shape[1], feature_shape[2], feature_shape[3]);
    let pp = pooled * pooled;
    let mut dx = Tensor::zeros(feature_shape);
    let d = dx.data_mut();
    for (r, roi) in rois.iter().enumerate() {
        let taps = roi_taps(&roi.bbox, stride, h, w, pooled, sampling).expect("validated in forward");
        for ch in 0..c {
            let base = (roi.batch * c + ch) * h * w;
            let g = &dy.data()[(r * c + ch) * pp..(r * c + ch + 1) * pp];
            for t in &taps {
                d[base + t.offset] += t.weight * g[t.bin];
            }
        }
    }
    dx
}
