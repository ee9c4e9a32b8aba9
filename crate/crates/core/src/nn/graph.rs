//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only for one forward pass. Ops
//! record enough saved state to run their backward kernels; [`Graph::backward`]
//! walks the tape once in reverse. Batch-norm running statistics are not
//! written during the pass; they are collected as [`BnUpdate`]s for the
//! optimizer step to apply.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, BatchNormSaved, ConvGeom, RoiRef};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, dropout active.
    Train,
    /// Running statistics in batch norm, dropout disabled.
    Eval,
}

/// Pending batch-norm running statistic update.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2x {
        x: Var,
    },
    ConcatChannels {
        parts: Vec<(Var, usize)>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    ChannelsLast {
        x: Var,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
    },
    RoiAlign {
        levels: Vec<Var>,
        /// `(level, roi)` in output row order.
        rois: Vec<(usize, RoiRef<T>)>,
        strides: Vec<T>,
        pooled: usize,
        sampling: usize,
    },
    /// Scalar computed outside the tape with known partials.
    Scalar {
        inputs: Vec<(Var, Tensor<T>)>,
    },
    WeightedSum {
        parts: Vec<(Var, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    bn_updates: Vec<BnUpdate<T>>,
    bn_eps: T,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// `seed` drives dropout masks; equal seeds give equal masks.
    pub fn new(store: &'p ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
            bn_eps: T::lit(1e-5),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param => true,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Input leaf whose gradient is tracked (for input-gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, &[]);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param, &[]);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: ParamId, b: Option<ParamId>, geom: ConvGeom) -> Result<Var> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let y = kernels::conv2d_forward(self.value(x), self.value(wv), bv.map(|b| self.value(b)), geom)?;
        let mut parents = vec![x, wv];
        parents.extend(bv);
        Ok(self.push(y, Op::Conv2d { x, w: wv, b: bv, geom }, &parents))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        geom: ConvGeom,
        output_pad: usize,
    ) -> Result<Var> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let y = kernels::conv_transpose2d_forward(
            self.value(x),
            self.value(wv),
            bv.map(|b| self.value(b)),
            geom,
            output_pad,
        )?;
        let mut parents = vec![x, wv];
        parents.extend(bv);
        Ok(self.push(y, Op::ConvTranspose2d { x, w: wv, b: bv, geom }, &parents))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let c = self.value(x).dims4().1;
        if self.store.value(gamma).numel() != c {
            return Err(Error::invalid(format!(
                "batch norm over {} channels applied to {c}",
                self.store.value(gamma).numel()
            )));
        }
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let eps = self.bn_eps;
        match self.mode {
            Mode::Train => {
                let (y, saved) = kernels::batch_norm_train_forward(
                    self.value(x),
                    self.value(gv).data(),
                    self.value(bv).data(),
                    eps,
                );
                self.bn_updates.push(BnUpdate {
                    running_mean,
                    running_var,
                    batch_mean: saved.batch_mean.clone(),
                    batch_var: saved.batch_var.clone(),
                });
                Ok(self.push(
                    y,
                    Op::BatchNormTrain {
                        x,
                        gamma: gv,
                        beta: bv,
                        saved,
                    },
                    &[x, gv, bv],
                ))
            }
            Mode::Eval => {
                let rm = self.store.value(running_mean).data();
                let rv = self.store.value(running_var).data();
                let (y, xhat) = kernels::batch_norm_eval_forward(
                    self.value(x),
                    self.value(gv).data(),
                    self.value(bv).data(),
                    rm,
                    rv,
                    eps,
                );
                let inv_std = rv.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                Ok(self.push(
                    y,
                    Op::BatchNormEval {
                        x,
                        gamma: gv,
                        beta: bv,
                        xhat,
                        inv_std,
                    },
                    &[x, gv, bv],
                ))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu { x }, &[x])
    }

    pub fn max_pool(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let (y, argmax) = kernels::max_pool2d_forward(self.value(x), geom)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let y = kernels::upsample_nearest2x_forward(self.value(x));
        self.push(y, Op::Upsample2x { x }, &[x])
    }

    /// Concatenates `[N, C_i, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let mut parts = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &v in xs {
            let (vn, c, vh, vw) = self.value(v).dims4();
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::invalid(format!(
                    "cannot concat {:?} with {:?}",
                    self.value(xs[0]).shape(),
                    self.value(v).shape()
                )));
            }
            parts.push((v, c));
            total += c;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for &(v, c) in &parts {
                let d = self.value(v).data();
                out.extend_from_slice(&d[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let y = Tensor::from_vec(&[n, total, h, w], out)?;
        Ok(self.push(y, Op::ConcatChannels { parts }, xs))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if start + len > c {
            return Err(Error::invalid(format!(
                "channel slice {start}..{} exceeds {c}",
                start + len
            )));
        }
        let hw = h * w;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            out.extend_from_slice(&d[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let y = Tensor::from_vec(&[n, len, h, w], out)?;
        Ok(self.push(y, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::invalid(format!(
                "cannot add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let y = kernels::linear_forward(self.value(x), self.value(wv), bv.map(|b| self.value(b)))?;
        let mut parents = vec![x, wv];
        parents.extend(bv);
        Ok(self.push(y, Op::Linear { x, w: wv, b: bv }, &parents))
    }

    /// Inverted dropout; identity in eval mode or with `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let y = Tensor::from_vec(xv.shape(), data).expect("dropout shape");
        self.push(y, Op::Dropout { x, mask }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    /// `[N, C, H, W]` to `[N, H * W * C]` with `C` fastest (row-major `y, x, c`).
    pub fn channels_last(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let d = self.value(x).data();
        let mut out = vec![T::zero(); d.len()];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..h * w {
                    out[s * c * h * w + p * c + ch] = d[(s * c + ch) * h * w + p];
                }
            }
        }
        let y = Tensor::from_vec(&[n, h * w * c], out).expect("channels-last shape");
        self.push(y, Op::ChannelsLast { x }, &[x])
    }

    /// Concatenates `[N, L_i]` tensors along the second axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let n = self.value(xs[0]).dims2().0;
        let mut parts = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &v in xs {
            let (vn, l) = self.value(v).dims2();
            if vn != n {
                return Err(Error::invalid("row count mismatch in column concat"));
            }
            parts.push((v, l));
            total += l;
        }
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &(v, l) in &parts {
                out.extend_from_slice(&self.value(v).data()[r * l..(r + 1) * l]);
            }
        }
        let y = Tensor::from_vec(&[n, total], out)?;
        Ok(self.push(y, Op::ConcatCols { parts }, xs))
    }

    /// ROI Align across pyramid levels. `rois[i] = (level, roi)`; output `[R, C, P, P]`.
    pub fn roi_align(
        &mut self,
        levels: &[Var],
        strides: &[T],
        rois: Vec<(usize, RoiRef<T>)>,
        pooled: usize,
        sampling: usize,
    ) -> Result<Var> {
        let c = self.value(levels[0]).dims4().1;
        let pp = pooled * pooled;
        let mut out = vec![T::zero(); rois.len() * c * pp];
        for (r, (lvl, roi)) in rois.iter().enumerate() {
            let feat = self.value(levels[*lvl]);
            let y = kernels::roi_align_forward(feat, std::slice::from_ref(roi), strides[*lvl], pooled, sampling)?;
            out[r * c * pp..(r + 1) * c * pp].copy_from_slice(y.data());
        }
        let y = Tensor::from_vec(&[rois.len(), c, pooled, pooled], out)?;
        Ok(self.push(
            y,
            Op::RoiAlign {
                levels: levels.to_vec(),
                rois,
                strides: strides.to_vec(),
                pooled,
                sampling,
            },
            levels,
        ))
    }

    /// Records a scalar whose partial derivatives w.r.t. `inputs` are already known.
    pub fn scalar_with_grads(&mut self, value: T, inputs: Vec<(Var, Tensor<T>)>) -> Var {
        let parents: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        self.push(Tensor::scalar(value), Op::Scalar { inputs }, &parents)
    }

    pub fn weighted_sum(&mut self, parts: &[(Var, T)]) -> Var {
        let value = parts
            .iter()
            .map(|&(v, w)| w * self.value(v).data()[0])
            .sum::<T>();
        let parents: Vec<Var> = parts.iter().map(|p| p.0).collect();
        self.push(
            Tensor::scalar(value),
            Op::WeightedSum {
                parts: parts.to_vec(),
            },
            &parents,
        )
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(gy);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.value(*x), self.value(*w), &gy, *geom, needs(*x));
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let (dx, dw, db) = kernels::conv_transpose2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &gy,
                        *geom,
                        needs(*x),
                    );
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::BatchNormTrain { x, gamma, beta, saved } => {
                    let (dx, dg, db) =
                        kernels::batch_norm_train_backward(&gy, self.value(*gamma).data(), saved);
                    if needs(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    let c = dg.len();
                    acc(&mut grads, *gamma, Tensor::from_vec(&[c], dg).expect("shape"));
                    acc(&mut grads, *beta, Tensor::from_vec(&[c], db).expect("shape"));
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, c, h, w) = gy.dims4();
                    let hw = h * w;
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); gy.numel()];
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for i in base..base + hw {
                                let g = gy.data()[i];
                                dx[i] = gam[ch] * inv_std[ch] * g;
                                dg[ch] += g * xhat[i];
                                db[ch] += g;
                            }
                        }
                    }
                    if needs(*x) {
                        acc(&mut grads, *x, Tensor::from_vec(gy.shape(), dx).expect("shape"));
                    }
                    acc(&mut grads, *gamma, Tensor::from_vec(&[c], dg).expect("shape"));
                    acc(&mut grads, *beta, Tensor::from_vec(&[c], db).expect("shape"));
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    let data = gy
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    acc(&mut grads, *x, Tensor::from_vec(gy.shape(), data).expect("shape"));
                }
                Op::MaxPool { x, argmax } => {
                    let dx = kernels::max_pool2d_backward(self.value(*x).shape(), argmax, &gy);
                    acc(&mut grads, *x, dx);
                }
                Op::Upsample2x { x } => {
                    acc(&mut grads, *x, kernels::upsample_nearest2x_backward(&gy));
                }
                Op::ConcatChannels { parts } => {
                    let (n, total, h, w) = gy.dims4();
                    let hw = h * w;
                    let mut offset = 0;
                    for &(v, c) in parts {
                        if needs(v) {
                            let mut d = Vec::with_capacity(n * c * hw);
                            for s in 0..n {
                                let base = (s * total + offset) * hw;
                                d.extend_from_slice(&gy.data()[base..base + c * hw]);
                            }
                            acc(&mut grads, v, Tensor::from_vec(&[n, c, h, w], d).expect("shape"));
                        }
                        offset += c;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let len = gy.dims4().1;
                    let hw = h * w;
                    let mut d = Tensor::zeros(&[n, c, h, w]);
                    for s in 0..n {
                        let dst = (s * c + start) * hw;
                        let src = s * len * hw;
                        d.data_mut()[dst..dst + len * hw].copy_from_slice(&gy.data()[src..src + len * hw]);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Add { a, b } => {
                    if needs(*a) {
                        acc(&mut grads, *a, gy.clone());
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, gy);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), &gy, needs(*x));
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Dropout { x, mask } => {
                    let data = gy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    acc(&mut grads, *x, Tensor::from_vec(gy.shape(), data).expect("shape"));
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, gy.reshape(&shape).expect("shape"));
                }
                Op::ChannelsLast { x } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let mut d = vec![T::zero(); gy.numel()];
                    for s in 0..n {
                        for ch in 0..c {
                            for p in 0..h * w {
                                d[(s * c + ch) * h * w + p] = gy.data()[s * c * h * w + p * c + ch];
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(&[n, c, h, w], d).expect("shape"));
                }
                Op::ConcatCols { parts } => {
                    let (n, total) = gy.dims2();
                    let mut offset = 0;
                    for &(v, l) in parts {
                        if needs(v) {
                            let mut d = Vec::with_capacity(n * l);
                            for r in 0..n {
                                d.extend_from_slice(&gy.data()[r * total + offset..r * total + offset + l]);
                            }
                            acc(&mut grads, v, Tensor::from_vec(&[n, l], d).expect("shape"));
                        }
                        offset += l;
                    }
                }
                Op::RoiAlign {
                    levels,
                    rois,
                    strides,
                    pooled,
                    sampling,
                } => {
                    let c = gy.shape()[1];
                    let pp = pooled * pooled;
                    let mut level_grads: Vec<Option<Tensor<T>>> = levels.iter().map(|_| None).collect();
                    for (r, (lvl, roi)) in rois.iter().enumerate() {
                        let feat_shape = self.value(levels[*lvl]).shape().to_vec();
                        let gslice = Tensor::from_vec(
                            &[1, c, *pooled, *pooled],
                            gy.data()[r * c * pp..(r + 1) * c * pp].to_vec(),
                        )
                        .expect("shape");
                        let d = kernels::roi_align_backward(
                            &feat_shape,
                            std::slice::from_ref(roi),
                            strides[*lvl],
                            *pooled,
                            *sampling,
                            &gslice,
                        );
                        match &mut level_grads[*lvl] {
                            Some(g) => g.add_assign(&d),
                            slot @ None => *slot = Some(d),
                        }
                    }
                    for (lvl, g) in level_grads.into_iter().enumerate() {
                        if let Some(g) = g {
                            if needs(levels[lvl]) {
                                acc(&mut grads, levels[lvl], g);
                            }
                        }
                    }
                }
                Op::Scalar { inputs } => {
                    let up = gy.data()[0];
                    for (v, partial) in inputs {
                        if needs(*v) {
                            acc(&mut grads, *v, partial.map(|p| p * up));
                        }
                    }
                }
                Op::WeightedSum { parts } => {
                    let up = gy.data()[0];
                    for &(v, w) in parts {
                        if needs(v) {
                            acc(&mut grads, v, Tensor::scalar(w * up));
                        }
                    }
                }
            }
        }

        let params = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        Gradients { params, nodes: grads }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient of a non-parameter leaf created with [`Graph::input_with_grad`].
    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor<T>> {
        &self.params
    }
}
