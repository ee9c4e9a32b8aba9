//! Finite-difference checks of every differentiable graph op in isolation.

use nodule_detect::geometry::BBox;
use nodule_detect::nn::{
    BatchNorm2d, Conv2d, ConvGeom, ConvTranspose2d, Graph, Linear, Mode, ParamStore, RoiRef, Scope, Var,
};
use nodule_detect::train::init_parameters;
use nodule_detect::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

type Build = dyn Fn(&mut Graph<'_, f64>, Var) -> Result<Var>;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar `sum(c * y)` with fixed pseudo-random `c`.
fn loss(store: &ParamStore<f64>, x: &Tensor<f64>, mode: Mode, build: &Build) -> (f64, Option<(Tensor<f64>, Vec<Tensor<f64>>)>) {
    let mut g = Graph::new(store, mode, 11);
    let xv = g.input_with_grad(x.clone());
    let y = build(&mut g, xv).unwrap();
    let c = random(g.value(y).shape(), 99);
    let v: f64 = g.value(y).data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
    let l = g.scalar_with_grads(v, vec![(y, c)]);
    let grads = g.backward(l);
    let dx = grads.var(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let dp = store
        .iter()
        .map(|(id, p)| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    (v, Some((dx, dp)))
}

fn check(name: &str, store: ParamStore<f64>, x: Tensor<f64>, mode: Mode, build: &Build) {
    let (_, grads) = loss(&store, &x, mode, build);
    let (dx, dp) = grads.unwrap();
    let mut worst = 0.0f64;
    let mut report = |what: String, a: f64, n: f64| {
        let e = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        if e > worst {
            worst = e;
        }
        assert!(e < TOL, "{name}: {what} analytic {a} numeric {n}");
    };
    for i in 0..x.numel() {
        let mut p = x.clone();
        p.data_mut()[i] += H;
        let mut m = x.clone();
        m.data_mut()[i] -= H;
        let n = (loss(&store, &p, mode, build).0 - loss(&store, &m, mode, build).0) / (2.0 * H);
        report(format!("input[{i}]"), dx.data()[i], n);
    }
    for (k, (id, param)) in store.iter().enumerate() {
        if !param.kind.trainable() {
            continue;
        }
        for i in 0..param.value.numel() {
            let mut sp = store.clone();
            sp.get_mut(id).value.data_mut()[i] += H;
            let mut sm = store.clone();
            sm.get_mut(id).value.data_mut()[i] -= H;
            let n = (loss(&sp, &x, mode, build).0 - loss(&sm, &x, mode, build).0) / (2.0 * H);
            report(format!("{}[{i}]", param.name), dp[k].data()[i], n);
        }
    }
}

fn store_with<F: FnOnce(&mut ParamStore<f64>) -> R, R>(f: F) -> (ParamStore<f64>, R) {
    let mut s = ParamStore::new();
    let r = f(&mut s);
    init_parameters(&mut s, &mut ChaCha8Rng::seed_from_u64(1));
    // Non-trivial affine BN parameters and biases.
    let mut rr = ChaCha8Rng::seed_from_u64(2);
    for (_, p) in s.iter_mut() {
        if p.kind.trainable() {
            for v in p.value.data_mut() {
                *v += rr.random_range(-0.3..0.3);
            }
        }
    }
    (s, r)
}

#[test]
fn conv2d_grouped_strided() {
    for (k, stride, groups) in [(3, 1, 1), (3, 2, 2), (1, 2, 1), (7, 2, 1)] {
        let (s, conv) = store_with(|s| Conv2d::new(s, &Scope::root("c"), 4, 6, k, stride, groups, true));
        check("conv2d", s, random(&[2, 4, 6, 6], 3), Mode::Train, &move |g, x| conv.forward(g, x));
    }
}

#[test]
fn conv_transpose2d_grouped() {
    for groups in [1, 2] {
        let (s, conv) = store_with(|s| ConvTranspose2d::new(s, &Scope::root("t"), 4, 6, 3, 2, groups, true));
        check("convT", s, random(&[2, 4, 3, 3], 4), Mode::Train, &move |g, x| conv.forward(g, x));
    }
}

#[test]
fn batch_norm_train_and_eval() {
    let (s, bn) = store_with(|s| BatchNorm2d::new(s, &Scope::root("bn"), 3));
    let bn2 = bn.clone();
    check("bn-train", s.clone(), random(&[2, 3, 3, 3], 5), Mode::Train, &move |g, x| bn.forward(g, x));
    check("bn-eval", s, random(&[2, 3, 3, 3], 5), Mode::Eval, &move |g, x| bn2.forward(g, x));
}

#[test]
fn batch_norm_train_on_1x1_maps() {
    let (s, bn) = store_with(|s| BatchNorm2d::new(s, &Scope::root("bn"), 3));
    check("bn-1x1", s, random(&[2, 3, 1, 1], 6), Mode::Train, &move |g, x| bn.forward(g, x));
}

#[test]
fn pointwise_and_shape_ops() {
    let (s, _) = store_with(|_| ());
    let x = random(&[2, 4, 4, 4], 7);
    check("relu", s.clone(), x.clone(), Mode::Train, &|g, x| Ok(g.relu(x)));
    check("upsample", s.clone(), x.clone(), Mode::Train, &|g, x| Ok(g.upsample2x(x)));
    check("maxpool", s.clone(), x.clone(), Mode::Train, &|g, x| g.max_pool(x, ConvGeom::new(3, 2, 1, 1)));
    check("slice+concat", s.clone(), x.clone(), Mode::Train, &|g, x| {
        let a = g.slice_channels(x, 0, 3)?;
        let b = g.slice_channels(x, 1, 3)?;
        let r = g.relu(b);
        g.concat_channels(&[a, r, x])
    });
    check("add", s.clone(), x.clone(), Mode::Train, &|g, x| {
        let r = g.relu(x);
        g.add(x, r)
    });
    check("channels_last+cols", s.clone(), x.clone(), Mode::Train, &|g, x| {
        let a = g.channels_last(x);
        let u = g.upsample2x(x);
        let b = g.channels_last(u);
        g.concat_cols(&[a, b])
    });
    check("dropout", s, x, Mode::Train, &|g, x| {
        let r = g.reshape(x, &[2, 64])?;
        Ok(g.dropout(r, 0.5))
    });
}

#[test]
fn linear_layer() {
    let (s, lin) = store_with(|s| Linear::new(s, &Scope::root("fc"), 6, 5));
    check("linear", s, random(&[3, 6], 8), Mode::Train, &move |g, x| lin.forward(g, x));
}

#[test]
fn roi_align_multi_level() {
    let (s, _) = store_with(|_| ());
    // Level 0: [2, 2, 4, 4] at stride 8, level 1: [2, 2, 8, 8] at stride 4, packed in one input.
    let build = |g: &mut Graph<'_, f64>, x: Var| -> Result<Var> {
        let up = g.upsample2x(x);
        let r = g.relu(up);
        let lvl1 = g.add(up, r)?;
        let rois = vec![
            (0, RoiRef { batch: 0, bbox: BBox::new_unchecked(1.3, 2.2, 20.5, 17.0) }),
            (1, RoiRef { batch: 1, bbox: BBox::new_unchecked(-3.0, 4.0, 9.0, 30.1) }),
            (1, RoiRef { batch: 0, bbox: BBox::new_unchecked(10.0, 10.0, 14.0, 13.0) }),
        ];
        g.roi_align(&[x, lvl1], &[8.0, 4.0], rois, 3, 2)
    };
    check("roi_align", s, random(&[2, 2, 4, 4], 9), Mode::Train, &build);
}
