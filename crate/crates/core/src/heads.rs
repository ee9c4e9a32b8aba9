//! Region proposal network, ROI Align and the two-headed classifier.

use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::kernels::{self, RoiRef};
use crate::nn::{Conv2d, Graph, Linear, ParamStore, Scope, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anchors per pyramid location (one scale, three ratios).
pub const ANCHORS_PER_LOCATION: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsConfig {
    /// ROI Align output side `P`.
    pub pooled_size: usize,
    /// Bilinear samples per bin side.
    pub sampling_ratio: usize,
    pub hidden_width: usize,
    pub dropout: f64,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            pooled_size: 7,
            sampling_ratio: 2,
            hidden_width: 1024,
            dropout: 0.5,
        }
    }
}

impl HeadsConfig {
    pub fn micro() -> Self {
        Self {
            hidden_width: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pooled_size == 0 || self.sampling_ratio == 0 || self.hidden_width == 0 {
            return Err(Error::invalid("heads sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-image RPN predictions in canonical anchor order.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnOutput<T> {
    /// Objectness logits; `sigmoid` gives the score.
    pub objectness: Vec<T>,
    pub deltas: Vec<[T; 4]>,
}

impl<T: Scalar> RpnOutput<T> {
    pub fn len(&self) -> usize {
        self.objectness.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objectness.is_empty()
    }

    pub fn scores(&self) -> Vec<T> {
        self.objectness.iter().map(|&z| sigmoid(z)).collect()
    }

    /// Splits batched `[N, A]` logits and `[N, 4A]` deltas into per-image outputs.
    pub fn from_batched(objectness: &Tensor<T>, deltas: &Tensor<T>) -> Vec<Self> {
        let (n, a) = objectness.dims2();
        (0..n)
            .map(|s| RpnOutput {
                objectness: objectness.data()[s * a..(s + 1) * a].to_vec(),
                deltas: deltas.data()[s * 4 * a..(s + 1) * 4 * a]
                    .chunks_exact(4)
                    .map(|c| [c[0], c[1], c[2], c[3]])
                    .collect(),
            })
            .collect()
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Shared 3x3 conv + ReLU, then 1x1 objectness (3) and delta (12) convs, applied to every level.
#[derive(Clone, Debug)]
pub struct RpnHead {
    shared: Conv2d,
    cls: Conv2d,
    reg: Conv2d,
    pub in_channels: usize,
}

/// Graph handles of the batched RPN outputs.
#[derive(Clone, Copy, Debug)]
pub struct RpnVars {
    /// `[N, A]`
    pub objectness: Var,
    /// `[N, 4A]`
    pub deltas: Var,
}

impl RpnHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, scope: &Scope, channels: usize) -> Self {
        Self {
            shared: Conv2d::new(store, &scope.child("conv"), channels, channels, 3, 1, 1, true),
            cls: Conv2d::new(store, &scope.child("cls"), channels, ANCHORS_PER_LOCATION, 1, 1, 1, true),
            reg: Conv2d::new(store, &scope.child("reg"), channels, 4 * ANCHORS_PER_LOCATION, 1, 1, 1, true),
            in_channels: channels,
        }
    }

    /// Levels are flattened row-major `(y, x, anchor)` and concatenated in the given order.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, levels: &[Var]) -> Result<RpnVars> {
        let mut obj = Vec::with_capacity(levels.len());
        let mut del = Vec::with_capacity(levels.len());
        for &lvl in levels {
            let c = g.value(lvl).dims4().1;
            if c != self.in_channels {
                return Err(Error::invalid(format!(
                    "rpn expects {} channels, pyramid level has {c}",
                    self.in_channels
                )));
            }
            let h = self.shared.forward(g, lvl)?;
            let h = g.relu(h);
            let o = self.cls.forward(g, h)?;
            let d = self.reg.forward(g, h)?;
            obj.push(g.channels_last(o));
            del.push(g.channels_last(d));
        }
        Ok(RpnVars {
            objectness: g.concat_cols(&obj)?,
            deltas: g.concat_cols(&del)?,
        })
    }
}

/// Runs the RPN over a materialized pyramid.
pub fn rpn_forward<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    head: &RpnHead,
    store: &ParamStore<T>,
) -> Result<Vec<RpnOutput<T>>> {
    let mut g = Graph::new(store, crate::nn::Mode::Eval, 0);
    let levels: Vec<Var> = pyramid.levels.iter().map(|t| g.input(t.clone())).collect();
    let out = head.forward(&mut g, &levels)?;
    Ok(RpnOutput::from_batched(g.value(out.objectness), g.value(out.deltas)))
}

/// Level whose anchor scale is nearest to `sqrt(area)`; ties go to the coarser level.
/// `scales` is ordered coarsest first.
pub fn assign_roi_level<T: Scalar>(bbox: &BBox<T>, scales: &[T]) -> usize {
    let side = bbox.area().sqrt();
    let mut best = 0;
    let mut best_d = (scales[0] - side).abs();
    for (l, &s) in scales.iter().enumerate().skip(1) {
        let d = (s - side).abs();
        if d < best_d {
            best = l;
            best_d = d;
        }
    }
    best
}

/// Pooled `[C, P, P]` feature of one region.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiFeature<T> {
    pub grid: Tensor<T>,
    pub source_level: usize,
    pub source_box: BBox<T>,
}

/// ROI Align on one pyramid level `[N, C, H, W]` with 2x2 samples per bin.
pub fn roi_align<T: Scalar>(
    feature: &Tensor<T>,
    batch: usize,
    level: usize,
    stride: usize,
    bbox: &BBox<T>,
    pooled: usize,
) -> Result<RoiFeature<T>> {
    if pooled == 0 {
        return Err(Error::invalid("pooled size must be at least 1"));
    }
    let roi = RoiRef { batch, bbox: *bbox };
    let y = kernels::roi_align_forward(feature, &[roi], T::from_usize_lossy(stride), pooled, 2)?;
    let c = feature.dims4().1;
    Ok(RoiFeature {
        grid: y.reshape(&[c, pooled, pooled])?,
        source_level: level,
        source_box: *bbox,
    })
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
    pub dropout: f64,
    pub in_features: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    /// `[R, 2]` logits over (background, nodule).
    pub logits: Var,
    /// `[R, 4]`
    pub deltas: Var,
}

impl ClassifierHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, scope: &Scope, channels: usize, cfg: &HeadsConfig) -> Self {
        let in_features = channels * cfg.pooled_size * cfg.pooled_size;
        Self {
            fc1: Linear::new(store, &scope.child("fc1"), in_features, cfg.hidden_width),
            fc2: Linear::new(store, &scope.child("fc2"), cfg.hidden_width, cfg.hidden_width),
            cls: Linear::new(store, &scope.child("cls"), cfg.hidden_width, 2),
            reg: Linear::new(store, &scope.child("reg"), cfg.hidden_width, 4),
            dropout: cfg.dropout,
            in_features,
        }
    }

    /// `pooled` is `[R, C, P, P]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, pooled: Var) -> Result<ClassifierVars> {
        let shape = g.value(pooled).shape().to_vec();
        let r = shape[0];
        let feat: usize = shape[1..].iter().product();
        if feat != self.in_features {
            return Err(Error::invalid(format!(
                "classifier expects {} features per roi, got {feat}",
                self.in_features
            )));
        }
        let x = g.reshape(pooled, &[r, feat])?;
        let x = self.fc1.forward(g, x)?;
        let x = g.relu(x);
        let x = g.dropout(x, self.dropout);
        let x = self.fc2.forward(g, x)?;
        let x = g.relu(x);
        let x = g.dropout(x, self.dropout);
        Ok(ClassifierVars {
            logits: self.cls.forward(g, x)?,
            deltas: self.reg.forward(g, x)?,
        })
    }
}

/// Softmax scores and box deltas per ROI.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutput<T> {
    /// `[background, nodule]`, each row sums to 1.
    pub class_scores: Vec<[T; 2]>,
    pub deltas: Vec<[T; 4]>,
}

impl<T: Scalar> ClassifierOutput<T> {
    pub fn from_tensors(logits: &Tensor<T>, deltas: &Tensor<T>) -> Self {
        Self {
            class_scores: logits
                .data()
                .chunks_exact(2)
                .map(|l| softmax2([l[0], l[1]]))
                .collect(),
            deltas: deltas
                .data()
                .chunks_exact(4)
                .map(|d| [d[0], d[1], d[2], d[3]])
                .collect(),
        }
    }
}

pub fn softmax2<T: Scalar>(l: [T; 2]) -> [T; 2] {
    let m = l[0].max(l[1]);
    let e0 = (l[0] - m).exp();
    let e1 = (l[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Runs the classifier on already pooled ROI features (eval mode).
pub fn classifier_forward<T: Scalar>(
    rois: &[RoiFeature<T>],
    head: &ClassifierHead,
    store: &ParamStore<T>,
) -> Result<ClassifierOutput<T>> {
    let first = rois
        .first()
        .ok_or_else(|| Error::invalid("classifier needs at least one roi"))?;
    let shape = first.grid.shape().to_vec();
    let mut data = Vec::with_capacity(rois.len() * first.grid.numel());
    for r in rois {
        if r.grid.shape() != shape.as_slice() {
            return Err(Error::invalid("roi features must share one shape"));
        }
        data.extend_from_slice(r.grid.data());
    }
    let mut full = vec![rois.len()];
    full.extend(&shape);
    let mut g = Graph::new(store, crate::nn::Mode::Eval, 0);
    let x = g.input(Tensor::from_vec(&full, data)?);
    let out = head.forward(&mut g, x)?;
    Ok(ClassifierOutput::from_tensors(g.value(out.logits), g.value(out.deltas)))
}
