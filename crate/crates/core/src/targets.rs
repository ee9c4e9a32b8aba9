//! Anchors, overlap, training labels, box deltas, minibatch sampling and NMS.
//!
//! Anchors are laid out in one flat canonical order: level (coarsest first),
//! then row `y`, then column `x`, then ratio index. RPN outputs use the same
//! order, so label index `i` and prediction index `i` always refer to the same
//! anchor.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PYRAMID_STRIDES;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

/// RPN positive threshold: IoU strictly above this.
pub const RPN_POSITIVE_IOU: f64 = 0.7;
/// RPN negative threshold: IoU strictly below this.
pub const RPN_NEGATIVE_IOU: f64 = 0.3;
/// Classifier foreground: IoU strictly above this.
pub const HEAD_FOREGROUND_IOU: f64 = 0.5;
/// Classifier background band lower edge (inclusive).
pub const HEAD_BACKGROUND_IOU: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    /// One anchor scale per pyramid level, coarsest first.
    pub scales_px: [f64; 5],
    pub ratios: [f64; 3],
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales_px: [128.0, 64.0, 32.0, 16.0, 8.0],
            ratios: [0.5, 1.0, 2.0],
        }
    }
}

/// All anchors of all levels in canonical order.
#[derive(Clone, Debug)]
pub struct AnchorSet<T> {
    pub boxes: Vec<BBox<T>>,
    pub level_of: Vec<usize>,
    /// Start index of each level in `boxes`.
    pub level_offsets: Vec<usize>,
    /// `(H_l, W_l)` of each level.
    pub level_sizes: Vec<(usize, usize)>,
    pub strides: Vec<usize>,
    pub scales_px: Vec<T>,
    pub ratios: Vec<T>,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Flat index of `(level, y, x, a)`.
    pub fn index_of(&self, level: usize, y: usize, x: usize, a: usize) -> usize {
        let (_, w) = self.level_sizes[level];
        self.level_offsets[level] + (y * w + x) * self.ratios.len() + a
    }

    /// Inverse of [`AnchorSet::index_of`].
    pub fn locate(&self, index: usize) -> (usize, usize, usize, usize) {
        let level = self.level_of[index];
        let local = index - self.level_offsets[level];
        let na = self.ratios.len();
        let (_, w) = self.level_sizes[level];
        let cell = local / na;
        (level, cell / w, cell % w, local % na)
    }
}

/// Anchors for a square `image_size` input.
pub fn generate_anchors<T: Scalar>(
    image_size: usize,
    strides: &[usize],
    scales_px: &[T],
    ratios: &[T],
) -> Result<AnchorSet<T>> {
    if strides.len() != scales_px.len() {
        return Err(Error::invalid(format!(
            "{} strides but {} anchor scales",
            strides.len(),
            scales_px.len()
        )));
    }
    let mut boxes = Vec::new();
    let mut level_of = Vec::new();
    let mut level_offsets = Vec::with_capacity(strides.len());
    let mut level_sizes = Vec::with_capacity(strides.len());
    let half = T::lit(0.5);
    for (level, (&stride, &scale)) in strides.iter().zip(scales_px).enumerate() {
        let n = image_size / stride;
        level_offsets.push(boxes.len());
        level_sizes.push((n, n));
        let sf = T::from_usize_lossy(stride);
        for y in 0..n {
            for x in 0..n {
                let cx = (T::from_usize_lossy(x) + half) * sf;
                let cy = (T::from_usize_lossy(y) + half) * sf;
                for &r in ratios {
                    let sr = r.sqrt();
                    boxes.push(BBox::from_center(cx, cy, scale * sr, scale / sr));
                    level_of.push(level);
                }
            }
        }
    }
    Ok(AnchorSet {
        boxes,
        level_of,
        level_offsets,
        level_sizes,
        strides: strides.to_vec(),
        scales_px: scales_px.to_vec(),
        ratios: ratios.to_vec(),
    })
}

/// Anchors on the standard pyramid strides from an [`AnchorConfig`].
pub fn anchors_for<T: Scalar>(image_size: usize, cfg: &AnchorConfig) -> Result<AnchorSet<T>> {
    let scales: Vec<T> = cfg.scales_px.iter().map(|&s| T::lit(s)).collect();
    let ratios: Vec<T> = cfg.ratios.iter().map(|&r| T::lit(r)).collect();
    generate_anchors(image_size, &PYRAMID_STRIDES, &scales, &ratios)
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// Highest IoU of `b` against `gts` and the (lowest) index achieving it.
fn best_match<T: Scalar>(b: &BBox<T>, gts: &[BBox<T>]) -> (T, Option<usize>) {
    let mut best = T::zero();
    let mut arg = None;
    for (j, g) in gts.iter().enumerate() {
        let v = iou(b, g);
        if arg.is_none() || v > best {
            best = v;
            arg = Some(j);
        }
    }
    (best, arg)
}

/// R-CNN box deltas `(tx, ty, tw, th)` of `gt` relative to `reference`.
pub fn encode_box<T: Scalar>(reference: &BBox<T>, gt: &BBox<T>) -> Result<[T; 4]> {
    if !(reference.width() > T::zero() && reference.height() > T::zero()) {
        return Err(Error::invalid("reference box must have positive size"));
    }
    if !(gt.width() > T::zero() && gt.height() > T::zero()) {
        return Err(Error::invalid("target box must have positive size"));
    }
    let (px, py) = reference.center();
    let (gx, gy) = gt.center();
    let (pw, ph) = (reference.width(), reference.height());
    Ok([
        (gx - px) / pw,
        (gy - py) / ph,
        (gt.width() / pw).ln(),
        (gt.height() / ph).ln(),
    ])
}

/// Exact inverse of [`encode_box`].
pub fn decode_box<T: Scalar>(reference: &BBox<T>, t: &[T; 4]) -> BBox<T> {
    let (px, py) = reference.center();
    let (pw, ph) = (reference.width(), reference.height());
    BBox::from_center(px + t[0] * pw, py + t[1] * ph, pw * t[2].exp(), ph * t[3].exp())
}

/// [`decode_box`] with size deltas capped at `ln(1000 / 16)` so raw network
/// outputs cannot overflow `exp`.
pub fn decode_box_clamped<T: Scalar>(reference: &BBox<T>, t: &[T; 4]) -> BBox<T> {
    let cap = T::lit((1000.0f64 / 16.0).ln());
    decode_box(reference, &[t[0], t[1], t[2].min(cap), t[3].min(cap)])
}

/// Per-anchor RPN labels: 1 positive, 0 negative, -1 neutral.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnLabels<T> {
    pub cls: Vec<i8>,
    /// Zero except where `cls == 1`.
    pub reg_targets: Vec<[T; 4]>,
}

impl<T: Scalar> RpnLabels<T> {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.cls.iter().enumerate().filter(|(_, &c)| c == 1).map(|(i, _)| i)
    }

    pub fn count(&self, label: i8) -> usize {
        self.cls.iter().filter(|&&c| c == label).count()
    }
}

/// Threshold labels plus the rule that each gt's best anchor is positive.
/// A guaranteed anchor regresses toward the gt it was guaranteed for.
pub fn assign_rpn_labels<T: Scalar>(anchors: &AnchorSet<T>, gts: &[BBox<T>]) -> RpnLabels<T> {
    let n = anchors.len();
    let mut cls = vec![0i8; n];
    let mut target_gt: Vec<Option<usize>> = vec![None; n];
    let pos = T::lit(RPN_POSITIVE_IOU);
    let neg = T::lit(RPN_NEGATIVE_IOU);
    let mut gt_best: Vec<(T, Option<usize>)> = vec![(T::zero(), None); gts.len()];

    for (i, a) in anchors.boxes.iter().enumerate() {
        let mut m = T::zero();
        let mut arg = None;
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if arg.is_none() || v > m {
                m = v;
                arg = Some(j);
            }
            let gb = &mut gt_best[j];
            if v > gb.0 {
                *gb = (v, Some(i));
            }
        }
        if m > pos {
            cls[i] = 1;
            target_gt[i] = arg;
        } else if m < neg {
            cls[i] = 0;
        } else {
            cls[i] = -1;
        }
    }
    for (j, &(_, best_anchor)) in gt_best.iter().enumerate() {
        if let Some(i) = best_anchor {
            cls[i] = 1;
            target_gt[i] = Some(j);
        }
    }
    let reg_targets = anchors
        .boxes
        .iter()
        .zip(&target_gt)
        .map(|(a, t)| match t {
            Some(j) => encode_box(a, &gts[*j]).unwrap_or([T::zero(); 4]),
            None => [T::zero(); 4],
        })
        .collect();
    RpnLabels { cls, reg_targets }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalClass {
    Foreground,
    Background,
    /// IoU below the background band; excluded from the classifier loss.
    Discard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalLabels<T> {
    pub cls: Vec<ProposalClass>,
    /// `Some` exactly for foreground proposals.
    pub reg_targets: Vec<Option<[T; 4]>>,
}

pub fn assign_classifier_labels<T: Scalar>(proposals: &[BBox<T>], gts: &[BBox<T>]) -> ProposalLabels<T> {
    let fg = T::lit(HEAD_FOREGROUND_IOU);
    let bg = T::lit(HEAD_BACKGROUND_IOU);
    let mut cls = Vec::with_capacity(proposals.len());
    let mut reg_targets = Vec::with_capacity(proposals.len());
    for p in proposals {
        let (m, arg) = best_match(p, gts);
        if m > fg {
            let j = arg.expect("positive overlap implies a match");
            match encode_box(p, &gts[j]) {
                Ok(t) => {
                    cls.push(ProposalClass::Foreground);
                    reg_targets.push(Some(t));
                }
                Err(_) => {
                    cls.push(ProposalClass::Discard);
                    reg_targets.push(None);
                }
            }
        } else if m >= bg {
            cls.push(ProposalClass::Background);
            reg_targets.push(None);
        } else {
            cls.push(ProposalClass::Discard);
            reg_targets.push(None);
        }
    }
    ProposalLabels { cls, reg_targets }
}

fn pick<R: Rng + ?Sized>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if k >= pool.len() {
        return pool.to_vec();
    }
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Up to `n * pos_fraction` positives, the rest negatives, sorted ascending.
pub fn sample_rpn_minibatch<T: Scalar, R: Rng + ?Sized>(
    labels: &RpnLabels<T>,
    n: usize,
    pos_fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let pos: Vec<usize> = labels.positives().collect();
    let neg: Vec<usize> = labels
        .cls
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| i)
        .collect();
    sample_two_pools(&pos, &neg, n, pos_fraction, rng)
}

/// Up to `n * fg_fraction` foreground proposals, the rest background, sorted ascending.
pub fn sample_proposal_minibatch<T: Scalar, R: Rng + ?Sized>(
    labels: &ProposalLabels<T>,
    n: usize,
    fg_fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let idx = |want: ProposalClass| -> Vec<usize> {
        labels
            .cls
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == want)
            .map(|(i, _)| i)
            .collect()
    };
    sample_two_pools(
        &idx(ProposalClass::Foreground),
        &idx(ProposalClass::Background),
        n,
        fg_fraction,
        rng,
    )
}

fn sample_two_pools<R: Rng + ?Sized>(
    pos: &[usize],
    neg: &[usize],
    n: usize,
    pos_fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("minibatch size must be positive"));
    }
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::EmptyMinibatch("no positive or negative samples".into()));
    }
    let n_pos = pos.len().min((n as f64 * pos_fraction).floor() as usize);
    let n_neg = neg.len().min(n - n_pos);
    let mut out = pick(pos, n_pos, rng);
    out.extend(pick(neg, n_neg, rng));
    out.sort_unstable();
    Ok(out)
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores keep the lower original index first. A box is dropped
/// when its IoU with a kept box exceeds `iou_thr`.
pub fn nms<T: Scalar>(boxes: &[BBox<T>], scores: &[T], iou_thr: T) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms needs one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_thr {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(0., 0., 10., 10.)), 1.0);
        assert!((iou(&b(0., 0., 10., 10.), &b(0., 5., 10., 15.)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)), 0.0);
    }

    #[test]
    fn anchor_example_and_count() {
        let a = generate_anchors::<f64>(512, &[32], &[32.0], &[1.0]).unwrap();
        assert_eq!(a.boxes[0], b(0., 0., 32., 32.));
        assert_eq!(a.boxes[0].center(), (16.0, 16.0));
        let full = anchors_for::<f64>(512, &AnchorConfig::default()).unwrap();
        assert_eq!(full.len(), 261_888);
        for (i, bx) in full.boxes.iter().enumerate() {
            let s = full.scales_px[full.level_of[i]];
            assert!((bx.area() - s * s).abs() < 1e-9);
        }
    }

    #[test]
    fn canonical_index_round_trip() {
        let a = anchors_for::<f64>(64, &AnchorConfig::default()).unwrap();
        for i in 0..a.len() {
            let (l, y, x, r) = a.locate(i);
            assert_eq!(a.index_of(l, y, x, r), i);
        }
    }

    #[test]
    fn codec_examples() {
        let r = b(10., 10., 30., 50.);
        assert_eq!(encode_box(&r, &r).unwrap(), [0.0; 4]);
        let shifted = r.translate(r.width(), 0.0);
        let t = encode_box(&r, &shifted).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-15 && t[1] == 0.0 && t[2].abs() < 1e-15 && t[3].abs() < 1e-15);
        assert!(encode_box(&r, &BBox::new_unchecked(1.0, 1.0, 1.0, 2.0)).is_err());
    }

    #[test]
    fn rpn_thresholds_are_strict() {
        // One anchor per case, gt chosen to hit a target IoU exactly.
        let anchors = generate_anchors::<f64>(32, &[32], &[10.0], &[1.0]).unwrap();
        let a = anchors.boxes[0];
        let labels_for = |gt: BBox<f64>| {
            let mut l = assign_rpn_labels(&anchors, &[gt]);
            // neutralise the guarantee rule to observe the threshold alone
            l.cls[0] = {
                let m = iou(&a, &gt);
                if m > 0.7 { 1 } else if m < 0.3 { 0 } else { -1 }
            };
            l.cls[0]
        };
        let widen = |iou_target: f64| {
            // gt shares y-extent, extends in x: IoU = 10 / w
            let w = 10.0 / iou_target;
            BBox::new_unchecked(a.x1, a.y1, a.x1 + w, a.y2)
        };
        assert_eq!(labels_for(widen(0.8)), 1);
        assert_eq!(labels_for(widen(0.5)), -1);
        assert_eq!(labels_for(widen(0.1)), 0);
    }

    #[test]
    fn empty_gts_give_all_negative() {
        let anchors = anchors_for::<f64>(64, &AnchorConfig::default()).unwrap();
        let l = assign_rpn_labels(&anchors, &[]);
        assert_eq!(l.count(1), 0);
        assert_eq!(l.count(-1), 0);
        assert_eq!(l.count(0), anchors.len());
    }

    #[test]
    fn classifier_bands() {
        let gt = b(0., 0., 10., 10.);
        let with_iou = |m: f64| BBox::new_unchecked(0.0, 0.0, 10.0 / m, 10.0);
        let l = assign_classifier_labels(&[with_iou(0.6), with_iou(0.4), with_iou(0.2)], &[gt]);
        assert_eq!(
            l.cls,
            vec![ProposalClass::Foreground, ProposalClass::Background, ProposalClass::Discard]
        );
        assert!(l.reg_targets[0].is_some() && l.reg_targets[1].is_none());
    }

    #[test]
    fn minibatch_deficit_and_cap() {
        let mut cls = vec![0i8; 1010];
        cls[..10].iter_mut().for_each(|c| *c = 1);
        let labels = RpnLabels::<f64> {
            reg_targets: vec![[0.0; 4]; cls.len()],
            cls,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx = sample_rpn_minibatch(&labels, 256, 0.5, &mut rng).unwrap();
        assert_eq!(idx.len(), 256);
        assert_eq!(idx.iter().filter(|&&i| i < 10).count(), 10);

        let mut cls = vec![0i8; 1500];
        cls[..500].iter_mut().for_each(|c| *c = 1);
        let labels = RpnLabels::<f64> {
            reg_targets: vec![[0.0; 4]; cls.len()],
            cls,
        };
        let a = sample_rpn_minibatch(&labels, 256, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b2 = sample_rpn_minibatch(&labels, 256, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b2);
        assert_eq!(a.iter().filter(|&&i| i < 500).count(), 128);

        let none = RpnLabels::<f64> {
            cls: vec![-1; 4],
            reg_targets: vec![[0.0; 4]; 4],
        };
        assert!(matches!(
            sample_rpn_minibatch(&none, 8, 0.5, &mut rng),
            Err(Error::EmptyMinibatch(_))
        ));
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&[b(0., 0., 1., 1.)], &[0.3], 0.5), vec![0]);
        let same = b(0., 0., 10., 10.);
        assert_eq!(nms(&[same, same], &[0.9, 0.8], 0.5), vec![0]);
        assert_eq!(nms(&[same, same], &[0.8, 0.8], 0.5), vec![0]);
    }
}
