//! Invariants over random inputs.

mod common;

use common::{micro_detector, random_batch, rng};
use nodule_detect::backbone::DecoderType;
use nodule_detect::data::{apply_augment, AugmentPlan, SliceStack};
use nodule_detect::nn::{Graph, Mode, ParamKind, ParamStore};
use nodule_detect::targets::{anchors_for, decode_box, encode_box, nms, AnchorConfig};
use nodule_detect::train::{step_loss, Adam, AdamHyper};
use nodule_detect::{BBox, Tensor};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox<f64>> {
    (0.0f64..500.0, 0.0f64..500.0, 0.5f64..200.0, 0.5f64..200.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

/// Stack of zeros with ones inside each integer-aligned box, on every channel.
fn masked_stack(size: usize, boxes: &[BBox<f64>]) -> SliceStack<f64> {
    let mut data = vec![0.0; 3 * size * size];
    for b in boxes {
        for c in 0..3 {
            for y in b.y1 as usize..b.y2 as usize {
                for x in b.x1 as usize..b.x2 as usize {
                    data[(c * size + y) * size + x] = 1.0;
                }
            }
        }
    }
    SliceStack::new(Tensor::from_vec(&[3, size, size], data).unwrap(), boxes.to_vec(), "s:0".into()).unwrap()
}

/// Tight pixel-edge bounds of the non-zero region on channel `c`.
fn mask_bounds(s: &SliceStack<f64>, c: usize) -> BBox<f64> {
    let (w, h) = (s.width(), s.height());
    let (mut x1, mut y1, mut x2, mut y2) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if s.pixels.data()[(c * h + y) * w + x] > 0.5 {
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decode_inverts_encode(r in bbox(), g in bbox()) {
        let back = decode_box(&r, &encode_box(&r, &g).unwrap());
        for (a, b) in back.to_array().iter().zip(g.to_array()) {
            prop_assert!((a - b).abs() < 1e-9, "{back:?} vs {g:?}");
        }
    }

    #[test]
    fn nms_is_permutation_invariant(
        boxes in prop::collection::vec(bbox(), 1..30),
        perm_seed in any::<u64>(),
    ) {
        // Distinct scores so the greedy order is unique.
        let scores: Vec<f64> = (0..boxes.len()).map(|i| 1.0 / (i as f64 + 2.0)).collect();
        let keep = nms(&boxes, &scores, 0.5);
        let mut perm: Vec<usize> = (0..boxes.len()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng(perm_seed));
        let pb: Vec<_> = perm.iter().map(|&i| boxes[i]).collect();
        let ps: Vec<_> = perm.iter().map(|&i| scores[i]).collect();
        let keep_p: Vec<usize> = nms(&pb, &ps, 0.5).into_iter().map(|k| perm[k]).collect();
        prop_assert_eq!(keep, keep_p);
    }

    #[test]
    fn nms_keeps_no_overlapping_pair(boxes in prop::collection::vec(bbox(), 1..30), thr in 0.1f64..0.9) {
        let scores: Vec<f64> = (0..boxes.len()).map(|i| ((i * 7919) % 101) as f64).collect();
        let keep = nms(&boxes, &scores, thr);
        for (a, &i) in keep.iter().enumerate() {
            for &j in &keep[a + 1..] {
                prop_assert!(common::oracles::iou(&boxes[i], &boxes[j]) <= thr);
            }
        }
    }

    #[test]
    fn augment_moves_boxes_with_pixels(
        hflip in any::<bool>(),
        vflip in any::<bool>(),
        quarter_turns in 0u8..4,
        x in 0usize..24, y in 0usize..24, w in 1usize..8, h in 1usize..8,
    ) {
        let b = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap();
        let s = masked_stack(32, &[b]);
        let out = apply_augment(&s, AugmentPlan { hflip, vflip, quarter_turns }).unwrap();
        for c in 0..3 {
            prop_assert_eq!(mask_bounds(&out, c), out.boxes[0]);
        }
    }

    #[test]
    fn anchor_index_round_trips(level in 0usize..5, y in 0usize..64, x in 0usize..64, a in 0usize..3) {
        let anchors = anchors_for::<f64>(128, &AnchorConfig::default()).unwrap();
        let (h, w) = anchors.level_sizes[level];
        let (y, x) = (y % h, x % w);
        let i = anchors.index_of(level, y, x, a);
        prop_assert_eq!(anchors.locate(i), (level, y, x, a));
    }
}

#[test]
fn init_sets_documented_values_and_bounds() {
    let det = micro_detector(DecoderType::TypeII, 64, 9);
    for (_, p) in det.store.iter() {
        let d = p.value.data();
        match p.kind {
            ParamKind::Kernel => {
                let a = (6.0 / (p.fan_in + p.fan_out) as f64).sqrt();
                assert!(d.iter().all(|v| v.abs() <= a), "{}", p.name);
                let mean = d.iter().sum::<f64>() / d.len() as f64;
                assert!(d.len() < 64 || mean.abs() < 0.25 * a, "{} mean {mean}", p.name);
            }
            ParamKind::Bias | ParamKind::BnShift | ParamKind::RunningMean => assert!(d.iter().all(|&v| v == 0.0)),
            ParamKind::BnScale | ParamKind::RunningVar => assert!(d.iter().all(|&v| v == 1.0)),
        }
    }
    // Same seed, same parameters; different seed, different kernels.
    let again = micro_detector(DecoderType::TypeII, 64, 9);
    let other = micro_detector(DecoderType::TypeII, 64, 10);
    let kernels = |s: &ParamStore<f64>| -> Vec<f64> {
        s.iter().filter(|(_, p)| p.kind == ParamKind::Kernel).flat_map(|(_, p)| p.value.data().to_vec()).collect()
    };
    assert_eq!(kernels(&det.store), kernels(&again.store));
    assert_ne!(kernels(&det.store), kernels(&other.store));
}

#[test]
fn weight_decay_shrinks_kernels_only() {
    let det = micro_detector(DecoderType::TypeI, 64, 1);
    let batch = random_batch(2, 64, 2);
    let mut g = Graph::new(&det.store, Mode::Train, 3);
    let out = step_loss(&det, &mut g, &batch, 1.0, None, &mut rng(4)).unwrap();
    let grads = g.backward(out.loss);
    let hyper = |wd| AdamHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: wd,
    };
    let (lr, wd) = (1e-3, 1e-2);
    let mut plain = det.store.clone();
    Adam::new(&plain, hyper(0.0)).update(&mut plain, &grads, lr);
    let mut decayed = det.store.clone();
    Adam::new(&decayed, hyper(wd)).update(&mut decayed, &grads, lr);
    for ((_, p0), ((_, a), (_, b))) in det.store.iter().zip(plain.iter().zip(decayed.iter())) {
        for k in 0..p0.value.numel() {
            let w0 = p0.value.data()[k];
            let want = if p0.kind == ParamKind::Kernel { lr * wd * w0 } else { 0.0 };
            let got = a.value.data()[k] - b.value.data()[k];
            assert!((got - want).abs() < 1e-15, "{}[{k}] {got} vs {want}", p0.name);
        }
    }
}
