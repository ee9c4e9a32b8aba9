//! Pyramid shapes, anchor totals and parameter counts.

mod common;

use common::{micro_detector, random_batch, rng};
use nodule_detect::backbone::{DecoderType, PYRAMID_STRIDES};
use nodule_detect::model::{Detector, DetectorConfig};
use nodule_detect::nn::{Graph, Mode, ParamStore};
use nodule_detect::targets::{anchors_for, AnchorConfig};
use nodule_detect::train::step_loss;
use nodule_detect::{BackboneConfig, Tensor};

const DECODERS: [DecoderType; 2] = [DecoderType::TypeI, DecoderType::TypeII];

#[test]
fn pyramid_has_five_levels_at_fixed_strides() {
    for size in [64, 128] {
        for d in DECODERS {
            let det = micro_detector(d, size, 1);
            let p = det.pyramid(&Tensor::zeros(&[1, 3, size, size])).unwrap();
            let want: Vec<_> = PYRAMID_STRIDES.iter().map(|s| (size / s, size / s)).collect();
            assert_eq!(p.level_sizes(), want, "{d} at {size}");
            assert_eq!(p.channels(), det.config.backbone.pyramid_channels);
        }
    }
}

#[test]
fn default_anchor_total_at_512() {
    let a = anchors_for::<f64>(512, &AnchorConfig::default()).unwrap();
    assert_eq!(a.len(), 3 * (16 * 16 + 32 * 32 + 64 * 64 + 128 * 128 + 256 * 256));
    assert_eq!(a.len(), 261_888);
}

#[test]
fn encoder_stage_channels_follow_closed_form() {
    let cfg = BackboneConfig::micro();
    let det = micro_detector(DecoderType::TypeI, 64, 1);
    let mut g = Graph::new(&det.store, Mode::Eval, 0);
    let x = g.input(Tensor::zeros(&[1, 3, 64, 64]));
    let stem = det.backbone.encode(&mut g, x).unwrap();
    for (s, stream) in stem.iter().enumerate() {
        let (r, d) = cfg.stage_channels(s);
        assert_eq!(stream.channels(), r + d, "stage {s}");
        assert_eq!(d, 2 * cfg.dense_increment_k[s] + cfg.dense_increment_k[s] * cfg.stage_block_counts[s]);
    }
}

/// Scalar count of every parameter that receives a gradient from the loss.
pub fn graph_param_count(det: &Detector<f64>) -> usize {
    let batch = random_batch(2, det.config.image_size, 5);
    let mut g = Graph::new(&det.store, Mode::Train, 1);
    let out = step_loss(det, &mut g, &batch, 1.0, None, &mut rng(2)).unwrap();
    let grads = g.backward(out.loss);
    det.store.iter().filter_map(|(id, _)| grads.param(id).map(|t| t.numel())).sum()
}

fn store_count(s: &ParamStore<f64>) -> usize {
    s.iter().filter(|(_, p)| p.kind.trainable()).map(|(_, p)| p.value.numel()).sum()
}

#[test]
fn type2_has_more_parameters_than_type1() {
    let counts: Vec<(usize, usize)> = DECODERS
        .iter()
        .map(|&d| {
            let det = micro_detector(d, 64, 1);
            (graph_param_count(&det), store_count(&det.store))
        })
        .collect();
    for (graph, store) in &counts {
        assert_eq!(graph, store, "every trainable tensor must reach the loss");
    }
    assert!(counts[1].0 > counts[0].0, "{counts:?}");
    let full = |d| store_count(&Detector::<f64>::new(DetectorConfig::default().with_decoder(d)).unwrap().store);
    assert!(full(DecoderType::TypeII) > full(DecoderType::TypeI));
}

#[test]
fn encoder_input_gradient_matches_central_difference() {
    let det = micro_detector(DecoderType::TypeII, 32, 4);
    let img = random_batch(2, 32, 6).images;
    let value = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
        let mut g = Graph::new(&det.store, Mode::Train, 0);
        let v = g.input_with_grad(x.clone());
        let stages = det.backbone.encode(&mut g, v).unwrap();
        let mut total = 0.0;
        let mut parts = Vec::new();
        for s in &stages {
            let t = g.value(s.var).clone();
            total += t.data().iter().sum::<f64>();
            parts.push((s.var, Tensor::full(t.shape(), 1.0)));
        }
        let l = g.scalar_with_grads(total, parts);
        (total, g.backward(l).var(v).cloned())
    };
    let (_, grad) = value(&img);
    let grad = grad.unwrap();
    let h = 1e-3;
    for idx in [0, 517, 1023, 2 * 3 * 32 * 32 - 1] {
        let mut p = img.clone();
        p.data_mut()[idx] += h;
        let mut m = img.clone();
        m.data_mut()[idx] -= h;
        let n = (value(&p).0 - value(&m).0) / (2.0 * h);
        let a = grad.data()[idx];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
        assert!(rel < 1e-4, "pixel {idx}: analytic {a} numeric {n}");
    }
}
