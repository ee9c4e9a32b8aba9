//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fail.
//!
//! Run with `cargo test -p nodule-detect --test acceptance`.

mod common;

use std::time::Instant;

use common::{grad_check, micro_detector, oracles, phantom_dataset, random_batch, rng};
use nodule_detect::backbone::{DecoderType, PYRAMID_STRIDES};
use nodule_detect::eval::{average_froc, detect_dataset, froc, scan_results};
use nodule_detect::model::{Detector, DetectorConfig};
use nodule_detect::nn::{Graph, Mode};
use nodule_detect::targets::{anchors_for, assign_classifier_labels, assign_rpn_labels, decode_box, encode_box, generate_anchors, AnchorConfig};
use nodule_detect::train::{step_loss, TrainConfig, Trainer};
use nodule_detect::{BBox, Tensor};
use rand::Rng;

const DECODERS: [DecoderType; 2] = [DecoderType::TypeI, DecoderType::TypeII];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Published sensitivity rows and the averages quoted for them, in percent.
const TABLE: [(&str, [f64; 6], f64); 3] = [
    ("Faster R-CNN (VGG16)", [55.8, 66.3, 74.7, 81.2, 84.8, 87.5], 75.1),
    ("DPN U-Net Type I", [60.9, 71.3, 77.7, 84.2, 87.6, 88.9], 78.4),
    ("DPN U-Net Type II", [64.6, 74.1, 80.7, 85.3, 88.3, 89.8], 80.5),
];
/// Rounding of the quoted averages; the baseline row sits exactly on the edge.
const TABLE_TOL: f64 = 0.05 + 1e-9;

fn metric_arithmetic() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, row, quoted) in TABLE {
        let fr: Vec<f64> = row.iter().map(|s| s / 100.0).collect();
        let avg = 100.0 * average_froc(&fr).unwrap();
        ok &= (avg - quoted).abs() <= TABLE_TOL;
        parts.push(format!("{name} {avg:.3} vs {quoted}"));
    }
    outcome(ok, parts.join("; "))
}

fn froc_oracle() -> Outcome {
    let mut r = rng(7001);
    let cases = 100;
    let mut bad = 0;
    for _ in 0..cases {
        let scans = oracles::random_froc_case(&mut r);
        let c = froc(&scans).unwrap();
        let pts = oracles::froc_points(&scans);
        if c.points != pts || c.sens_at != oracles::sens_at(&pts) {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("{cases} three-scan cases, {bad} mismatches"))
}

fn label_oracle() -> Outcome {
    let anchors = generate_anchors::<f64>(64, &[16, 8], &[24.0, 12.0], &[0.5, 1.0, 2.0]).unwrap();
    let mut r = rng(7002);
    let (mut bad, configs) = (0, 100);
    for _ in 0..configs {
        let n = r.random_range(1..=3);
        let gts = oracles::random_gts(&mut r, 64.0, n);
        let rpn = assign_rpn_labels(&anchors, &gts);
        let (cls, target) = oracles::rpn_labels(&anchors, &gts);
        let rpn_ok = rpn.cls == cls
            && target.iter().enumerate().all(|(i, t)| {
                let want = t.map_or([0.0; 4], |j| oracles::encode(&anchors.boxes[i], &gts[j]));
                (0..4).all(|k| (rpn.reg_targets[i][k] - want[k]).abs() < 1e-12)
            });
        let props = oracles::random_proposals(&mut r, 64.0, &gts, 40);
        let head = assign_classifier_labels(&props, &gts);
        let head_ok = oracles::classifier_labels(&props, &gts)
            .iter()
            .enumerate()
            .all(|(i, (c, j))| head.cls[i] == *c && head.reg_targets[i].is_some() == j.is_some());
        if !(rpn_ok && head_ok) {
            bad += 1;
        }
    }
    outcome(
        bad == 0,
        format!("{configs} gt configurations on 8x8 + 4x4 anchor grids, {bad} mismatches"),
    )
}

const GRAD_H: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;
const GRAD_PROBES: usize = 200;

fn gradients() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for d in DECODERS {
        let det = micro_detector(d, 32, 3);
        let batch = random_batch(2, 32, 4);
        let probes = grad_check(&det, &batch, GRAD_PROBES, GRAD_H, 5);
        let worst = probes.iter().map(|p| p.rel_err()).fold(0.0, f64::max);
        let within = probes.iter().filter(|p| p.rel_err() < GRAD_TOL).count();
        ok &= worst < GRAD_TOL;
        // Same probes at smaller steps: the error shrinks with h when the
        // gap comes from activation kinks inside the stencil.
        let trend: Vec<String> = [1e-4, 1e-5, 1e-6]
            .iter()
            .map(|&h| {
                let w = grad_check(&det, &batch, GRAD_PROBES, h, 5)
                    .iter()
                    .map(|p| p.rel_err())
                    .fold(0.0, f64::max);
                format!("h={h:.0e}: {w:.1e}")
            })
            .collect();
        parts.push(format!(
            "{d}: max rel err {worst:.2e} at h={GRAD_H:.0e} ({within}/{} probes < {GRAD_TOL:.0e}); {}",
            probes.len(),
            trend.join(", ")
        ));
    }
    outcome(ok, parts.join(" | "))
}

fn shapes() -> Outcome {
    let mut ok = true;
    for size in [64, 128, 512] {
        for d in DECODERS {
            let det = micro_detector(d, size, 1);
            let p = det.pyramid(&Tensor::zeros(&[1, 3, size, size])).unwrap();
            let want: Vec<_> = PYRAMID_STRIDES.iter().map(|s| (size / s, size / s)).collect();
            ok &= p.level_sizes() == want && p.channels() == det.config.backbone.pyramid_channels;
        }
    }
    let total = anchors_for::<f64>(512, &AnchorConfig::default()).unwrap().len();
    ok &= total == 261_888;
    outcome(
        ok,
        format!("sizes 64/128/512, both decoders, strides {PYRAMID_STRIDES:?}; 512 px anchors {total}"),
    )
}

fn codec() -> Outcome {
    let mut r = rng(7003);
    let mut worst = 0.0f64;
    let pairs = 10_000;
    for _ in 0..pairs {
        let mut b = || {
            let (x, y) = (r.random_range(-100.0..600.0), r.random_range(-100.0..600.0));
            let (w, h) = (r.random_range(0.5..300.0), r.random_range(0.5..300.0));
            BBox::<f64>::new(x, y, x + w, y + h).unwrap()
        };
        let (p, g) = (b(), b());
        let back = decode_box(&p, &encode_box(&p, &g).unwrap());
        for (a, e) in back.to_array().iter().zip(g.to_array()) {
            worst = worst.max((a - e).abs());
        }
    }
    outcome(worst < 1e-9, format!("{pairs} pairs, max abs error {worst:.2e}"))
}

/// Fixed before the run: data, schedule and thresholds.
fn smoke() -> Outcome {
    let t0 = Instant::now();
    let (_dir, data) = phantom_dataset::<f32>(32, 64, 7);
    let cfg = TrainConfig {
        epochs: 300,
        learning_rate: 3e-3,
        lr_after_drop: 3e-4,
        lr_drop_epoch: 250,
        ..Default::default()
    };
    let det = Detector::<f32>::new(DetectorConfig::micro().with_decoder(DecoderType::TypeII)).unwrap();
    let mut t = Trainer::new(det, cfg, Some(data.p99 as f64)).unwrap();
    if let Err(e) = t.fit(&data, None, |_| {}) {
        return outcome(false, format!("training failed: {e}"));
    }
    let first = t.log[0].loss.total;
    let last = t.log.last().unwrap().loss.total;
    let dets = detect_dataset(&t.detector, &data, 8).unwrap();
    let curve = froc(&scan_results(&data, &dets).unwrap()).unwrap();
    let s4 = curve.sens_at[3];
    let drop = 1.0 - last / first;
    outcome(
        drop >= 0.5 && s4 >= 0.9,
        format!(
            "{} samples, loss {first:.3} -> {last:.3} ({:.0}% drop), sensitivity {s4:.3} at 4 FPs/scan, {:.0} s",
            data.len(),
            100.0 * drop,
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn structure() -> Outcome {
    let counts: Vec<usize> = DECODERS
        .iter()
        .map(|&d| {
            let det = micro_detector(d, 64, 1);
            let batch = random_batch(1, 64, 2);
            let mut g = Graph::new(&det.store, Mode::Train, 0);
            let out = step_loss(&det, &mut g, &batch, 1.0, None, &mut rng(3)).unwrap();
            let grads = g.backward(out.loss);
            det.store.iter().filter_map(|(id, _)| grads.param(id).map(|t| t.numel())).sum()
        })
        .collect();
    outcome(
        counts[1] > counts[0],
        format!("parameters reached by the loss graph: Type I {}, Type II {}", counts[0], counts[1]),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("average FROC of published rows", metric_arithmetic),
        ("FROC equals threshold enumeration", froc_oracle),
        ("label assignment equals exhaustive thresholding", label_oracle),
        ("multi-task loss gradients vs central differences", gradients),
        ("pyramid shapes and anchor total", shapes),
        ("box codec identity", codec),
        ("phantom smoke run", smoke),
        ("Type II larger than Type I", structure),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = run();
        failed += usize::from(!o.pass);
        println!(
            "[{}] {}. {name}: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
