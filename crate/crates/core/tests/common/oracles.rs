//! Brute-force reference implementations, written without the library's
//! helpers so agreement is evidence rather than tautology.

use nodule_detect::eval::{match_detections, Detection, FrocPoint, ScanResult, FP_RATES, MATCH_IOU};
use nodule_detect::targets::{AnchorSet, ProposalClass, HEAD_BACKGROUND_IOU, HEAD_FOREGROUND_IOU, RPN_NEGATIVE_IOU, RPN_POSITIVE_IOU};
use nodule_detect::BBox;
use rand::Rng;

pub fn iou(a: &BBox<f64>, b: &BBox<f64>) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter)
}

pub fn encode(r: &BBox<f64>, g: &BBox<f64>) -> [f64; 4] {
    let (pw, ph) = (r.x2 - r.x1, r.y2 - r.y1);
    let (gw, gh) = (g.x2 - g.x1, g.y2 - g.y1);
    [
        ((g.x1 + 0.5 * gw) - (r.x1 + 0.5 * pw)) / pw,
        ((g.y1 + 0.5 * gh) - (r.y1 + 0.5 * ph)) / ph,
        (gw / pw).ln(),
        (gh / ph).ln(),
    ]
}

/// First index of the maximum of `v` and the maximum itself.
fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Labels and target gt per anchor from the full IoU matrix.
pub fn rpn_labels(anchors: &AnchorSet<f64>, gts: &[BBox<f64>]) -> (Vec<i8>, Vec<Option<usize>>) {
    let m: Vec<Vec<f64>> = anchors.boxes.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    let mut cls = Vec::with_capacity(m.len());
    let mut target = Vec::with_capacity(m.len());
    for row in &m {
        if row.is_empty() {
            cls.push(0);
            target.push(None);
            continue;
        }
        let (j, best) = argmax(row);
        if best > RPN_POSITIVE_IOU {
            cls.push(1);
            target.push(Some(j));
        } else if best < RPN_NEGATIVE_IOU {
            cls.push(0);
            target.push(None);
        } else {
            cls.push(-1);
            target.push(None);
        }
    }
    // Later gts win a shared best anchor.
    for j in 0..gts.len() {
        let col: Vec<f64> = m.iter().map(|r| r[j]).collect();
        let (i, best) = argmax(&col);
        if best > 0.0 {
            cls[i] = 1;
            target[i] = Some(j);
        }
    }
    (cls, target)
}

pub fn classifier_labels(proposals: &[BBox<f64>], gts: &[BBox<f64>]) -> Vec<(ProposalClass, Option<usize>)> {
    proposals
        .iter()
        .map(|p| {
            let row: Vec<f64> = gts.iter().map(|g| iou(p, g)).collect();
            let (j, best) = if row.is_empty() { (0, 0.0) } else { argmax(&row) };
            if best > HEAD_FOREGROUND_IOU {
                (ProposalClass::Foreground, Some(j))
            } else if best >= HEAD_BACKGROUND_IOU {
                (ProposalClass::Background, None)
            } else {
                (ProposalClass::Discard, None)
            }
        })
        .collect()
}

/// Re-thresholds and re-matches from scratch at every distinct confidence.
pub fn froc_points(scans: &[ScanResult]) -> Vec<FrocPoint> {
    let mut thresholds: Vec<f64> = scans.iter().flat_map(|(d, _)| d.iter().map(|d| d.confidence)).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds.insert(0, f64::INFINITY);
    let n_gts: usize = scans.iter().map(|(_, g)| g.len()).sum();
    thresholds
        .into_iter()
        .map(|t| {
            let (mut tp, mut fp) = (0, 0);
            for (dets, gts) in scans {
                let kept: Vec<Detection> = dets.iter().filter(|d| d.confidence >= t).cloned().collect();
                let m = match_detections(&kept, gts, MATCH_IOU);
                tp += m.gt_hit.iter().filter(|&&h| h).count();
                fp += m.is_tp.iter().filter(|&&x| !x).count();
            }
            FrocPoint {
                threshold: t,
                avg_fp: fp as f64 / scans.len() as f64,
                sensitivity: tp as f64 / n_gts as f64,
            }
        })
        .collect()
}

/// Best sensitivity among operating points within each FP budget.
pub fn sens_at(points: &[FrocPoint]) -> [f64; 6] {
    FP_RATES.map(|f| {
        points
            .iter()
            .filter(|p| p.avg_fp <= f)
            .map(|p| p.sensitivity)
            .fold(0.0, f64::max)
    })
}

fn random_box<R: Rng>(r: &mut R, size: f64, lo: f64, hi: f64) -> BBox<f64> {
    let w = r.random_range(lo..hi).round();
    let h = r.random_range(lo..hi).round();
    let x = r.random_range(0.0..size - w).round();
    let y = r.random_range(0.0..size - h).round();
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Integer-aligned boxes so that IoU ties and band edges occur.
pub fn random_gts<R: Rng>(r: &mut R, size: f64, n: usize) -> Vec<BBox<f64>> {
    (0..n).map(|_| random_box(r, size, 4.0, size / 2.0)).collect()
}

/// Jittered copies of the gts plus unrelated boxes.
pub fn random_proposals<R: Rng>(r: &mut R, size: f64, gts: &[BBox<f64>], n: usize) -> Vec<BBox<f64>> {
    (0..n)
        .map(|k| {
            if k % 2 == 0 && !gts.is_empty() {
                let g = gts[r.random_range(0..gts.len())];
                let d = |r: &mut R| r.random_range(-4i32..=4) as f64;
                let (x1, y1) = ((g.x1 + d(r)).max(0.0), (g.y1 + d(r)).max(0.0));
                let (x2, y2) = ((g.x2 + d(r)).min(size), (g.y2 + d(r)).min(size));
                BBox::new(x1, y1, x2.max(x1 + 1.0), y2.max(y1 + 1.0)).unwrap()
            } else {
                random_box(r, size, 2.0, size / 2.0)
            }
        })
        .collect()
}

/// Three scans, 1-2 gts each, detections with confidences from a coarse grid so ties occur.
pub fn random_froc_case<R: Rng>(r: &mut R) -> Vec<ScanResult> {
    (0..3)
        .map(|s| {
            let n_gts = r.random_range(1..=2);
            let gts = random_gts(r, 64.0, n_gts);
            let n = r.random_range(0..8);
            let boxes = random_proposals(r, 64.0, &gts, n);
            let dets = boxes
                .into_iter()
                .map(|b| {
                    let c = r.random_range(0..=10) as f64 / 10.0;
                    Detection::new(format!("scan{s}"), b, c).unwrap()
                })
                .collect();
            (dets, gts)
        })
        .collect()
}
