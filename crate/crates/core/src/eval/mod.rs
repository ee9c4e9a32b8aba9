//! Detection matching, FROC analysis and report files.

mod render;

pub use render::{draw_overlay, plot_froc, Rgb, BLUE, GREEN, RED};

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{Detector, ScoredBox};
use crate::scalar::Scalar;
use crate::targets::iou;
use crate::tensor::Tensor;

/// Average false positives per scan at which sensitivity is reported.
pub const FP_RATES: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
pub const MATCH_IOU: f64 = 0.5;
pub const FROC_CSV: &str = "froc.csv";
pub const FROC_HEADER: [&str; 3] = ["threshold", "avg_fp_per_scan", "sensitivity"];
pub const SUMMARY_JSON: &str = "summary.json";
pub const FROC_PLOT: &str = "froc.png";
pub const DETECTIONS_CSV: &str = "detections.csv";
pub const DETECTIONS_HEADER: [&str; 6] = ["image_id", "x1", "y1", "x2", "y2", "confidence"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scan_id: String,
    pub bbox: BBox<f64>,
    pub confidence: f64,
}

impl Detection {
    pub fn new(scan_id: impl Into<String>, bbox: BBox<f64>, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self {
            scan_id: scan_id.into(),
            bbox,
            confidence,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub is_tp: Vec<bool>,
    /// Per ground truth.
    pub gt_hit: Vec<bool>,
}

/// Indices by descending confidence; equal confidences keep input order.
fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy matching: by descending confidence, each detection takes the
/// highest-IoU unmatched ground truth if that IoU exceeds `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[BBox<f64>], iou_thr: f64) -> MatchResult {
    let mut is_tp = vec![false; dets.len()];
    let mut gt_hit = vec![false; gts.len()];
    for i in confidence_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if gt_hit[j] {
                continue;
            }
            let v = iou(&dets[i].bbox, g);
            if v > iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            is_tp[i] = true;
            gt_hit[j] = true;
        }
    }
    MatchResult { is_tp, gt_hit }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    /// Detections with confidence >= threshold are kept; the first point uses `+inf`.
    pub threshold: f64,
    pub avg_fp: f64,
    pub sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    /// Ordered by descending threshold.
    pub points: Vec<FrocPoint>,
    /// Sensitivity at each of [`FP_RATES`].
    pub sens_at: [f64; 6],
    pub average_froc: f64,
}

/// One scan: its detections and ground-truth boxes.
pub type ScanResult = (Vec<Detection>, Vec<BBox<f64>>);

/// FROC over scans. Each distinct confidence is a threshold; `sens_at[f]` is
/// the sensitivity of the lowest threshold whose average FP count is `<= f`.
pub fn froc(scans: &[ScanResult]) -> Result<FrocCurve> {
    if scans.is_empty() {
        return Err(Error::UndefinedSensitivity("no scans".into()));
    }
    let total_gts: usize = scans.iter().map(|(_, g)| g.len()).sum();
    if total_gts == 0 {
        return Err(Error::UndefinedSensitivity("no ground-truth boxes".into()));
    }
    // (confidence, is_tp) of every detection over all scans.
    let mut events: Vec<(f64, bool)> = Vec::new();
    for (dets, gts) in scans {
        if let Some(d) = dets.iter().find(|d| !(0.0..=1.0).contains(&d.confidence)) {
            return Err(Error::invalid(format!("confidence {} outside [0, 1]", d.confidence)));
        }
        let m = match_detections(dets, gts, MATCH_IOU);
        events.extend(dets.iter().zip(&m.is_tp).map(|(d, &tp)| (d.confidence, tp)));
    }
    events.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let n_scans = scans.len() as f64;
    let n_gts = total_gts as f64;
    let mut points = vec![FrocPoint {
        threshold: f64::INFINITY,
        avg_fp: 0.0,
        sensitivity: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < events.len() {
        let t = events[k].0;
        while k < events.len() && events[k].0 == t {
            if events[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(FrocPoint {
            threshold: t,
            avg_fp: fp as f64 / n_scans,
            sensitivity: tp as f64 / n_gts,
        });
    }
    let sens_at = sens_at_rates(&points);
    Ok(FrocCurve {
        average_froc: average_froc(&sens_at)?,
        points,
        sens_at,
    })
}

/// Step interpolation over points ordered by descending threshold.
pub fn sens_at_rates(points: &[FrocPoint]) -> [f64; 6] {
    FP_RATES.map(|f| {
        points
            .iter()
            .take_while(|p| p.avg_fp <= f)
            .last()
            .map_or(0.0, |p| p.sensitivity)
    })
}

/// Mean of the six sensitivities.
pub fn average_froc(sens: &[f64]) -> Result<f64> {
    if sens.len() != FP_RATES.len() {
        return Err(Error::invalid(format!(
            "average FROC needs {} sensitivities, got {}",
            FP_RATES.len(),
            sens.len()
        )));
    }
    if let Some(s) = sens.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::invalid(format!("sensitivity {s} outside [0, 1]")));
    }
    Ok(sens.iter().sum::<f64>() / sens.len() as f64)
}

/// Eval-mode detections for every sample, in dataset order, `batch_size` images per forward pass.
pub fn detect_dataset<T: Scalar>(
    detector: &Detector<T>,
    data: &Dataset<T>,
    batch_size: usize,
) -> Result<Vec<Vec<ScoredBox<T>>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let chunks: Vec<_> = data.samples.chunks(batch_size).collect();
    let per_chunk = chunks
        .par_iter()
        .map(|chunk| {
            let images: Vec<_> = chunk.iter().map(|s| s.pixels.clone()).collect();
            detector.detect(&Tensor::stack(&images)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Pairs each sample's detections with its ground truth; the sample id is the scan id.
pub fn scan_results<T: Scalar>(data: &Dataset<T>, detections: &[Vec<ScoredBox<T>>]) -> Result<Vec<ScanResult>> {
    if detections.len() != data.len() {
        return Err(Error::invalid(format!(
            "{} detection lists for {} samples",
            detections.len(),
            data.len()
        )));
    }
    data.samples
        .iter()
        .zip(detections)
        .map(|(s, dets)| {
            let dets = dets
                .iter()
                .map(|d| Detection::new(s.key_slice_id.clone(), d.bbox.cast(), d.score.as_f64().clamp(0.0, 1.0)))
                .collect::<Result<Vec<_>>>()?;
            Ok((dets, s.boxes.iter().map(|b| b.cast()).collect()))
        })
        .collect()
}

/// `image_id,x1,y1,x2,y2,confidence`, one row per detection.
pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let ser = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(DETECTIONS_HEADER).map_err(ser)?;
    for d in dets {
        let b = d.bbox;
        w.write_record([
            d.scan_id.clone(),
            b.x1.to_string(),
            b.y1.to_string(),
            b.x2.to_string(),
            b.y2.to_string(),
            d.confidence.to_string(),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let header = r.headers().map_err(|e| Error::ingest(path, e.to_string()))?.clone();
    if header.iter().map(str::trim).ne(DETECTIONS_HEADER) {
        return Err(Error::ingest(path, format!("expected header {}", DETECTIONS_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::ingest(path, format!("line {line}: {e}")))?;
        let num = |k: usize| -> Result<f64> {
            row.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::ingest(path, format!("line {line}: bad number in column {}", DETECTIONS_HEADER[k])))
        };
        let bbox = BBox::new(num(1)?, num(2)?, num(3)?, num(4)?)
            .map_err(|e| Error::ingest(path, format!("line {line}: {e}")))?;
        let det = Detection::new(row.get(0).unwrap_or("").trim(), bbox, num(5)?)
            .map_err(|e| Error::ingest(path, format!("line {line}: {e}")))?;
        out.push(det);
    }
    Ok(out)
}

fn rate_key(f: f64) -> String {
    format!("sens_at_{f}")
}

/// `froc.csv`, `summary.json` and `froc.png` under `dir`.
pub fn emit_report(curve: &FrocCurve, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(FROC_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::ingest(&csv_path, e.to_string()))?;
    let ser = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(FROC_HEADER).map_err(ser)?;
    for p in &curve.points {
        w.write_record([p.threshold.to_string(), p.avg_fp.to_string(), p.sensitivity.to_string()])
            .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let mut summary = serde_json::Map::new();
    for (f, s) in FP_RATES.iter().zip(curve.sens_at) {
        summary.insert(rate_key(*f), serde_json::json!(s));
    }
    summary.insert("average_froc".into(), serde_json::json!(curve.average_froc));
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Serde(e.to_string()))?;
    let sum_path = dir.join(SUMMARY_JSON);
    fs::write(&sum_path, json).map_err(|e| Error::io(&sum_path, e))?;

    let plot_path = dir.join(FROC_PLOT);
    plot_froc(curve)
        .save(&plot_path)
        .map_err(|e| Error::io(&plot_path, std::io::Error::other(e)))
}

/// Reads back what [`emit_report`] wrote.
pub fn read_report(dir: &Path) -> Result<FrocCurve> {
    let csv_path = dir.join(FROC_CSV);
    let mut r = csv::Reader::from_path(&csv_path).map_err(|e| Error::ingest(&csv_path, e.to_string()))?;
    let mut points = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| Error::ingest(&csv_path, format!("line {}: {e}", i + 2)))?;
        let num = |k: usize| -> Result<f64> {
            row.get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::ingest(&csv_path, format!("line {}: bad number", i + 2)))
        };
        points.push(FrocPoint {
            threshold: num(0)?,
            avg_fp: num(1)?,
            sensitivity: num(2)?,
        });
    }
    let sum_path = dir.join(SUMMARY_JSON);
    let text = fs::read_to_string(&sum_path).map_err(|e| Error::io(&sum_path, e))?;
    let map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
    let get = |k: &str| -> Result<f64> {
        map.get(k)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::ingest(&sum_path, format!("missing key {k}")))
    };
    let mut sens_at = [0.0; 6];
    for (s, f) in sens_at.iter_mut().zip(FP_RATES) {
        *s = get(&rate_key(f))?;
    }
    Ok(FrocCurve {
        points,
        sens_at,
        average_froc: get("average_froc")?,
    })
}

/// Table-style text: one header row of FP rates, one row of percentages.
pub fn format_table(name: &str, curve: &FrocCurve) -> String {
    let mut head = format!("{:<24}", "FPs per scan");
    let mut row = format!("{:<24}", name);
    for (f, s) in FP_RATES.iter().zip(curve.sens_at) {
        head.push_str(&format!("{:>7}", f));
        row.push_str(&format!("{:>7.1}", 100.0 * s));
    }
    head.push_str(&format!("{:>9}", "average"));
    row.push_str(&format!("{:>9.1}", 100.0 * curve.average_froc));
    format!("{head}\n{row}")
}
