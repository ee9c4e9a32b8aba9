//! On-disk dataset layout: an annotation CSV plus one raw volume file per study.
//!
//! ```text
//! <dir>/annotations.csv
//! <dir>/volumes/<study_id>.vol   "W H N\n" then W*H*N little-endian i16 values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::phantom::PhantomVolume;
use super::{hu_to_attenuation, make_slice_stack, resize_with_boxes, Grid, SliceStack, HU_MAX, HU_MIN};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

pub const ANNOTATION_HEADER: [&str; 7] = ["study_id", "key_slice_id", "x1", "y1", "x2", "y2", "lesion_type"];
pub const ANNOTATION_FILE: &str = "annotations.csv";
pub const VOLUME_DIR: &str = "volumes";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LesionType {
    Lung,
    Other(String),
}

impl LesionType {
    /// Accepts `lung` (any case) or the numeric lung code `5`.
    pub fn parse(s: &str) -> Self {
        let t = s.trim();
        if t.eq_ignore_ascii_case("lung") || t == "5" {
            LesionType::Lung
        } else {
            LesionType::Other(t.to_string())
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            LesionType::Lung => "lung",
            LesionType::Other(s) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub study_id: String,
    pub key_slice_id: usize,
    pub bbox: BBox<f64>,
    pub lesion_type: LesionType,
}

pub fn volume_path(dir: &Path, study_id: &str) -> PathBuf {
    dir.join(VOLUME_DIR).join(format!("{study_id}.vol"))
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::ingest(path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::ingest(path, format!("line 1: {e}")))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols != ANNOTATION_HEADER {
        return Err(Error::ingest(
            path,
            format!("line 1: expected header {:?}, found {:?}", ANNOTATION_HEADER, cols),
        ));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::ingest(path, format!("line {line}: {e}")))?;
        let field = |k: usize| row.get(k).unwrap_or("");
        let num = |k: usize| -> Result<f64> {
            field(k)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::ingest(path, format!("line {line}: column {} is not a number: {:?}", ANNOTATION_HEADER[k], field(k))))
        };
        let key_slice_id = field(1).parse::<usize>().map_err(|_| {
            Error::ingest(path, format!("line {line}: key_slice_id is not a slice index: {:?}", field(1)))
        })?;
        let (x1, y1, x2, y2) = (num(2)?, num(3)?, num(4)?, num(5)?);
        let bbox = BBox::new(x1, y1, x2, y2)
            .map_err(|_| Error::ingest(path, format!("line {line}: degenerate box ({x1}, {y1}, {x2}, {y2})")))?;
        if field(0).is_empty() {
            return Err(Error::ingest(path, format!("line {line}: empty study_id")));
        }
        out.push(AnnotationRecord {
            study_id: field(0).to_string(),
            key_slice_id,
            bbox,
            lesion_type: LesionType::parse(field(6)),
        });
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let ser = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(ANNOTATION_HEADER).map_err(ser)?;
    for r in records {
        let b = r.bbox;
        w.write_record([
            r.study_id.clone(),
            r.key_slice_id.to_string(),
            b.x1.to_string(),
            b.y1.to_string(),
            b.x2.to_string(),
            b.y2.to_string(),
            r.lesion_type.as_str().to_string(),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_volume(path: &Path, slices: &[Grid<i16>]) -> Result<()> {
    let first = slices.first().ok_or_else(|| Error::invalid("cannot write an empty volume"))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{} {} {}", first.width, first.height, slices.len()).map_err(io)?;
    for s in slices {
        if s.width != first.width || s.height != first.height {
            return Err(Error::invalid("volume slices differ in size"));
        }
        for v in &s.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_volume(path: &Path) -> Result<Vec<Grid<i16>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::ingest(path, format!("line 1: bad volume header {:?}", header.trim())))?;
    let [w, h, n] = dims[..] else {
        return Err(Error::ingest(path, format!("line 1: expected \"W H N\", found {:?}", header.trim())));
    };
    if w == 0 || h == 0 || n == 0 {
        return Err(Error::ingest(path, "line 1: empty volume"));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 2 * w * h * n {
        return Err(Error::ingest(
            path,
            format!("expected {} data bytes for {w}x{h}x{n}, found {}", 2 * w * h * n, bytes.len()),
        ));
    }
    let values: Vec<i16> = bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
    if let Some(v) = values.iter().find(|&&v| (v as f64) < HU_MIN || (v as f64) > HU_MAX) {
        return Err(Error::ingest(path, format!("HU value {v} outside [{HU_MIN}, {HU_MAX}]")));
    }
    values
        .chunks_exact(w * h)
        .map(|c| Grid::new(w, h, c.to_vec()))
        .collect()
}

/// Writes volumes and the annotation table under `dir`.
pub fn write_dataset(dir: &Path, volumes: &[PhantomVolume]) -> Result<()> {
    let vol_dir = dir.join(VOLUME_DIR);
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    for v in volumes {
        write_volume(&volume_path(dir, &v.study_id), &v.slices)?;
    }
    let records: Vec<_> = volumes.iter().flat_map(|v| v.annotations.iter().cloned()).collect();
    write_annotations(&dir.join(ANNOTATION_FILE), &records)
}

/// Model-ready key-slice samples, sorted by `(study_id, key_slice)`.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub samples: Vec<SliceStack<T>>,
    /// Attenuation percentile used for normalization.
    pub p99: T,
}

impl<T> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Nearest-rank 99th percentile of attenuation over integer HU values, from a histogram.
fn percentile_99_of_volumes<T: Scalar>(volumes: &[&Vec<Grid<i16>>]) -> Result<T> {
    let offset = -(HU_MIN as i64);
    let mut counts = vec![0u64; (HU_MAX - HU_MIN) as usize + 1];
    let mut total = 0u64;
    for vol in volumes {
        for s in vol.iter() {
            for &v in &s.data {
                counts[(v as i64 + offset) as usize] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("percentile of an empty dataset"));
    }
    let rank = ((0.99 * total as f64).ceil() as u64).clamp(1, total);
    let mut seen = 0u64;
    for (i, &c) in counts.iter().enumerate() {
        seen += c;
        if seen >= rank {
            let hu = T::lit(i as f64 - offset as f64);
            return Ok(hu_to_attenuation(hu));
        }
    }
    unreachable!("rank never exceeds total")
}

/// Attenuation of every voxel divided by `p99`.
pub fn normalize_volume<T: Scalar>(volume: &[Grid<i16>], p99: T) -> Vec<Grid<T>> {
    volume
        .iter()
        .map(|s| Grid {
            width: s.width,
            height: s.height,
            data: s.data.iter().map(|&v| hu_to_attenuation(T::lit(v as f64)) / p99).collect(),
        })
        .collect()
}

/// Loads every lung key slice under `dir` as a normalized, resized 2.5D stack.
///
/// `p99` overrides the percentile computed from the loaded volumes.
pub fn load_dataset<T: Scalar>(dir: &Path, image_size: usize, p99: Option<T>) -> Result<Dataset<T>> {
    let ann_path = dir.join(ANNOTATION_FILE);
    let records = load_annotations(&ann_path)?;
    let mut grouped: BTreeMap<(String, usize), Vec<BBox<f64>>> = BTreeMap::new();
    for r in records.into_iter().filter(|r| r.lesion_type == LesionType::Lung) {
        grouped.entry((r.study_id, r.key_slice_id)).or_default().push(r.bbox);
    }
    let mut volumes: BTreeMap<String, Vec<Grid<i16>>> = BTreeMap::new();
    for (study, _) in grouped.keys() {
        if !volumes.contains_key(study) {
            volumes.insert(study.clone(), read_volume(&volume_path(dir, study))?);
        }
    }
    let p99 = match p99 {
        Some(p) => p,
        None => percentile_99_of_volumes(&volumes.values().collect::<Vec<_>>())?,
    };
    if !(p99 > T::zero()) {
        return Err(Error::invalid(format!("normalization percentile must be positive, got {p99}")));
    }
    let normalized: BTreeMap<&str, Vec<Grid<T>>> =
        volumes.iter().map(|(study, vol)| (study.as_str(), normalize_volume(vol, p99))).collect();
    let mut samples = Vec::with_capacity(grouped.len());
    for ((study, key), boxes) in grouped {
        let vol = &normalized[study.as_str()];
        let path = volume_path(dir, &study);
        if key >= vol.len() {
            return Err(Error::ingest(
                &ann_path,
                format!("key slice {key} of {study} outside its {} slices", vol.len()),
            ));
        }
        let (w, h) = (vol[key].width as f64, vol[key].height as f64);
        if let Some(b) = boxes.iter().find(|b| !b.within(w, h)) {
            return Err(Error::ingest(&path, format!("box {b:?} outside the {w}x{h} slice")));
        }
        let boxes = boxes.iter().map(|b| b.cast()).collect();
        let stack = make_slice_stack(vol, key, boxes, format!("{study}:{key}"))?;
        samples.push(resize_with_boxes(&stack, image_size)?);
    }
    Ok(Dataset { samples, p99 })
}
