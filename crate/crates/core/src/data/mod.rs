//! CT slice preprocessing: HU normalization, 2.5D stacking, resizing and augmentation.

mod io;
mod phantom;

pub use io::{
    load_annotations, load_dataset, normalize_volume, read_volume, volume_path, write_annotations, write_dataset,
    write_volume, AnnotationRecord, Dataset, LesionType, ANNOTATION_FILE, ANNOTATION_HEADER,
    VOLUME_DIR,
};
pub use phantom::{generate_phantoms, PhantomConfig, PhantomVolume};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lowest and highest representable Hounsfield values.
pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 3071.0;

/// Row-major `height x width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "{width}x{height} grid needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: T) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }
}

/// One axial slice in Hounsfield units.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSlice<T> {
    pub pixels: Grid<T>,
    /// `(row, col)` pixel spacing; metadata only.
    pub spacing_mm: (T, T),
    pub slice_index: usize,
}

impl<T: Scalar> RawSlice<T> {
    pub fn new(pixels: Grid<T>, spacing_mm: (T, T), slice_index: usize) -> Result<Self> {
        if !(spacing_mm.0 > T::zero() && spacing_mm.1 > T::zero()) {
            return Err(Error::invalid("pixel spacing must be positive"));
        }
        let (lo, hi) = (T::lit(HU_MIN), T::lit(HU_MAX));
        if let Some(v) = pixels.data.iter().find(|&&v| !(v >= lo && v <= hi)) {
            return Err(Error::invalid(format!("HU value {v} outside [{HU_MIN}, {HU_MAX}]")));
        }
        Ok(Self {
            pixels,
            spacing_mm,
            slice_index,
        })
    }
}

/// Relative linear attenuation `1 + HU / 1000`, clipped at zero (water = 1, air = 0).
#[inline]
pub fn hu_to_attenuation<T: Scalar>(hu: T) -> T {
    (T::one() + hu / T::lit(1000.0)).max(T::zero())
}

/// Attenuation divided by the dataset percentile `p99`.
pub fn normalize_hu<T: Scalar>(slice: &RawSlice<T>, p99: T) -> Result<Grid<T>> {
    if !(p99 > T::zero()) {
        return Err(Error::invalid(format!("normalization percentile must be positive, got {p99}")));
    }
    let data = slice
        .pixels
        .data
        .iter()
        .map(|&hu| hu_to_attenuation(hu) / p99)
        .collect();
    Grid::new(slice.pixels.width, slice.pixels.height, data)
}

/// Nearest-rank percentile: element `ceil(q * N) - 1` of the sorted values.
pub fn percentile_nearest_rank<T: Scalar>(values: &mut [T], q: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("percentile rank {q} outside (0, 1]")));
    }
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len()) - 1;
    let (_, v, _) = values.select_nth_unstable_by(rank, |a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(*v)
}

/// 99th percentile of attenuation values pooled over every pixel of every slice.
pub fn dataset_percentile_99<T: Scalar>(slices: &[RawSlice<T>]) -> Result<T> {
    if slices.is_empty() {
        return Err(Error::invalid("percentile of an empty dataset"));
    }
    let mut pooled: Vec<T> = slices
        .iter()
        .flat_map(|s| s.pixels.data.iter().map(|&hu| hu_to_attenuation(hu)))
        .collect();
    percentile_nearest_rank(&mut pooled, 0.99)
}

/// A normalized 2.5D sample: `[3, H, W]` with channels (key - 1, key, key + 1).
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack<T> {
    pub pixels: Tensor<T>,
    pub boxes: Vec<BBox<T>>,
    pub key_slice_id: String,
}

impl<T: Scalar> SliceStack<T> {
    pub fn new(pixels: Tensor<T>, boxes: Vec<BBox<T>>, key_slice_id: String) -> Result<Self> {
        let s = Self {
            pixels,
            boxes,
            key_slice_id,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.shape().len() != 3 || self.pixels.shape()[0] != 3 {
            return Err(Error::invalid(format!(
                "slice stack must be [3, H, W], got {:?}",
                self.pixels.shape()
            )));
        }
        if let Some(v) = self.pixels.data().iter().find(|&&v| !(v >= T::zero())) {
            return Err(Error::invalid(format!("normalized pixel {v} is negative or NaN")));
        }
        let (w, h) = (T::from_usize_lossy(self.width()), T::from_usize_lossy(self.height()));
        for b in &self.boxes {
            if !b.is_valid() || !b.within(w, h) {
                return Err(Error::invalid(format!("box {b:?} outside {w}x{h} image")));
            }
        }
        Ok(())
    }

    fn channel(&self, c: usize) -> &[T] {
        let hw = self.width() * self.height();
        &self.pixels.data()[c * hw..(c + 1) * hw]
    }
}

/// Stacks `(key - 1, key, key + 1)`, replicating the key slice at volume ends.
pub fn make_slice_stack<T: Scalar>(
    volume: &[Grid<T>],
    key: usize,
    boxes: Vec<BBox<T>>,
    key_slice_id: String,
) -> Result<SliceStack<T>> {
    if volume.is_empty() {
        return Err(Error::invalid("empty volume"));
    }
    if key >= volume.len() {
        return Err(Error::invalid(format!(
            "key slice {key} out of range for {} slices",
            volume.len()
        )));
    }
    let prev = if key == 0 { key } else { key - 1 };
    let next = if key + 1 >= volume.len() { key } else { key + 1 };
    let (w, h) = (volume[key].width, volume[key].height);
    let mut data = Vec::with_capacity(3 * w * h);
    for idx in [prev, key, next] {
        let s = &volume[idx];
        if s.width != w || s.height != h {
            return Err(Error::invalid("volume slices differ in size"));
        }
        data.extend_from_slice(&s.data);
    }
    SliceStack::new(Tensor::from_vec(&[3, h, w], data)?, boxes, key_slice_id)
}

/// Bilinear resample to `target x target` (half-pixel centers) with boxes scaled to match.
pub fn resize_with_boxes<T: Scalar>(stack: &SliceStack<T>, target: usize) -> Result<SliceStack<T>> {
    if target == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let (w, h) = (stack.width(), stack.height());
    if w == target && h == target {
        return Ok(stack.clone());
    }
    let sx = T::from_usize_lossy(w) / T::from_usize_lossy(target);
    let sy = T::from_usize_lossy(h) / T::from_usize_lossy(target);
    let half = T::lit(0.5);
    let axis = |i: usize, scale: T, n: usize| -> (usize, usize, T) {
        let src = ((T::from_usize_lossy(i) + half) * scale - half).max(T::zero());
        let lo = src.floor().to_usize().unwrap_or(0).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = if hi == lo { T::zero() } else { src - T::from_usize_lossy(lo) };
        (lo, hi, frac)
    };
    let xs: Vec<_> = (0..target).map(|x| axis(x, sx, w)).collect();
    let ys: Vec<_> = (0..target).map(|y| axis(y, sy, h)).collect();
    let mut out = Vec::with_capacity(3 * target * target);
    for c in 0..3 {
        let src = stack.channel(c);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    let tf = T::from_usize_lossy(target);
    let bx = T::from_usize_lossy(w);
    let by = T::from_usize_lossy(h);
    let boxes = stack
        .boxes
        .iter()
        .map(|b| b.scale(tf / bx, tf / by))
        .collect();
    SliceStack::new(Tensor::from_vec(&[3, target, target], out)?, boxes, stack.key_slice_id.clone())
}

/// Geometric augmentation drawn by [`augment`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, 0 to 3.
    pub quarter_turns: u8,
}

impl AugmentPlan {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let rotate = rng.random_bool(0.5);
        let quarter_turns = if rotate { rng.random_range(1..=3u8) } else { 0 };
        Self {
            hflip,
            vflip,
            quarter_turns,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.quarter_turns == 0
    }
}

/// Horizontal flip, vertical flip and rotation by a multiple of 90 degrees,
/// each applied with probability 0.5, boxes moved with the pixels.
pub fn augment<T: Scalar, R: Rng + ?Sized>(stack: &SliceStack<T>, rng: &mut R) -> Result<SliceStack<T>> {
    apply_augment(stack, AugmentPlan::draw(rng))
}

pub fn apply_augment<T: Scalar>(stack: &SliceStack<T>, plan: AugmentPlan) -> Result<SliceStack<T>> {
    let mut out = stack.clone();
    if plan.hflip {
        out = hflip(&out);
    }
    if plan.vflip {
        out = vflip(&out);
    }
    if plan.quarter_turns > 0 {
        if out.width() != out.height() {
            return Err(Error::invalid("rotation needs a square image"));
        }
        for _ in 0..plan.quarter_turns {
            out = rotate_ccw(&out);
        }
    }
    Ok(out)
}

fn remap<T: Scalar>(
    stack: &SliceStack<T>,
    out_w: usize,
    out_h: usize,
    src_of: impl Fn(usize, usize) -> (usize, usize),
    box_map: impl Fn(&BBox<T>) -> BBox<T>,
) -> SliceStack<T> {
    let w = stack.width();
    let mut data = Vec::with_capacity(3 * out_w * out_h);
    for c in 0..3 {
        let src = stack.channel(c);
        for y in 0..out_h {
            for x in 0..out_w {
                let (sx, sy) = src_of(x, y);
                data.push(src[sy * w + sx]);
            }
        }
    }
    SliceStack {
        pixels: Tensor::from_vec(&[3, out_h, out_w], data).expect("remap shape"),
        boxes: stack.boxes.iter().map(box_map).collect(),
        key_slice_id: stack.key_slice_id.clone(),
    }
}

fn hflip<T: Scalar>(s: &SliceStack<T>) -> SliceStack<T> {
    let (w, h) = (s.width(), s.height());
    let wf = T::from_usize_lossy(w);
    remap(s, w, h, |x, y| (w - 1 - x, y), |b| BBox::new_unchecked(wf - b.x2, b.y1, wf - b.x1, b.y2))
}

fn vflip<T: Scalar>(s: &SliceStack<T>) -> SliceStack<T> {
    let (w, h) = (s.width(), s.height());
    let hf = T::from_usize_lossy(h);
    remap(s, w, h, |x, y| (x, h - 1 - y), |b| BBox::new_unchecked(b.x1, hf - b.y2, b.x2, hf - b.y1))
}

/// Counter-clockwise quarter turn: point `(x, y)` moves to `(y, W - x)`.
fn rotate_ccw<T: Scalar>(s: &SliceStack<T>) -> SliceStack<T> {
    let w = s.width();
    let wf = T::from_usize_lossy(w);
    remap(s, w, w, |x, y| (w - 1 - y, x), |b| BBox::new_unchecked(b.y1, wf - b.x2, b.y2, wf - b.x1))
}
