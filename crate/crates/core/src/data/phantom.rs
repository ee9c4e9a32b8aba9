//! Synthetic chest phantoms: lungs with bright ellipsoidal nodules and tubular vessel distractors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{AnnotationRecord, LesionType};
use super::{Grid, HU_MAX, HU_MIN};
use crate::error::{Error, Result};
use crate::geometry::BBox;

const AIR_HU: f64 = -1000.0;
const TISSUE_HU: f64 = 40.0;
const LUNG_HU: f64 = -850.0;
const BONE_HU: f64 = 700.0;
/// In-plane pixels per slice step when measuring 3D distances.
const SLICE_THICKNESS_PX: f64 = 2.0;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_volumes: usize,
    pub image_size: usize,
    pub slices_per_volume: usize,
    /// Inclusive range of nodules per volume.
    pub nodules_per_volume: [usize; 2],
    /// Inclusive range of in-plane nodule radii in pixels.
    pub nodule_radius_px: [f64; 2],
    /// Mean number of vessel segments per lung.
    pub distractor_density: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_hu: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_volumes: 32,
            image_size: 512,
            slices_per_volume: 16,
            nodules_per_volume: [1, 2],
            nodule_radius_px: [6.0, 24.0],
            distractor_density: 4.0,
            noise_hu: 20.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size as f64;
        let [rmin, rmax] = self.nodule_radius_px;
        if self.image_size < 16 {
            return Err(Error::invalid("image_size must be at least 16"));
        }
        if self.slices_per_volume == 0 {
            return Err(Error::invalid("slices_per_volume must be positive"));
        }
        let [nmin, nmax] = self.nodules_per_volume;
        if nmin == 0 || nmin > nmax {
            return Err(Error::invalid(format!(
                "nodules_per_volume [{nmin}, {nmax}] must satisfy 1 <= min <= max"
            )));
        }
        if !(rmin > 2.0 && rmin <= rmax && rmax < s / 4.0) {
            return Err(Error::invalid(format!(
                "nodule radius range [{rmin}, {rmax}] must lie in (2, {})",
                s / 4.0
            )));
        }
        if !(self.distractor_density >= 0.0 && self.distractor_density.is_finite()) {
            return Err(Error::invalid("distractor_density must be non-negative"));
        }
        if !(self.noise_hu >= 0.0 && self.noise_hu.is_finite()) {
            return Err(Error::invalid("noise_hu must be non-negative"));
        }
        Ok(())
    }
}

/// One generated volume in integer Hounsfield units plus its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomVolume {
    pub study_id: String,
    pub slices: Vec<Grid<i16>>,
    pub annotations: Vec<AnnotationRecord>,
}

/// Generates `n_volumes` phantoms. Each volume has its own RNG stream, so the
/// output depends only on the configuration.
pub fn generate_phantoms(config: &PhantomConfig) -> Result<Vec<PhantomVolume>> {
    config.validate()?;
    (0..config.n_volumes)
        .into_par_iter()
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(v as u64);
            generate_volume(config, v, &mut rng)
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn norm(&self, x: f64, y: f64) -> f64 {
        ((x - self.cx) / self.ax).powi(2) + ((y - self.cy) / self.ay).powi(2)
    }

    /// True when the disk of radius `r` around `(x, y)` lies inside, with a margin.
    fn contains_disk(&self, x: f64, y: f64, r: f64) -> bool {
        let (ax, ay) = (self.ax - r - 1.0, self.ay - r - 1.0);
        ax > 0.0 && ay > 0.0 && ((x - self.cx) / ax).powi(2) + ((y - self.cy) / ay).powi(2) <= 1.0
    }
}

struct Nodule {
    cx: f64,
    cy: f64,
    cz: usize,
    r: f64,
    rz: f64,
    hu: f64,
}

impl Nodule {
    fn z_extent(&self) -> (usize, usize) {
        let half = self.rz.floor() as usize;
        (self.cz.saturating_sub(half), self.cz + half)
    }

    /// In-plane radius of the cross-section on slice `z`.
    fn radius_at(&self, z: usize) -> Option<f64> {
        let dz = (z as f64 - self.cz as f64) / self.rz;
        (dz.abs() < 1.0 || z == self.cz).then(|| self.r * (1.0 - dz * dz).max(0.0).sqrt())
    }
}

struct Vessel {
    a: [f64; 3],
    b: [f64; 3],
    r: f64,
    hu: f64,
}

impl Vessel {
    fn distance(&self, p: [f64; 3]) -> f64 {
        let d: Vec<f64> = (0..3).map(|i| self.b[i] - self.a[i]).collect();
        let w: Vec<f64> = (0..3).map(|i| p[i] - self.a[i]).collect();
        let dd: f64 = d.iter().map(|v| v * v).sum();
        let t = if dd > 0.0 {
            (d.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / dd).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (0..3)
            .map(|i| (w[i] - t * d[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn generate_volume(config: &PhantomConfig, v: usize, rng: &mut ChaCha8Rng) -> Result<PhantomVolume> {
    let s = config.image_size as f64;
    let n_slices = config.slices_per_volume;
    let study_id = format!("phantom_{:04}", v);
    let body = Ellipse {
        cx: 0.5 * s,
        cy: 0.5 * s,
        ax: 0.46 * s,
        ay: 0.40 * s,
    };
    let lungs = [0.29, 0.71].map(|fx| Ellipse {
        cx: fx * s,
        cy: 0.5 * s,
        ax: 0.17 * s,
        ay: 0.30 * s,
    });
    let spine = (0.5 * s, 0.84 * s, 0.05 * s);

    let n_nodules = rng.random_range(config.nodules_per_volume[0]..=config.nodules_per_volume[1]);
    let mut nodules: Vec<Nodule> = Vec::with_capacity(n_nodules);
    for _ in 0..n_nodules {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let [rmin, rmax] = config.nodule_radius_px;
            let r = if rmax > rmin { rng.random_range(rmin..=rmax) } else { rmin };
            let rz = (r / SLICE_THICKNESS_PX * rng.random_range(0.6..=1.0)).max(1.0);
            let half = rz.floor() as usize;
            if 2 * half + 1 > n_slices {
                continue;
            }
            let cz = rng.random_range(half..n_slices - half);
            let lung = lungs[rng.random_range(0..2)];
            let cx = rng.random_range(lung.cx - lung.ax..lung.cx + lung.ax);
            let cy = rng.random_range(lung.cy - lung.ay..lung.cy + lung.ay);
            if !lung.contains_disk(cx, cy, r) {
                continue;
            }
            let cand = Nodule {
                cx,
                cy,
                cz,
                r,
                rz,
                hu: rng.random_range(0.0..=150.0),
            };
            let (lo, hi) = cand.z_extent();
            let clash = nodules.iter().any(|o| {
                let (olo, ohi) = o.z_extent();
                lo <= ohi && olo <= hi
            });
            if !clash {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(n) => nodules.push(n),
            None => {
                return Err(Error::GenerationFailure(format!(
                    "could not place nodule {} of {n_nodules} in {study_id} after {PLACEMENT_ATTEMPTS} attempts",
                    nodules.len() + 1
                )))
            }
        }
    }

    let vessel_scale = (s / 64.0).max(1.0);
    let mut vessels = Vec::new();
    for lung in &lungs {
        let whole = config.distractor_density.floor() as usize;
        let extra = rng.random_bool(config.distractor_density.fract());
        for _ in 0..whole + usize::from(extra) {
            let point = |rng: &mut ChaCha8Rng| loop {
                let x = rng.random_range(lung.cx - lung.ax..lung.cx + lung.ax);
                let y = rng.random_range(lung.cy - lung.ay..lung.cy + lung.ay);
                if lung.norm(x, y) <= 0.9 {
                    let z = rng.random_range(0.0..n_slices as f64) * SLICE_THICKNESS_PX;
                    return [x, y, z];
                }
            };
            let a = point(rng);
            let b = point(rng);
            vessels.push(Vessel {
                a,
                b,
                r: rng.random_range(0.6..=1.4) * vessel_scale,
                hu: rng.random_range(-50.0..=60.0),
            });
        }
    }

    let size = config.image_size;
    let mut base = Grid::filled(size, size, AIR_HU);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let hu = if (px - spine.0).powi(2) + (py - spine.1).powi(2) <= spine.2 * spine.2 {
                BONE_HU
            } else if lungs.iter().any(|l| l.norm(px, py) <= 1.0) {
                LUNG_HU
            } else if body.norm(px, py) <= 1.0 {
                TISSUE_HU
            } else {
                AIR_HU
            };
            base.set(x, y, hu);
        }
    }

    let noise = Normal::new(0.0, config.noise_hu.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
    let mut slices = Vec::with_capacity(n_slices);
    for z in 0..n_slices {
        let mut hu = base.clone();
        let pz = (z as f64 + 0.5) * SLICE_THICKNESS_PX;
        for vessel in &vessels {
            let (x0, x1) = span(vessel.a[0], vessel.b[0], vessel.r, size);
            let (y0, y1) = span(vessel.a[1], vessel.b[1], vessel.r, size);
            for y in y0..y1 {
                for x in x0..x1 {
                    if vessel.distance([x as f64 + 0.5, y as f64 + 0.5, pz]) <= vessel.r {
                        hu.set(x, y, vessel.hu);
                    }
                }
            }
        }
        for n in &nodules {
            if let Some(r) = n.radius_at(z) {
                for_disk(n.cx, n.cy, r, size, |x, y| hu.set(x, y, n.hu));
            }
        }
        let data = hu
            .data
            .iter()
            .map(|&v| {
                let jitter = if config.noise_hu > 0.0 { noise.sample(rng) } else { 0.0 };
                (v + jitter).round().clamp(HU_MIN, HU_MAX) as i16
            })
            .collect();
        slices.push(Grid::new(size, size, data)?);
    }

    let mut annotations = Vec::with_capacity(nodules.len());
    for n in &nodules {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for_disk(n.cx, n.cy, n.r, size, |x, y| {
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
        });
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::GenerationFailure(format!(
                "nodule in {study_id} rendered no pixels on its key slice"
            )));
        }
        annotations.push(AnnotationRecord {
            study_id: study_id.clone(),
            key_slice_id: n.cz,
            bbox: BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)?,
            lesion_type: LesionType::Lung,
        });
    }
    annotations.sort_by_key(|a| a.key_slice_id);

    Ok(PhantomVolume {
        study_id,
        slices,
        annotations,
    })
}

fn span(a: f64, b: f64, r: f64, size: usize) -> (usize, usize) {
    let lo = (a.min(b) - r - 1.0).floor().max(0.0) as usize;
    let hi = ((a.max(b) + r + 1.0).ceil().max(0.0) as usize).min(size);
    (lo.min(size), hi)
}

/// Visits pixels whose centers lie inside the disk.
fn for_disk(cx: f64, cy: f64, r: f64, size: usize, mut f: impl FnMut(usize, usize)) {
    let (x0, x1) = span(cx, cx, r, size);
    let (y0, y1) = span(cy, cy, r, size);
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                f(x, y);
            }
        }
    }
}
