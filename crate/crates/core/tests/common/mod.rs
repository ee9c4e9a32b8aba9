#![allow(dead_code)]

pub mod oracles;

use nodule_detect::backbone::DecoderType;
use nodule_detect::model::{Detector, DetectorConfig};
use nodule_detect::nn::{Graph, Mode, ParamId};
use nodule_detect::train::{init_parameters, step_loss, Batch, LossPlan};
use nodule_detect::{BBox, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn micro_detector(decoder: DecoderType, image_size: usize, seed: u64) -> Detector<f64> {
    let mut cfg = DetectorConfig::micro().with_decoder(decoder);
    cfg.image_size = image_size;
    let mut det = Detector::<f64>::new(cfg).unwrap();
    init_parameters(&mut det.store, &mut rng(seed));
    det
}

/// Smooth random images with one square lesion box each.
pub fn random_batch(n: usize, size: usize, seed: u64) -> Batch<f64> {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..n * 3 * size * size).map(|_| r.random_range(0.0..1.0)).collect();
    let gts = (0..n)
        .map(|_| {
            let side = r.random_range(6.0..12.0);
            let x = r.random_range(0.0..size as f64 - side);
            let y = r.random_range(0.0..size as f64 - side);
            vec![BBox::new(x, y, x + side, y + side).unwrap()]
        })
        .collect();
    Batch {
        images: Tensor::from_vec(&[n, 3, size, size], data).unwrap(),
        gts,
    }
}

pub const GRAPH_SEED: u64 = 17;

pub fn loss_value(det: &Detector<f64>, batch: &Batch<f64>, plan: &LossPlan<f64>) -> f64 {
    let mut g = Graph::new(&det.store, Mode::Train, GRAPH_SEED);
    let out = step_loss(det, &mut g, batch, 1.0, Some(plan.clone()), &mut rng(0)).unwrap();
    g.value(out.loss).data()[0]
}

pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(GRAD_FLOOR);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Gradients below this magnitude are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;

/// Central differences on `n_probes` random trainable entries.
pub fn grad_check(det: &Detector<f64>, batch: &Batch<f64>, n_probes: usize, h: f64, seed: u64) -> Vec<Probe> {
    let (plan, grads) = {
        let mut g = Graph::new(&det.store, Mode::Train, GRAPH_SEED);
        let out = step_loss(det, &mut g, batch, 1.0, None, &mut rng(seed)).unwrap();
        (out.plan, g.backward(out.loss))
    };
    let trainable: Vec<ParamId> = det
        .store
        .iter()
        .filter(|(_, p)| p.kind.trainable())
        .map(|(id, _)| id)
        .collect();
    let mut r = rng(seed ^ 0x5eed);
    let mut probes = Vec::with_capacity(n_probes);
    for k in 0..n_probes {
        let id = trainable[k % trainable.len()];
        let id = if k < trainable.len() { id } else { trainable[r.random_range(0..trainable.len())] };
        let p = det.store.get(id);
        let index = r.random_range(0..p.value.numel());
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[index]);
        let mut plus = det.clone();
        plus.store.get_mut(id).value.data_mut()[index] += h;
        let mut minus = det.clone();
        minus.store.get_mut(id).value.data_mut()[index] -= h;
        let numeric = (loss_value(&plus, batch, &plan) - loss_value(&minus, batch, &plan)) / (2.0 * h);
        probes.push(Probe {
            name: p.name.clone(),
            index,
            analytic,
            numeric,
        });
    }
    probes
}


/// Small phantom dataset on disk: `n` volumes at `size` px, one nodule each.
pub fn phantom_dataset<T: nodule_detect::Scalar>(
    n: usize,
    size: usize,
    seed: u64,
) -> (tempfile::TempDir, nodule_detect::data::Dataset<T>) {
    use nodule_detect::data::{generate_phantoms, load_dataset, write_dataset, PhantomConfig};
    let cfg = PhantomConfig {
        n_volumes: n,
        image_size: size,
        slices_per_volume: 8,
        nodules_per_volume: [1, 1],
        nodule_radius_px: [3.0, 7.0],
        seed,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate_phantoms(&cfg).unwrap()).unwrap();
    let data = load_dataset(dir.path(), size, None).unwrap();
    (dir, data)
}
