//! Joint end-to-end training of the RPN and classifier.

mod loss;
mod optim;
mod step;

pub use loss::{head_loss, rpn_loss, smooth_l1, smooth_l1_grad, LossBreakdown, StageLoss};
pub use optim::{apply_bn_updates, Adam, AdamHyper};
pub use step::{make_plan, step_loss, Batch, LossPlan, RoiSample, StepLoss};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::nn::{Graph, Mode, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_LOG_HEADER: [&str; 7] = ["epoch", "rpn_cls", "rpn_reg", "head_cls", "head_reg", "total", "lr"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning rate from epoch `lr_drop_epoch + 1` on.
    pub lr_after_drop: f64,
    pub lr_drop_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of both regression terms.
    pub lambda: f64,
    pub bn_momentum: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 1e-4,
            lr_after_drop: 1e-4,
            lr_drop_epoch: 5,
            epochs: 15,
            batch_size: 2,
            seed: 0,
            lambda: 1.0,
            bn_momentum: 0.1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.eps, self.lr_after_drop, self.lambda];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("learning rates, eps and lambda must be positive"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::invalid("weight_decay must be >= 0 and bn_momentum in (0, 1]"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Learning rate of 1-based `epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch <= cfg.lr_drop_epoch {
        cfg.learning_rate
    } else {
        cfg.lr_after_drop
    }
}

/// Xavier-uniform kernels, zero biases, unit BN scale, zero BN shift,
/// running statistics reset to (0, 1). Parameters are visited in store order.
pub fn init_parameters<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R) {
    for (_, p) in store.iter_mut() {
        match p.kind {
            ParamKind::Kernel => {
                let a = (6.0 / (p.fan_in + p.fan_out) as f64).sqrt();
                for v in p.value.data_mut() {
                    *v = T::lit(rng.random_range(-a..=a));
                }
            }
            ParamKind::Bias | ParamKind::BnShift | ParamKind::RunningMean => {
                p.value.data_mut().iter_mut().for_each(|v| *v = T::zero())
            }
            ParamKind::BnScale | ParamKind::RunningVar => p.value.data_mut().iter_mut().for_each(|v| *v = T::one()),
        }
    }
}

/// Mean loss components of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown<f64>,
    pub lr: f64,
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    let ser = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(TRAIN_LOG_HEADER).map_err(ser)?;
    for e in log {
        let l = &e.loss;
        w.write_record([
            e.epoch.to_string(),
            l.rpn_cls.to_string(),
            l.rpn_reg.to_string(),
            l.head_cls.to_string(),
            l.head_reg.to_string(),
            l.total.to_string(),
            e.lr.to_string(),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Model, optimizer state and loss history of a run.
pub struct Trainer<T: Scalar> {
    pub detector: Detector<T>,
    pub adam: Adam<T>,
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub log: Vec<EpochLog>,
    pub p99: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run: initializes the parameters from `config.seed`.
    pub fn new(mut detector: Detector<T>, config: TrainConfig, p99: Option<f64>) -> Result<Self> {
        config.validate()?;
        init_parameters(&mut detector.store, &mut epoch_rng(config.seed, 0));
        let adam = Adam::new(&detector.store, config.adam());
        Ok(Self {
            detector,
            adam,
            config,
            epochs_done: 0,
            log: Vec::new(),
            p99,
        })
    }

    /// Continues a run from a checkpoint that carries optimizer state.
    pub fn resume(ckpt: Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = ckpt
            .adam
            .ok_or_else(|| Error::Version("checkpoint has no optimizer state to resume from".into()))?;
        adam.check_matches(&ckpt.detector.store)?;
        Ok(Self {
            detector: ckpt.detector,
            adam: Adam {
                hyper: config.adam(),
                ..adam
            },
            config,
            epochs_done: ckpt.manifest.epoch,
            log: ckpt.manifest.log,
            p99: ckpt.manifest.p99,
        })
    }

    /// Runs epoch `epochs_done + 1`.
    pub fn run_epoch(&mut self, data: &Dataset<T>) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::invalid("cannot train on an empty dataset"));
        }
        let epoch = self.epochs_done + 1;
        let lr = lr_schedule(epoch, &self.config);
        let lambda = T::lit(self.config.lambda);
        let mut rng = epoch_rng(self.config.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut steps = Vec::new();
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut gts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = if self.config.augment {
                    augment(&data.samples[i], &mut rng)?
                } else {
                    data.samples[i].clone()
                };
                images.push(s.pixels);
                gts.push(s.boxes);
            }
            let batch = Batch {
                images: Tensor::stack(&images)?,
                gts,
            };
            let graph_seed: u64 = rng.random();
            let (grads, bn, breakdown) = {
                let mut g = Graph::new(&self.detector.store, Mode::Train, graph_seed);
                let out = step_loss(&self.detector, &mut g, &batch, lambda, None, &mut rng)?;
                if let Some(component) = out.breakdown.non_finite_component() {
                    return Err(Error::NonFiniteLoss { component, epoch, step });
                }
                let grads = g.backward(out.loss);
                (grads, g.take_bn_updates(), out.breakdown)
            };
            self.adam.update(&mut self.detector.store, &grads, lr);
            apply_bn_updates(&mut self.detector.store, &bn, self.config.bn_momentum);
            steps.push(LossBreakdown {
                rpn_cls: breakdown.rpn_cls.as_f64(),
                rpn_reg: breakdown.rpn_reg.as_f64(),
                head_cls: breakdown.head_cls.as_f64(),
                head_reg: breakdown.head_reg.as_f64(),
                total: breakdown.total.as_f64(),
                n_cls: breakdown.n_cls,
                n_reg: breakdown.n_reg,
            });
        }
        let entry = EpochLog {
            epoch,
            loss: LossBreakdown::mean(&steps),
            lr,
        };
        self.epochs_done = epoch;
        self.log.push(entry.clone());
        Ok(entry)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            epoch: self.epochs_done,
            p99: self.p99,
            train: Some(self.config.clone()),
            log: self.log.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.detector, &self.meta(), Some(&self.adam))
    }

    /// Trains up to `config.epochs`, writing a checkpoint and the loss log
    /// after every epoch when `out_dir` is given.
    pub fn fit(&mut self, data: &Dataset<T>, out_dir: Option<&Path>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epochs_done < self.config.epochs {
            let entry = self.run_epoch(data)?;
            if let Some(dir) = out_dir {
                self.save(&checkpoint_path(dir, entry.epoch))?;
                write_train_log(&dir.join(TRAIN_LOG_FILE), &self.log)?;
            }
            on_epoch(&entry);
        }
        Ok(())
    }
}

/// Fresh training run of `detector` on `data`.
pub fn fit<T: Scalar>(
    detector: Detector<T>,
    data: &Dataset<T>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Trainer<T>> {
    let mut t = Trainer::new(detector, config.clone(), Some(data.p99.as_f64()))?;
    t.fit(data, out_dir, |_| {})?;
    Ok(t)
}
