//! Single-file checkpoint: magic, JSON manifest, then every tensor as little-endian `f64`.
//!
//! ```text
//! b"NDCKPT01" | u64 manifest length | manifest JSON | param values | adam m | adam v
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::DecoderType;
use crate::error::{Error, Result};
use crate::model::{Detector, DetectorConfig};
use crate::nn::ParamKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{Adam, AdamHyper, EpochLog, TrainConfig};

const MAGIC: &[u8; 8] = b"NDCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamEntry {
    pub hyper: AdamHyper,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Scalar type the model was trained in.
    pub dtype: String,
    pub decoder_type: DecoderType,
    pub config: DetectorConfig,
    /// Last completed epoch; 0 for an untrained model.
    pub epoch: usize,
    /// Normalization percentile of the training set.
    pub p99: Option<f64>,
    pub train: Option<TrainConfig>,
    pub log: Vec<EpochLog>,
    pub params: Vec<ParamEntry>,
    pub adam: Option<AdamEntry>,
}

pub struct Checkpoint<T: Scalar> {
    pub manifest: Manifest,
    pub detector: Detector<T>,
    pub adam: Option<Adam<T>>,
}

/// Training-side metadata stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub p99: Option<f64>,
    pub train: Option<TrainConfig>,
    pub log: Vec<EpochLog>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    det: &Detector<T>,
    meta: &CheckpointMeta,
    adam: Option<&Adam<T>>,
) -> Result<()> {
    let manifest = Manifest {
        version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        decoder_type: det.decoder_type(),
        config: det.config.clone(),
        epoch: meta.epoch,
        p99: meta.p99,
        train: meta.train.clone(),
        log: meta.log.clone(),
        params: det
            .store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        adam: adam.map(|a| AdamEntry {
            hyper: a.hyper,
            step: a.step,
        }),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(path, e);
    {
        let mut w = BufWriter::new(fs::File::create(&tmp).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let mut put = |t: &Tensor<T>| -> Result<()> {
            for &v in t.data() {
                w.write_all(&v.as_f64().to_le_bytes()).map_err(io)?;
            }
            Ok(())
        };
        for (_, p) in det.store.iter() {
            put(&p.value)?;
        }
        if let Some(a) = adam {
            for t in a.m.iter().chain(&a.v) {
                put(t)?;
            }
        }
        w.flush().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

fn split_archive<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Manifest, &'a [u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Version(format!("{} is not a checkpoint archive", path.display())));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Version(format!("{} is truncated", path.display())))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| Error::Serde(e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }
    Ok((manifest, &bytes[16 + len..]))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_archive(path, &bytes)?.0)
}

/// Rebuilds the detector from the stored config and fills every tensor.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, data) = split_archive(path, &bytes)?;
    let mut det = Detector::<T>::new(manifest.config.clone())?;
    let expected: Vec<ParamEntry> = det
        .store
        .iter()
        .map(|(_, p)| ParamEntry {
            name: p.name.clone(),
            kind: p.kind,
            shape: p.value.shape().to_vec(),
        })
        .collect();
    if expected != manifest.params {
        return Err(Error::Version(
            "parameter table does not match the architecture described by the config".into(),
        ));
    }
    let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let n_params: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let n_total = n_params * if manifest.adam.is_some() { 3 } else { 1 };
    if data.len() != 8 * n_total {
        return Err(Error::Version(format!(
            "checkpoint holds {} values, manifest describes {n_total}",
            data.len() / 8
        )));
    }
    let mut take = |shape: &[usize]| -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let v: Vec<T> = values.by_ref().take(n).map(T::lit).collect();
        Tensor::from_vec(shape, v)
    };
    for e in &expected {
        let t = take(&e.shape)?;
        det.store.set(&e.name, t)?;
    }
    let adam = match &manifest.adam {
        None => None,
        Some(a) => {
            let m = expected.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
            let v = expected.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
            Some(Adam {
                hyper: a.hyper,
                step: a.step,
                m,
                v,
            })
        }
    };
    Ok(Checkpoint {
        manifest,
        detector: det,
        adam,
    })
}

impl Manifest {
    /// Fails unless the stored architecture equals `config` (proposal settings may differ).
    pub fn ensure_compatible(&self, config: &DetectorConfig) -> Result<()> {
        let same = self.config.image_size == config.image_size
            && self.config.backbone == config.backbone
            && self.config.heads == config.heads
            && self.config.anchors == config.anchors;
        if same {
            Ok(())
        } else {
            Err(Error::Version(format!(
                "checkpoint was trained with {} ({} px), requested config differs",
                self.decoder_type, self.config.image_size
            )))
        }
    }
}
