//! Subcommand bodies. The CLI runs in single precision.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nodule_detect::checkpoint::{load_checkpoint, Manifest};
use nodule_detect::data::{
    generate_phantoms, load_annotations, load_dataset, make_slice_stack, normalize_volume, read_volume,
    resize_with_boxes, volume_path, write_dataset, LesionType, SliceStack, ANNOTATION_FILE, VOLUME_DIR,
};
use nodule_detect::eval::{
    detect_dataset, draw_overlay, emit_report, format_table, froc, match_detections, read_detections,
    scan_results, write_detections, Detection, ScanResult, DETECTIONS_CSV, MATCH_IOU,
};
use nodule_detect::train::{checkpoint_path, TRAIN_LOG_FILE};
use nodule_detect::{BBox, Detector, DetectorConfig, Tensor, Trainer};

use crate::config::{Resolved, RunConfig};

fn is_non_empty(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(e).with_context(|| format!("reading {}", dir.display())),
    }
}

pub fn generate(cfg: &RunConfig, out: Option<&Path>, n_volumes: Option<usize>, force: bool) -> Result<()> {
    let dir = cfg.dataset_dir(out);
    let mut pc = cfg.phantom.clone();
    if let Some(n) = n_volumes {
        pc.n_volumes = n;
    }
    pc.validate()?;
    if is_non_empty(&dir)? {
        if !force {
            bail!("{} is not empty; pass --force to replace the dataset", dir.display());
        }
        let vols = dir.join(VOLUME_DIR);
        if vols.exists() {
            fs::remove_dir_all(&vols).with_context(|| format!("removing {}", vols.display()))?;
        }
        let ann = dir.join(ANNOTATION_FILE);
        if ann.exists() {
            fs::remove_file(&ann).with_context(|| format!("removing {}", ann.display()))?;
        }
    }
    let volumes = generate_phantoms(&pc)?;
    write_dataset(&dir, &volumes)?;
    let n_ann: usize = volumes.iter().map(|v| v.annotations.len()).sum();
    println!(
        "generated {} volumes with {n_ann} annotations in {}",
        volumes.len(),
        dir.display()
    );
    Ok(())
}

/// Loads a checkpoint, checking it against the configured model when one was given.
fn load_detector(r: &Resolved, path: &Path) -> Result<(Detector<f32>, Manifest)> {
    let ckpt = load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    let mut det = ckpt.detector;
    if r.model_explicit {
        ckpt.manifest.ensure_compatible(&requested_model(r, &ckpt.manifest))?;
        det.config.proposals = r.config.model.proposals.clone();
    }
    Ok((det, ckpt.manifest))
}

/// Configured model, taking the decoder from the checkpoint unless one was chosen.
fn requested_model(r: &Resolved, manifest: &Manifest) -> DetectorConfig {
    let mut m = r.config.model.clone();
    if !r.decoder_explicit {
        m.backbone.decoder_type = manifest.decoder_type;
    }
    m
}

fn checkpoint_arg<'a>(r: &'a Resolved, flag: Option<&'a Path>) -> Result<&'a Path> {
    flag.or(r.config.paths.checkpoint.as_deref())
        .context("a checkpoint is required: pass --checkpoint or set paths.checkpoint")
}

pub fn train(r: &Resolved, data: Option<&Path>, out: Option<&Path>, resume: Option<&Path>, force: bool) -> Result<()> {
    let cfg = &r.config;
    if resume.is_none() && !r.decoder_explicit {
        bail!("choose a decoder with --decoder type1|type2 or model.backbone.decoder_type");
    }
    let data_dir = cfg.dataset_dir(data);
    let ckpt = match resume {
        Some(p) => {
            let c = load_checkpoint::<f32>(p).with_context(|| format!("loading {}", p.display()))?;
            if r.model_explicit {
                c.manifest.ensure_compatible(&requested_model(r, &c.manifest))?;
            }
            Some(c)
        }
        None => None,
    };
    let decoder = ckpt
        .as_ref()
        .map_or(cfg.model.backbone.decoder_type, |c| c.manifest.decoder_type);
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{decoder}")));
    if resume.is_none() && !force && is_non_empty(&out_dir)? {
        bail!("{} is not empty; pass --force to overwrite", out_dir.display());
    }
    let image_size = ckpt.as_ref().map_or(cfg.model.image_size, |c| c.detector.config.image_size);
    let p99 = ckpt.as_ref().and_then(|c| c.manifest.p99).map(|p| p as f32);
    let dataset = load_dataset::<f32>(&data_dir, image_size, p99)?;
    let mut trainer = match ckpt {
        Some(c) => Trainer::resume(c, cfg.train.clone())?,
        None => Trainer::new(Detector::new(cfg.model.clone())?, cfg.train.clone(), Some(dataset.p99 as f64))?,
    };
    println!(
        "training {decoder} on {} samples from {}, epochs {}..={}",
        dataset.len(),
        data_dir.display(),
        trainer.epochs_done + 1,
        trainer.config.epochs
    );
    trainer.fit(&dataset, Some(&out_dir), |e| {
        let l = &e.loss;
        println!(
            "epoch {:>4}  loss {:.4}  rpn cls {:.4} reg {:.4}  head cls {:.4} reg {:.4}  lr {:.1e}",
            e.epoch, l.total, l.rpn_cls, l.rpn_reg, l.head_cls, l.head_reg, e.lr
        );
    })?;
    println!(
        "final checkpoint {}, loss log {}",
        checkpoint_path(&out_dir, trainer.epochs_done).display(),
        out_dir.join(TRAIN_LOG_FILE).display()
    );
    Ok(())
}

/// Lung annotations grouped by `study:key`.
fn ground_truth(data_dir: &Path) -> Result<BTreeMap<String, Vec<BBox<f64>>>> {
    let mut gts: BTreeMap<String, Vec<BBox<f64>>> = BTreeMap::new();
    for a in load_annotations(&data_dir.join(ANNOTATION_FILE))? {
        if a.lesion_type == LesionType::Lung {
            gts.entry(format!("{}:{}", a.study_id, a.key_slice_id)).or_default().push(a.bbox);
        }
    }
    Ok(gts)
}

pub fn eval(
    r: &Resolved,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    detections_file: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = &r.config;
    let data_dir = cfg.dataset_dir(data);
    let (name, scans, default_out): (String, Vec<ScanResult>, PathBuf) = match detections_file {
        Some(file) => {
            let mut per_scan: BTreeMap<String, (Vec<Detection>, Vec<BBox<f64>>)> = ground_truth(&data_dir)?
                .into_iter()
                .map(|(id, g)| (id, (Vec::new(), g)))
                .collect();
            for d in read_detections(file)? {
                match per_scan.get_mut(&d.scan_id) {
                    Some(s) => s.0.push(d),
                    None => bail!("{}: image_id {} is not an annotated key slice", file.display(), d.scan_id),
                }
            }
            let stem = file.file_stem().map_or("detections".into(), |s| s.to_string_lossy().into_owned());
            let dir = file.parent().unwrap_or(Path::new(".")).join("eval");
            (stem, per_scan.into_values().collect(), dir)
        }
        None => {
            let path = checkpoint_arg(r, checkpoint)?;
            let (det, manifest) = load_detector(r, path)?;
            let p99 = manifest.p99.map(|p| p as f32);
            let dataset = load_dataset::<f32>(&data_dir, det.config.image_size, p99)?;
            let dets = detect_dataset(&det, &dataset, cfg.eval.batch_size)?;
            let name = format!("DPN U-Net {}", manifest.decoder_type);
            let dir = path.parent().unwrap_or(Path::new(".")).join("eval");
            (name, scan_results(&dataset, &dets)?, dir)
        }
    };
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or(default_out);
    let curve = froc(&scans)?;
    emit_report(&curve, &out_dir)?;
    println!("{}", format_table(&name, &curve));
    println!("{} scans, report in {}", scans.len(), out_dir.display());
    Ok(())
}

/// A model-ready stack plus the factor from model pixels back to slice pixels.
struct Item {
    stack: SliceStack<f32>,
    scale: f64,
}

fn dataset_items(dir: &Path, size: usize, p99: f32) -> Result<Vec<Item>> {
    let gts = ground_truth(dir)?;
    let mut volumes = BTreeMap::new();
    let mut items = Vec::with_capacity(gts.len());
    for (id, boxes) in gts {
        let (study, key) = id.rsplit_once(':').expect("ids are study:key");
        let key: usize = key.parse()?;
        if !volumes.contains_key(study) {
            let raw = read_volume(&volume_path(dir, study))?;
            volumes.insert(study.to_string(), normalize_volume::<f32>(&raw, p99));
        }
        let vol = &volumes[study];
        let boxes = boxes.iter().map(|b| b.cast()).collect();
        let stack = make_slice_stack(vol, key, boxes, id.clone())?;
        let scale = stack.width() as f64 / size as f64;
        items.push(Item {
            stack: resize_with_boxes(&stack, size)?,
            scale,
        });
    }
    Ok(items)
}

fn volume_items(files: &[PathBuf], size: usize, p99: f32) -> Result<Vec<Item>> {
    let mut items = Vec::new();
    for f in files {
        let study = f
            .file_stem()
            .with_context(|| format!("{} has no file name", f.display()))?
            .to_string_lossy();
        let vol = normalize_volume::<f32>(&read_volume(f)?, p99);
        for key in 0..vol.len() {
            let stack = make_slice_stack(&vol, key, Vec::new(), format!("{study}:{key}"))?;
            let scale = stack.width() as f64 / size as f64;
            items.push(Item {
                stack: resize_with_boxes(&stack, size)?,
                scale,
            });
        }
    }
    Ok(items)
}

pub fn predict(r: &Resolved, checkpoint: Option<&Path>, input: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let cfg = &r.config;
    let path = checkpoint_arg(r, checkpoint)?;
    let (det, manifest) = load_detector(r, path)?;
    let p99 = manifest
        .p99
        .context("checkpoint carries no normalization percentile")? as f32;
    let size = det.config.image_size;
    let items = match input {
        [dir] if dir.is_dir() => dataset_items(dir, size, p99)?,
        files => volume_items(files, size, p99)?,
    };
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or_else(|| PathBuf::from("predictions"));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut rows = Vec::new();
    for chunk in items.chunks(cfg.eval.batch_size) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|it| it.stack.pixels.clone()).collect();
        let found = det.detect(&Tensor::stack(&images)?)?;
        for (it, boxes) in chunk.iter().zip(found) {
            let s = &it.stack;
            let id = &s.key_slice_id;
            let dets = boxes
                .iter()
                .map(|b| Detection::new(id.as_str(), b.bbox.cast(), (b.score as f64).clamp(0.0, 1.0)))
                .collect::<nodule_detect::Result<Vec<_>>>()?;
            let gts: Vec<BBox<f64>> = s.boxes.iter().map(|b| b.cast()).collect();
            let hits = match_detections(&dets, &gts, MATCH_IOU).is_tp;
            let hw = s.width() * s.height();
            let gray: Vec<f64> = s.pixels.data()[hw..2 * hw].iter().map(|&v| v as f64).collect();
            let marks: Vec<_> = dets.iter().zip(&hits).map(|(d, &tp)| (d.bbox, d.confidence, tp)).collect();
            let png = out_dir.join(format!("{}.png", id.replace(':', "_")));
            draw_overlay(&gray, s.width(), s.height(), &gts, &marks)
                .save(&png)
                .with_context(|| format!("writing {}", png.display()))?;
            for d in dets {
                let b = d.bbox;
                let k = it.scale;
                let bbox = BBox::new(b.x1 * k, b.y1 * k, b.x2 * k, b.y2 * k)?;
                rows.push(Detection::new(d.scan_id, bbox, d.confidence)?);
            }
        }
    }
    write_detections(&out_dir.join(DETECTIONS_CSV), &rows)?;
    println!(
        "{} images, {} detections; overlays and {DETECTIONS_CSV} in {}",
        items.len(),
        rows.len(),
        out_dir.display()
    );
    Ok(())
}
