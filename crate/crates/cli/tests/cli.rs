//! End-to-end runs of the binary on small phantom datasets.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nodule_detect::checkpoint::read_manifest;
use nodule_detect::eval::FP_RATES;
use nodule_detect::DecoderType;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nodule-detect"))
        .args(args)
        .env_remove("NODULE_DETECT_CACHE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn generate(dir: &Path, n: usize, seed: u64) -> String {
    ok(&[
        "--preset",
        "micro",
        "--seed",
        &seed.to_string(),
        "generate",
        "--out",
        dir.to_str().unwrap(),
        "--n-volumes",
        &n.to_string(),
    ])
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(String::from).collect()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_deterministic_and_reports_its_rows() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let summary = generate(&a, 5, 7);
    generate(&b, 5, 7);
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    assert_eq!(ta.iter().filter(|(n, _)| n.ends_with(".vol")).count(), 5);
    let rows = csv_rows(&a.join("annotations.csv")).len();
    assert!(summary.contains(&format!("generated 5 volumes with {rows} annotations")), "{summary}");
    let c = t.path().join("c");
    generate(&c, 5, 8);
    assert_ne!(ta, tree(&c));
}

#[test]
fn empty_dataset_has_only_a_header() {
    let t = tempfile::tempdir().unwrap();
    let summary = generate(t.path(), 0, 1);
    assert!(summary.contains("generated 0 volumes with 0 annotations"));
    let text = fs::read_to_string(t.path().join("annotations.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn generate_refuses_a_non_empty_directory_without_force() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), 3, 1);
    fs::write(t.path().join("notes.txt"), "keep").unwrap();
    let e = err(&["--preset", "micro", "generate", "--out", t.path().to_str().unwrap()]);
    assert!(e.contains("--force"), "{e}");
    ok(&[
        "--preset",
        "micro",
        "generate",
        "--out",
        t.path().to_str().unwrap(),
        "--n-volumes",
        "2",
        "--force",
    ]);
    assert_eq!(fs::read_dir(t.path().join("volumes")).unwrap().count(), 2);
    assert_eq!(fs::read_to_string(t.path().join("notes.txt")).unwrap(), "keep");
}

#[test]
fn printed_configuration_reloads_unchanged() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("d");
    let first = generate(&out, 1, 3);
    let cfg = first.split("generated").next().unwrap();
    let path = t.path().join("resolved.toml");
    fs::write(&path, cfg).unwrap();
    let second = ok(&[
        "--config",
        path.to_str().unwrap(),
        "generate",
        "--out",
        out.to_str().unwrap(),
        "--n-volumes",
        "1",
        "--force",
    ]);
    assert_eq!(second.split("generated").next().unwrap(), cfg);
}

#[test]
fn train_requires_a_decoder() {
    let t = tempfile::tempdir().unwrap();
    let e = err(&["--preset", "micro", "train", "--data", t.path().to_str().unwrap()]);
    assert!(e.contains("--decoder"), "{e}");
}

#[test]
fn missing_dataset_is_an_ingest_error() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("absent");
    let e = err(&[
        "--preset",
        "micro",
        "--decoder",
        "type1",
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        t.path().join("run").to_str().unwrap(),
    ]);
    assert!(e.contains("ingest error"), "{e}");
}

#[test]
fn perfect_detections_score_full_sensitivity() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    generate(&data, 4, 5);
    let mut csv = String::from("image_id,x1,y1,x2,y2,confidence\n");
    for row in csv_rows(&data.join("annotations.csv")) {
        let f: Vec<&str> = row.split(',').collect();
        csv += &format!("{}:{},{},{},{},{},1.0\n", f[0], f[1], f[2], f[3], f[4], f[5]);
    }
    let dets = t.path().join("perfect.csv");
    fs::write(&dets, csv).unwrap();
    let report = t.path().join("report");
    let out = ok(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--detections-file",
        dets.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    let header = out.lines().find(|l| l.starts_with("FPs per scan")).expect("table header");
    let cols: Vec<f64> = header.split_whitespace().filter_map(|c| c.parse().ok()).collect();
    assert_eq!(cols, FP_RATES.to_vec());
    let row = out.lines().find(|l| l.starts_with("perfect")).expect("table row");
    let vals: Vec<f64> = row.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(vals.len(), 7);
    assert!(vals.iter().all(|&v| v == 100.0), "{row}");
    for f in ["froc.csv", "summary.json", "froc.png"] {
        assert!(report.join(f).is_file(), "{f}");
    }
}

#[test]
fn detections_for_unknown_images_are_rejected() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    generate(&data, 1, 5);
    let dets = t.path().join("d.csv");
    fs::write(&dets, "image_id,x1,y1,x2,y2,confidence\nnobody:0,1,1,5,5,0.5\n").unwrap();
    let e = err(&["eval", "--data", data.to_str().unwrap(), "--detections-file", dets.to_str().unwrap()]);
    assert!(e.contains("nobody:0"), "{e}");
}

#[test]
fn train_eval_predict_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    let run_dir = t.path().join("run");
    generate(&data, 4, 11);
    let cfg = t.path().join("run.toml");
    fs::write(&cfg, "preset = \"micro\"\n[train]\nepochs = 2\n").unwrap();
    let c = cfg.to_str().unwrap();
    let log = ok(&[
        "--config",
        c,
        "--decoder",
        "type1",
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(log.contains("epoch    2"), "{log}");
    let ckpt = run_dir.join("epoch_002.ckpt");
    assert!(run_dir.join("epoch_001.ckpt").is_file() && ckpt.is_file());
    assert_eq!(csv_rows(&run_dir.join("train_log.csv")).len(), 2);
    let m = read_manifest(&ckpt).unwrap();
    assert_eq!((m.decoder_type, m.epoch), (DecoderType::TypeI, 2));
    assert!(m.p99.is_some());

    // Same run directory again needs --force.
    let e = err(&["--config", c, "--decoder", "type1", "train", "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]);
    assert!(e.contains("--force"), "{e}");

    let ck = ckpt.to_str().unwrap();
    let e = err(&["--config", c, "--decoder", "type2", "eval", "--data", data.to_str().unwrap(), "--checkpoint", ck]);
    assert!(e.contains("mismatch"), "{e}");
    let out = ok(&["--config", c, "eval", "--data", data.to_str().unwrap(), "--checkpoint", ck]);
    assert!(out.lines().any(|l| l.starts_with("DPN U-Net type1")), "{out}");

    let pred = t.path().join("pred");
    ok(&["predict", "--checkpoint", ck, "--input", data.to_str().unwrap(), "--out", pred.to_str().unwrap()]);
    let pngs = fs::read_dir(&pred).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, csv_rows(&data.join("annotations.csv")).len());
    let header = fs::read_to_string(pred.join("detections.csv")).unwrap();
    assert!(header.starts_with("image_id,x1,y1,x2,y2,confidence\n"));
    for row in csv_rows(&pred.join("detections.csv")) {
        let f: Vec<&str> = row.split(',').collect();
        assert!(f[0].starts_with("phantom_"), "{row}");
        let v: Vec<f64> = f[1..].iter().map(|x| x.parse().unwrap()).collect();
        assert!(0.0 <= v[0] && v[0] < v[2] && v[2] <= 64.0, "{row}");
        assert!(0.0 <= v[1] && v[1] < v[3] && v[3] <= 64.0, "{row}");
        assert!((0.0..=1.0).contains(&v[4]), "{row}");
    }

    // Raw volumes: one overlay per slice.
    let vol = fs::read_dir(data.join("volumes")).unwrap().next().unwrap().unwrap().path();
    let raw = t.path().join("raw");
    ok(&["predict", "--checkpoint", ck, "--input", vol.to_str().unwrap(), "--out", raw.to_str().unwrap()]);
    assert_eq!(fs::read_dir(&raw).unwrap().count(), 8 + 1);
}
