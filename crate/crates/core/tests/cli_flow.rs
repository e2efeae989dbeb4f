use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK: &str = include_str!("../configs/desk.toml");

fn adfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adfa"))
        .args(args)
        .output()
        .expect("spawn adfa")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
    out: PathBuf,
}

fn workspace(n_train: usize, n_test: usize) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let config = root.join("desk.toml");
    std::fs::write(&config, DESK).unwrap();
    let o = adfa(&[
        "synth",
        "--out",
        s(&data),
        "--seed",
        "3",
        "--n-train",
        &n_train.to_string(),
        "--n-test-normal",
        &n_test.to_string(),
        "--n-test-abnormal",
        &n_test.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("dataset\t"), "{}", stdout(&o));
    Workspace {
        out: root.join("run"),
        _dir: dir,
        root,
        data,
        config,
    }
}

fn train(ws: &Workspace, epochs: usize) -> PathBuf {
    let o = adfa(&[
        "train",
        "-c",
        s(&ws.config),
        "--dataset",
        s(&ws.data),
        "--out",
        s(&ws.out),
        "--set",
        &format!("train.epochs={epochs}"),
        "--set",
        "preprocess.crop_size=32",
        "--set",
        "preprocess.resize_edge=32",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("checkpoint\t")).expect("checkpoint line");
    let fields: Vec<&str> = line.split('\t').collect();
    assert_eq!(fields.len(), 3);
    assert_eq!(fields[2].len(), 64);
    PathBuf::from(fields[1])
}

#[test]
fn synth_train_eval_score() {
    let ws = workspace(6, 3);
    let ckpt = train(&ws, 2);
    assert!(ckpt.is_file());
    let log: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ws.out.join("train_log.json")).unwrap()).unwrap();
    assert_eq!(log["epochs"].as_array().unwrap().len(), 2);

    let roc = ws.root.join("plots").join("roc.svg");
    let o = adfa(&[
        "eval",
        "-c",
        s(&ws.config),
        "--dataset",
        s(&ws.data),
        "--out",
        s(&ws.out),
        "--checkpoint",
        s(&ckpt),
        "--roc-out",
        s(&roc),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&roc).unwrap().starts_with("<svg"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.out.join("report.json")).unwrap()).unwrap();
    let auroc = report["auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));
    assert_eq!(report["n_normal"], 3);
    assert_eq!(report["n_abnormal"], 3);
    assert_eq!(report["scores"]["abnormal"].as_array().unwrap().len(), 3);
    assert_eq!(report["checkpoint_sha256"].as_str().unwrap().len(), 64);
    assert!(report["dataset_hash"].as_str().is_some_and(|h| h.len() == 64));
    let printed: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("auroc\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((printed - auroc).abs() < 1e-6);

    let a = ws.data.join("test/normal/0000.png");
    let b = ws.data.join("test/abnormal/0001.png");
    let o = adfa(&["score", "--checkpoint", s(&ckpt), s(&a), s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<(String, f64)> = stdout(&o)
        .lines()
        .map(|l| {
            let (p, v) = l.split_once('\t').unwrap();
            (p.to_string(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].0, s(&a));
    assert!(rows.iter().all(|(_, v)| v.is_finite() && *v >= 0.0));
}

#[test]
fn white_noise_scores_above_a_training_image() {
    let ws = workspace(12, 1);
    let ckpt = train(&ws, 5);
    let noise = ws.root.join("noise.png");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    image::RgbImage::from_fn(64, 64, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
        .save(&noise)
        .unwrap();
    let train_img = ws.data.join("train/normal/0000.png");
    let o = adfa(&["score", "--checkpoint", s(&ckpt), s(&train_img), s(&noise)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores: Vec<f64> = stdout(&o)
        .lines()
        .map(|l| l.split_once('\t').unwrap().1.parse().unwrap())
        .collect();
    assert!(scores[1] > scores[0], "{scores:?}");
}

#[test]
fn missing_abnormal_split_is_an_ingestion_exit() {
    let ws = workspace(4, 2);
    let ckpt = train(&ws, 1);
    std::fs::remove_dir_all(ws.data.join("test/abnormal")).unwrap();
    let o = adfa(&[
        "eval",
        "-c",
        s(&ws.config),
        "--dataset",
        s(&ws.data),
        "--checkpoint",
        s(&ckpt),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("error[ingestion]") && err.contains("test/abnormal"), "{err}");
}

#[test]
fn error_classes_map_to_exit_codes() {
    let ws = workspace(4, 1);
    let bad = ws.root.join("bad.toml");
    std::fs::write(&bad, "[train]\nlr = 1\n").unwrap();
    let o = adfa(&["train", "-c", s(&bad), "--dataset", s(&ws.data)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("error[config]"));

    let o = adfa(&["score", "--checkpoint", s(&ws.root.join("absent.adfa")), s(&ws.config)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let junk = ws.root.join("junk.adfa");
    std::fs::write(&junk, b"ADFA\x01\x00\x00\x00garbage").unwrap();
    let o = adfa(&["score", "--checkpoint", s(&junk), s(&ws.config)]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
    assert!(stderr(&o).contains("error[format]"));

    let o = adfa(&["train", "-c", s(&ws.config), "--set", "train.epochs"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = adfa(&["ablate", "-c", s(&ws.config), "--dataset", s(&ws.data), "--grid", "eps=2x"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn roc_output_must_be_svg() {
    let ws = workspace(4, 2);
    let ckpt = train(&ws, 1);
    let o = adfa(&[
        "eval",
        "-c",
        s(&ws.config),
        "--dataset",
        s(&ws.data),
        "--out",
        s(&ws.out),
        "--checkpoint",
        s(&ckpt),
        "--roc-out",
        s(&ws.root.join("roc.png")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let ws = workspace(4, 2);
    let o = adfa(&[
        "ablate",
        "-c",
        s(&ws.config),
        "--dataset",
        s(&ws.data),
        "--out",
        s(&ws.out),
        "--grid",
        "eps=0,hard_topk",
        "--set",
        "train.epochs=1",
        "--set",
        "preprocess.crop_size=32",
        "--set",
        "preprocess.resize_edge=32",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(ws.out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("eps=0.00,") && lines[2].starts_with("hard_topk,"));
    assert!(stdout(&o).contains("hard_topk"));
    assert!(ws.out.join("ablation.json").is_file() && ws.out.join("ablation.txt").is_file());
}
