//! Writes a synthetic dataset, trains a short run, saves the checkpoint,
//! then evaluates it from disk and writes the JSON report and ROC plot.
//!
//! ```text
//! cargo run --example evaluate_roc -- out/roc_demo
//! ```

use std::path::PathBuf;

use adfa::backbone::BackboneHandle;
use adfa::config::RunConfig;
use adfa::dataset::{generate_synthetic, SynthConfig};
use adfa::pipeline::train_run;
use adfa::scoring::{evaluate, Scorer};

const DESK: &str = include_str!("../configs/desk.toml");

fn main() -> adfa::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("adfa_evaluate_roc"));
    let data = out.join("data");
    let manifest = generate_synthetic(&data, &SynthConfig::default())?;

    let mut cfg = RunConfig::from_toml(DESK)?.with_overrides(&["train.epochs=5".into()])?;
    cfg.paths.output = out.clone();
    let handle = BackboneHandle::load(&cfg.backbone, cfg.preprocess.crop_size as usize)?;
    let outcome = train_run(&cfg, &manifest, &handle)?;
    let sha = outcome.checkpoint.save(&cfg.paths.checkpoint())?;
    println!("checkpoint {} sha256 {sha}", cfg.paths.checkpoint().display());

    let scorer = Scorer::load(&cfg.paths.checkpoint())?;
    let report = evaluate(&scorer, &manifest, false)?;
    std::fs::write(cfg.paths.report(), report.to_json())?;
    let roc = out.join("roc.svg");
    report.write_roc(&roc)?;
    println!(
        "auroc {:.3} over {} normal / {} abnormal images",
        report.auroc, report.n_normal, report.n_abnormal
    );
    println!("report {}  roc {}", cfg.paths.report().display(), roc.display());
    Ok(())
}
