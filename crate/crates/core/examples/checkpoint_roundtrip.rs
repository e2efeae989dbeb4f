//! Trains one epoch on a handful of synthetic images, writes the checkpoint,
//! reads it back and scores with it. Loading against a different backbone
//! is refused.
//!
//! ```text
//! cargo run --example checkpoint_roundtrip
//! ```

use adfa::backbone::{BackboneConfig, BackboneHandle};
use adfa::checkpoint::Checkpoint;
use adfa::config::RunConfig;
use adfa::dataset::{generate_synthetic, SynthConfig};
use adfa::pipeline::train_run;
use adfa::scoring::Scorer;

const DESK: &str = include_str!("../configs/desk.toml");

fn main() -> adfa::Result<()> {
    let dir = tempfile::tempdir()?;
    let synth = SynthConfig {
        n_train: 6,
        n_test_normal: 2,
        n_test_abnormal: 2,
        ..SynthConfig::default()
    };
    let manifest = generate_synthetic(&dir.path().join("data"), &synth)?;
    let mut cfg = RunConfig::from_toml(DESK)?.with_overrides(&["train.epochs=1".into()])?;
    cfg.paths.output = dir.path().join("run");

    let handle = BackboneHandle::load(&cfg.backbone, cfg.preprocess.crop_size as usize)?;
    let outcome = train_run(&cfg, &manifest, &handle)?;
    let path = cfg.paths.checkpoint();
    let sha = outcome.checkpoint.save(&path)?;
    let bytes = std::fs::read(&path)?;
    println!("{} bytes, magic {:?}, sha256 {sha}", bytes.len(), std::str::from_utf8(&bytes[..4]).unwrap_or("?"));

    let (loaded, sha_again) = Checkpoint::load(&path)?;
    println!("same digest on reload: {}", sha == sha_again);
    println!("parameters identical: {}", loaded.params == outcome.checkpoint.params);
    println!("bank fingerprint {}", loaded.bank.fingerprint);
    println!("dataset hash {}", loaded.dataset_hash);

    let scorer = Scorer::load(&path)?;
    for s in scorer.score_paths(&manifest.paths(adfa::dataset::Split::TestAbnormal), false)? {
        println!("{}\t{:.4}", s.image_id, s.score);
    }

    let other = BackboneHandle::load(&BackboneConfig { seed: 99, ..cfg.backbone.clone() }, 48)?;
    match loaded.check_backbone(&other) {
        Ok(()) => println!("unexpected: backbone accepted"),
        Err(e) => println!("other backbone refused: {e}"),
    }
    Ok(())
}
