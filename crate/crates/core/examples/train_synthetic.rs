//! Trains the descriptor on the synthetic dataset with the desk config and
//! prints the test AUROC of the untrained and trained model.
//!
//! ```text
//! cargo run --example train_synthetic -- 10            # epochs
//! cargo run --example train_synthetic -- 50 train.seed=3
//! ```
//!
//! Extra `section.key=value` arguments override the config.

use std::time::Instant;

use adfa::adaptation::{init_center_bank, train_with_monitor, CenterBank};
use adfa::config::RunConfig;
use adfa::dataset::{generate_synthetic, SynthConfig};
use adfa::descriptor::DescriptorParams;
use adfa::pipeline::{evaluate_features, SplitFeatures};
use adfa::scoring::AdfaModel;

const DESK: &str = include_str!("../configs/desk.toml");

fn main() -> adfa::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let mut overrides: Vec<String> = args.collect();
    overrides.push(format!("train.epochs={epochs}"));
    let cfg = RunConfig::from_toml(DESK)?.with_overrides(&overrides)?;

    let dir = tempfile::tempdir()?;
    let manifest = generate_synthetic(dir.path(), &SynthConfig::default())?;
    let started = Instant::now();
    let features = SplitFeatures::load(&manifest, &cfg)?;
    let init = DescriptorParams::init(features.train[0].channels(), &cfg.descriptor, cfg.train.seed)?;
    let model = |params: &DescriptorParams, bank: &CenterBank| AdfaModel {
        params: params.clone(),
        bank: bank.clone(),
        topk: cfg.soft_topk.clone(),
        operator: cfg.train.operator,
    };

    let bank = init_center_bank(&features.train, &init, "synthetic", cfg.train.refresh_policy)?;
    let (before, _, _) = evaluate_features(&model(&init, &bank), &features.test_normal, &features.test_abnormal)?;
    println!("untrained auroc {before:.3}");

    let every = (epochs / 5).max(1);
    let trained = train_with_monitor(
        &features.train,
        init,
        "synthetic",
        &cfg.soft_topk,
        &cfg.train,
        |epoch, params, bank| {
            if (epoch + 1) % every != 0 {
                return None;
            }
            let (auroc, _, _) =
                evaluate_features(&model(params, bank), &features.test_normal, &features.test_abnormal).ok()?;
            Some(auroc)
        },
    )?;
    for e in &trained.log.epochs {
        match e.validation_score {
            Some(a) => println!("epoch {:>3}  loss {:.4}  auroc {a:.3}", e.epoch, e.mean_loss),
            None => println!("epoch {:>3}  loss {:.4}", e.epoch, e.mean_loss),
        }
    }
    println!("{:.1}s total", started.elapsed().as_secs_f64());
    Ok(())
}
