//! A reduced ablation grid on the synthetic dataset: attention weights,
//! the exact top-k arm and the random-backbone arm, a few epochs each.
//!
//! ```text
//! cargo run --example ablation_grid -- 3      # epochs per cell
//! ```

use adfa::ablation::{ablation_run, AblationGridSpec};
use adfa::config::RunConfig;
use adfa::dataset::{generate_synthetic, SynthConfig};

const DESK: &str = include_str!("../configs/desk.toml");

fn main() -> adfa::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let cfg = RunConfig::from_toml(DESK)?.with_overrides(&[format!("train.epochs={epochs}")])?;
    let dir = tempfile::tempdir()?;
    let manifest = generate_synthetic(dir.path(), &SynthConfig::default())?;
    let spec = AblationGridSpec::parse("eps=0,eps=0.1,eps=0.2,hard_topk,random_init")?;
    let results = ablation_run(&cfg, &manifest, &spec);
    print!("{}", results.render_table());
    print!("{}", results.to_csv());
    Ok(())
}
