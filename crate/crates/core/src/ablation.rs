use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adaptation::TopKOperator;
use crate::backbone::WeightsSource;
use crate::config::RunConfig;
use crate::dataset::DatasetManifest;
use crate::error::{AdfaError, Result};
use crate::pipeline::SplitFeatures;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum CellKind {
    /// Soft top-k with the attention weight set to the given value.
    Epsilon(f64),
    /// Exact top-k at the base attention weight.
    HardTopK,
    /// Randomly initialized backbone at the base attention weight.
    RandomInit,
}

impl CellKind {
    pub fn label(&self) -> String {
        match self {
            CellKind::Epsilon(e) => format!("eps={e:.2}"),
            CellKind::HardTopK => "hard_topk".to_string(),
            CellKind::RandomInit => "random_init".to_string(),
        }
    }

    /// `base` with this cell's change applied.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match *self {
            CellKind::Epsilon(e) => cfg.descriptor.epsilon = e,
            CellKind::HardTopK => cfg.train.operator = TopKOperator::Hard,
            CellKind::RandomInit => cfg.backbone.weights = WeightsSource::Random,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGridSpec {
    pub cells: Vec<CellKind>,
}

impl AblationGridSpec {
    /// Attention weights 0, 0.05, 0.10 and 0.20, then the exact top-k and
    /// the random backbone arms.
    pub fn default_grid() -> Self {
        AblationGridSpec {
            cells: vec![
                CellKind::Epsilon(0.0),
                CellKind::Epsilon(0.05),
                CellKind::Epsilon(0.10),
                CellKind::Epsilon(0.20),
                CellKind::HardTopK,
                CellKind::RandomInit,
            ],
        }
    }

    /// `default` or a comma-separated list such as `eps=0,eps=0.1,hard_topk`.
    pub fn parse(spec: &str) -> Result<Self> {
        if spec.trim() == "default" {
            return Ok(Self::default_grid());
        }
        let cells = spec
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| match item {
                "hard_topk" => Ok(CellKind::HardTopK),
                "random_init" => Ok(CellKind::RandomInit),
                _ => item
                    .strip_prefix("eps=")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| *v >= 0.0 && v.is_finite())
                    .map(CellKind::Epsilon)
                    .ok_or_else(|| AdfaError::Argument(format!("unknown grid cell `{item}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if cells.is_empty() {
            return Err(AdfaError::Argument("empty ablation grid".into()));
        }
        Ok(AblationGridSpec { cells })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: CellKind,
    pub label: String,
    pub auroc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResults {
    pub dataset: String,
    pub config: RunConfig,
    pub cells: Vec<CellResult>,
}

impl AblationResults {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,auroc,error\n");
        for c in &self.cells {
            let auroc = c.auroc.map(|a| format!("{a:.6}")).unwrap_or_default();
            let err = c.error.as_deref().unwrap_or("").replace('"', "'");
            let _ = writeln!(out, "{},{auroc},\"{err}\"", c.label);
        }
        out
    }

    /// One header row of cell labels and one row of AUROC values.
    pub fn render_table(&self) -> String {
        let cols: Vec<(String, String)> = self
            .cells
            .iter()
            .map(|c| {
                let v = c.auroc.map_or_else(|| "failed".to_string(), |a| format!("{a:.3}"));
                (c.label.clone(), v)
            })
            .collect();
        let widths: Vec<usize> = cols.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let name_w = self.dataset.len().max("dataset".len());
        let mut header = format!("{:<name_w$}", "dataset");
        let mut row = format!("{:<name_w$}", self.dataset);
        let mut rule = "-".repeat(name_w);
        for ((h, v), w) in cols.iter().zip(&widths) {
            let _ = write!(header, " | {h:>w$}");
            let _ = write!(row, " | {v:>w$}");
            let _ = write!(rule, "-+-{}", "-".repeat(*w));
        }
        let mut out = format!("{header}\n{rule}\n{row}\n");
        for c in self.cells.iter().filter(|c| c.error.is_some()) {
            let _ = writeln!(out, "{}: {}", c.label, c.error.as_deref().unwrap_or(""));
        }
        out
    }
}

/// Runs every cell of `spec` through `run`, which trains and evaluates one
/// configuration and returns its AUROC. A failing cell is recorded and the
/// remaining cells still run.
pub fn ablation_run_with<F>(base: &RunConfig, dataset: &str, spec: &AblationGridSpec, mut run: F) -> AblationResults
where
    F: FnMut(&RunConfig) -> Result<f64>,
{
    let cells = spec
        .cells
        .iter()
        .map(|cell| {
            let cfg = cell.apply(base);
            log::info!("ablation cell {}", cell.label());
            let outcome = cfg.validate().and_then(|_| run(&cfg));
            if let Err(e) = &outcome {
                log::warn!("ablation cell {} failed: {e}", cell.label());
            }
            CellResult {
                cell: *cell,
                label: cell.label(),
                auroc: outcome.as_ref().ok().copied(),
                error: outcome.err().map(|e| format!("error[{}]: {e}", e.class())),
            }
        })
        .collect();
    AblationResults {
        dataset: dataset.to_string(),
        config: base.clone(),
        cells,
    }
}

/// Trains and evaluates every cell on `manifest`. Features are extracted
/// once per distinct backbone and preprocessing setting.
pub fn ablation_run(base: &RunConfig, manifest: &DatasetManifest, spec: &AblationGridSpec) -> AblationResults {
    let dataset_hash = manifest.hash();
    let mut cache: Vec<(RunConfig, SplitFeatures)> = Vec::new();
    ablation_run_with(base, &manifest.name(), spec, |cfg| {
        let key = |c: &RunConfig| (c.backbone.clone(), c.preprocess.clone());
        let idx = match cache.iter().position(|(c, _)| key(c) == key(cfg)) {
            Some(i) => i,
            None => {
                cache.push((cfg.clone(), SplitFeatures::load(manifest, cfg)?));
                cache.len() - 1
            }
        };
        let (_, auroc, _) = cache[idx].1.train_and_score(cfg, &dataset_hash)?;
        Ok(auroc)
    })
}
