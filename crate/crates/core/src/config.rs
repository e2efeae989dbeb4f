use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::TrainConfig;
use crate::backbone::{BackboneConfig, PreprocessConfig};
use crate::descriptor::DescriptorConfig;
use crate::error::{AdfaError, Result};
use crate::soft_topk::SoftTopKConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Keep the per-position scores of every image in the report.
    pub keep_patch_scores: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset root with `train/normal`, `test/normal`, `test/abnormal`.
    pub dataset: Option<PathBuf>,
    /// Directory receiving checkpoints, logs and reports.
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: None,
            output: PathBuf::from("runs"),
        }
    }
}

impl PathsConfig {
    pub fn checkpoint(&self) -> PathBuf {
        self.output.join("model.adfa")
    }

    pub fn train_log(&self) -> PathBuf {
        self.output.join("train_log.json")
    }

    pub fn report(&self) -> PathBuf {
        self.output.join("report.json")
    }

    pub fn dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| AdfaError::Config("paths.dataset is not set".into()))
    }
}

/// Everything a run needs, one TOML table per section. Unknown keys are
/// rejected at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub preprocess: PreprocessConfig,
    pub descriptor: DescriptorConfig,
    pub soft_topk: SoftTopKConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AdfaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AdfaError::ingestion(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            AdfaError::Config(msg) => AdfaError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.preprocess.validate()?;
        self.descriptor.validate()?;
        self.soft_topk.validate()?;
        self.train.validate()?;
        let side = self.preprocess.crop_size as usize / 4;
        if self.soft_topk.k >= side * side {
            return Err(AdfaError::Config(format!(
                "soft_topk.k = {} must be below the {} patch positions",
                self.soft_topk.k,
                side * side
            )));
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides; values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).map_err(|e| AdfaError::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| AdfaError::Argument(format!("override `{item}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let parts: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = parts.split_last().expect("split yields one part");
            let mut table = &mut doc;
            for p in parents {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| AdfaError::Argument(format!("`{p}` in `{key}` is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        let text = toml::to_string(&doc).map_err(|e| AdfaError::Config(e.to_string()))?;
        Self::from_toml(&text)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::TopKOperator;
    use crate::backbone::Provider;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.soft_topk.k, 3);
        assert_eq!(cfg.descriptor.epsilon, 0.1);
        assert_eq!(cfg.descriptor.d_prime, 448);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.weight_decay, 5e-4);
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.operator = TopKOperator::Hard;
        cfg.backbone = BackboneConfig::native(vec![8, 8, 8], 4, 3);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nlr = 0.1\n"), Err(AdfaError::Config(_))));
        assert!(matches!(RunConfig::from_toml("[trian]\n"), Err(AdfaError::Config(_))));
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "train.epochs=7".into(),
                "backbone.provider=native".into(),
                "paths.dataset=\"/data/x\"".into(),
            ])
            .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.backbone.provider, Provider::Native);
        assert_eq!(cfg.paths.dataset.as_deref(), Some(Path::new("/data/x")));
        assert!(RunConfig::default().with_overrides(&["train.epochs=0".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["train.bogus=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["epochs".into()]).is_err());
    }

    #[test]
    fn k_must_leave_room() {
        let err = RunConfig::default()
            .with_overrides(&["preprocess.crop_size=4".into(), "preprocess.resize_edge=4".into()])
            .unwrap_err();
        assert!(err.to_string().contains("soft_topk.k"));
    }
}
