//! Run configuration: one TOML file with a section per component, plus
//! `--set section.key=value` overrides. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use a2s_core::corpus::SynthCorpusConfig;
use a2s_core::evalmetrics::EvalConfig;
use a2s_core::features::FeatureConfig;
use a2s_core::synthgen::{RemoteConfig, TemplateId};
use a2s_core::towers::ModelConfig;
use a2s_core::training::{LossConfig, TrainConfig, TrainSetup};
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Deterministic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Seed of the deterministic backend.
    pub seed: u64,
    pub template: TemplateId,
    pub queries_per_listing: usize,
    pub remote: RemoteConfig,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Deterministic,
            seed: 0,
            template: TemplateId::T2Detailed,
            queries_per_listing: 10,
            remote: RemoteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { data_dir: "data".into(), checkpoint_dir: "checkpoints".into(), report_dir: "reports".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: SynthCorpusConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub backend: BackendSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), applies overrides, and resolves
    /// relative paths against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                let table: toml::Table = toml::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        for p in [&mut cfg.paths.data_dir, &mut cfg.paths.checkpoint_dir, &mut cfg.paths.report_dir] {
            if p.is_relative() && !base.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        cfg.backend.remote = cfg.backend.remote.clone().with_env_override();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate().map_err(|e| anyhow!("[corpus] {e}"))?;
        self.setup().validate().map_err(|e| anyhow!("{e}"))?;
        self.eval.validate().map_err(|e| anyhow!("[eval] {e}"))?;
        Ok(())
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            model: self.model.clone(),
            features: self.features.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
        }
    }
}

/// `section.key=value`; the value is parsed as a TOML value, falling back to
/// a plain string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| anyhow!("override {assignment:?} is not of the form section.key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} must name section.key");
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_owned()),
    };
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {p} is not a section"))?;
    }
    cur.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = RunConfig::load(None, &["train.batch_size=32".into(), "backend.remote.model=m8".into()]).unwrap();
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.backend.remote.model, "m8");
        assert!(RunConfig::load(None, &["train.nope=1".into()]).is_err());
        assert!(RunConfig::load(None, &["loss.scale=30".into()]).is_err());
        assert!(RunConfig::load(None, &["batch_size".into()]).is_err());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
    }
}
