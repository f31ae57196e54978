//! File-based run configuration with `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stagnn::dataset::{SubDataset, DEFAULT_R_MAX};
use stagnn::graph::DependenceMeasure;
use stagnn::model::ModelConfig;
use stagnn::normalization::NormMode;
use stagnn::training::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormSection {
    pub mode: NormMode,
    /// Cluster count; defaults to the sub-dataset's number of regimes.
    pub k: Option<usize>,
    /// k-means seed.
    pub seed: u64,
}

impl Default for NormSection {
    fn default() -> Self {
        Self {
            mode: NormMode::Clustered,
            k: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub lambda: f64,
    pub measure: DependenceMeasure,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            measure: DependenceMeasure::Correlation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `train_FDxxx.txt`, `test_FDxxx.txt`, `RUL_FDxxx.txt`.
    pub data_dir: PathBuf,
    pub dataset: SubDataset,
    pub output_dir: PathBuf,
    /// Keep only the first `units` training and test units (by id).
    pub units: Option<usize>,
    /// Sliding-window stride; the window length is `model.window`.
    pub stride: usize,
    pub r_max: u32,
    /// Run trials on separate threads. Ignored when `deterministic` is set.
    pub parallel_trials: bool,
    pub deterministic: bool,
    pub norm: NormSection,
    pub graph: GraphSection,
    pub model: ModelConfig,
    /// `train.seed` is the base seed of every trial.
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            dataset: SubDataset::FD001,
            output_dir: PathBuf::from("runs"),
            units: None,
            stride: 1,
            r_max: DEFAULT_R_MAX,
            parallel_trials: false,
            deterministic: true,
            norm: NormSection::default(),
            graph: GraphSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides in order and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Input(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        if self.stride == 0 {
            return Err(CliError::Input("stride must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.graph.lambda) {
            return Err(CliError::Input("graph.lambda must lie in [0, 1]".into()));
        }
        if self.units == Some(0) {
            return Err(CliError::Input("units must be >= 1".into()));
        }
        if self.norm.k == Some(0) {
            return Err(CliError::Input("norm.k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn cluster_count(&self) -> usize {
        match self.norm.mode {
            NormMode::Unified => 1,
            NormMode::Clustered => self.norm.k.unwrap_or(self.dataset.operating_conditions()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Trials run in parallel only when explicitly requested outside
    /// deterministic mode.
    pub fn parallel(&self) -> bool {
        self.parallel_trials && !self.deterministic
    }
}

/// Sets a dotted key such as `train.epochs=5`. The value is parsed as a TOML
/// value and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Input(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Input(format!("bad override key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Input(format!("{key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
