use std::path::{Path, PathBuf};

use eigenkit::datagen::{CorpusConfig, MixtureDatasetConfig};
use eigenkit::error::{Error, Result};
use eigenkit::head::{CellKind, TrainConfig, DEFAULT_HIDDEN_DIM};
use eigenkit::monitor::MonitorConfig;
use eigenkit::rmtkd::{MlpTrainConfig, PipelineConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub cells: Vec<CellKind>,
    pub hidden_dim: usize,
    pub train: TrainConfig,
    pub budgets: Vec<usize>,
    pub ablation_windows: Vec<usize>,
}

impl Default for HeadSection {
    fn default() -> Self {
        Self {
            cells: vec![CellKind::Gru],
            hidden_dim: DEFAULT_HIDDEN_DIM,
            train: TrainConfig::default(),
            budgets: vec![30, 40, 60, 90, 120],
            ablation_windows: vec![10, 25, 30, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSection {
    pub sizes: Vec<usize>,
    pub train: MlpTrainConfig,
}

impl Default for MlpSection {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128, 64, 8],
            train: MlpTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub quantiles: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            quantiles: vec![0.3, 0.5, 0.7, 0.9],
        }
    }
}

/// Everything a run depends on. The top-level `seed` is copied into every
/// component seed when the config is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub traces: CorpusConfig,
    pub mixture: MixtureDatasetConfig,
    pub monitor: MonitorConfig,
    pub head: HeadSection,
    pub mlp: MlpSection,
    pub pipeline: PipelineConfig,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            traces: CorpusConfig::default(),
            mixture: MixtureDatasetConfig::default(),
            monitor: MonitorConfig::default(),
            head: HeadSection::default(),
            mlp: MlpSection::default(),
            pipeline: PipelineConfig::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", p.display())))
            }
        }
    }

    pub fn propagate_seed(&mut self) {
        let s = self.seed;
        self.traces.template.seed = s;
        self.mixture.seed = s;
        self.head.train.seed = s;
        self.mlp.train.seed = s;
        self.pipeline.seed = s;
        self.pipeline.distill.seed = s;
    }

    /// Writes the resolved config as `<out>/<command>.config.json`.
    pub fn write_resolved(&self, command: &str) -> Result<PathBuf> {
        let path = self.out.join(format!("{command}.config.json"));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}
