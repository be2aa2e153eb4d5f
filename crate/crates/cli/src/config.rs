//! The structured config file shared by all subcommands. Every section is
//! optional; flags given on the command line win over file values.

use std::collections::BTreeMap;
use std::path::Path;

use lesionattn::analysis::BinarizeMode;
use lesionattn::data::{SyntheticSpec, DEFAULT_RATIOS};
use lesionattn::experiment::{Grid, TrainConfig};
use lesionattn::pareto::SelectionPolicy;
use lesionattn::{Error, Result};
use serde::Deserialize;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Synthetic world for `generate`.
    pub data: SyntheticSpec,
    pub split: SplitSection,
    pub train: TrainConfig,
    /// Hyperparameter values to cross in `gridsearch`, keyed as for `--set`.
    pub grid: BTreeMap<String, Vec<toml::Value>>,
    pub gridsearch: GridSection,
    pub evaluate: EvaluateSection,
    pub audit: AuditSection,
    pub select: SelectSection,
    pub ingest: IngestSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            ratios: DEFAULT_RATIOS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub seeds: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { seeds: 1 }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Defaults to the run's training threshold.
    pub threshold: Option<f64>,
    /// Bootstrap resamples for per-sample CIs; none when zero.
    pub bootstrap: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    pub mode: BinarizeMode,
    pub overlays_per_stratum: usize,
    pub seed: u64,
}

impl Default for AuditSection {
    fn default() -> Self {
        AuditSection {
            mode: BinarizeMode::TopK,
            overlays_per_stratum: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    pub policy: SelectionPolicy,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    /// `ham`, `bcn`, or a comma-separated list of diagnosis codes.
    pub malignant: String,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection { malignant: "ham".into() }
    }
}

impl CliConfig {
    /// The grid with every value in the text form `TrainConfig::set` takes.
    pub fn grid(&self) -> Grid {
        self.grid
            .iter()
            .map(|(k, vs)| {
                let vs = vs
                    .iter()
                    .map(|v| match v {
                        toml::Value::String(s) => s.clone(),
                        toml::Value::Array(items) => items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
                        other => other.to_string(),
                    })
                    .collect();
                (k.clone(), vs)
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            context: format!("reading config {}", path.display()),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
