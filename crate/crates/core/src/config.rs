//! JSON experiment configuration.
//!
//! Field names are spelled out (`clients_per_round`, `shards_per_client`)
//! rather than single letters. Unknown fields are rejected so typos surface
//! as config errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PartitionMode, SyntheticSpec};
use crate::error::{FedselError, Result};
use crate::model::Arch;
use crate::selection::{binomial, PolicySpec, DEFAULT_ORACLE_BUDGET};
use crate::sketch::SketchConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearningRate {
    Constant { eta: f64 },
    /// `eta · factor^floor((round − 1) / every)`.
    StepDecay { eta: f64, factor: f64, every: usize },
}

impl Default for LearningRate {
    fn default() -> Self {
        LearningRate::Constant { eta: 0.1 }
    }
}

impl LearningRate {
    /// Step size for the 1-based `round`.
    pub fn at(&self, round: usize) -> f64 {
        match *self {
            LearningRate::Constant { eta } => eta,
            LearningRate::StepDecay { eta, factor, every } => {
                eta * factor.powi((round.saturating_sub(1) / every) as i32)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let (eta, ok) = match *self {
            LearningRate::Constant { eta } => (eta, true),
            LearningRate::StepDecay { eta, factor, every } => {
                (eta, every >= 1 && factor.is_finite() && factor > 0.0)
            }
        };
        if !(eta.is_finite() && eta > 0.0) || !ok {
            return Err(FedselError::Config(format!("invalid learning rate {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Linear,
    Mlp { hidden: usize },
}

impl ModelSpec {
    pub fn arch(&self, d_in: usize, classes: usize) -> Arch {
        match *self {
            ModelSpec::Linear => Arch::Linear { d_in, classes },
            ModelSpec::Mlp { hidden } => Arch::Mlp {
                d_in,
                hidden,
                classes,
            },
        }
    }

    pub fn num_layers(&self) -> usize {
        match self {
            ModelSpec::Linear => 1,
            ModelSpec::Mlp { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
    },
    Csv {
        path: PathBuf,
    },
}

impl DataSource {
    pub fn synthetic(spec: SyntheticSpec) -> Self {
        DataSource::Synthetic {
            classes: spec.classes,
            dim: spec.dim,
            per_class: spec.per_class,
            spread: spec.spread,
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_oracle_budget() -> usize {
    DEFAULT_ORACLE_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub clients_per_round: usize,
    #[serde(default)]
    pub learning_rate: LearningRate,
    pub policy: PolicySpec,
    #[serde(default)]
    pub sketch: SketchConfig,
    pub partition: PartitionMode,
    pub model: ModelSpec,
    pub data: DataSource,
    pub seeds: Vec<u64>,
    /// Gradient segments (`"layer0"`, `"layer1"`, ...) used for similarity;
    /// all layers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_layers: Option<Vec<String>>,
    /// Run the exhaustive oracle each round to report regret.
    #[serde(default = "default_true")]
    pub track_regret: bool,
    #[serde(default = "default_oracle_budget")]
    pub oracle_budget: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| FedselError::Config(format!("invalid config: {e}")))
    }

    /// Reads and validates a config file. Relative CSV paths are resolved
    /// against the config file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            FedselError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = Self::from_json(&text)
            .map_err(|e| FedselError::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let DataSource::Csv { path } = &mut self.data {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    /// Segment ids used for selection similarity.
    pub fn selection_layer_ids(&self) -> Vec<String> {
        self.selection_layers
            .clone()
            .unwrap_or_else(|| (0..self.model.num_layers()).map(|i| format!("layer{i}")).collect())
    }

    pub fn per_round(&self) -> usize {
        self.policy
            .effective_per_round(self.num_clients, self.clients_per_round)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(FedselError::Config(m));
        if self.num_clients < 2 {
            return cfg_err(format!("num_clients must be >= 2, got {}", self.num_clients));
        }
        if self.clients_per_round < 2 || self.clients_per_round > self.num_clients {
            return cfg_err(format!(
                "clients_per_round must satisfy 2 <= J <= num_clients, got {}",
                self.clients_per_round
            ));
        }
        if self.rounds == 0 {
            return cfg_err("rounds must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return cfg_err("seeds must list at least one seed".into());
        }
        self.learning_rate.validate()?;
        self.policy.validate()?;
        match self.partition {
            PartitionMode::Shard { shards_per_client } if shards_per_client == 0 => {
                return cfg_err("shards_per_client must be >= 1".into());
            }
            PartitionMode::Dirichlet { alpha } if !(alpha.is_finite() && alpha > 0.0) => {
                return cfg_err(format!("dirichlet alpha must be positive, got {alpha}"));
            }
            _ => {}
        }
        if let ModelSpec::Mlp { hidden: 0 } = self.model {
            return cfg_err("mlp hidden width must be >= 1".into());
        }
        if let DataSource::Synthetic { classes, dim, per_class, spread } = self.data {
            SyntheticSpec { classes, dim, per_class, spread }.validate()?;
        }
        let layers = self.selection_layer_ids();
        if layers.is_empty() {
            return cfg_err("selection_layers must not be empty".into());
        }
        let valid: Vec<String> = (0..self.model.num_layers()).map(|i| format!("layer{i}")).collect();
        for (i, l) in layers.iter().enumerate() {
            if !valid.contains(l) {
                return cfg_err(format!("selection layer '{l}' not in {valid:?}"));
            }
            if layers[..i].contains(l) {
                return cfg_err(format!("selection layer '{l}' listed twice"));
            }
        }
        if let PolicySpec::Pncs { segment_weights: Some(w), .. } = &self.policy {
            crate::numerics::validate_weights(w, layers.len())
                .map_err(|e| FedselError::Config(format!("pncs segment_weights: {e}")))?;
        }
        if self.track_regret || self.policy == PolicySpec::Oracle {
            let subsets = binomial(self.num_clients, self.per_round());
            if subsets > self.oracle_budget as u64 {
                return cfg_err(format!(
                    "oracle needs {subsets} subsets per round, budget is {}",
                    self.oracle_budget
                ));
            }
        }
        Ok(())
    }

    /// Canonical JSON: keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn config_hash(&self) -> String {
        hex_digest(self.canonical_json().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"{
        "num_clients": 4, "rounds": 3, "clients_per_round": 2,
        "policy": {"kind": "pncs", "queue_len": 2},
        "partition": {"mode": "shard", "shards_per_client": 1},
        "model": {"arch": "linear"},
        "data": {"source": "synthetic", "classes": 4, "dim": 5, "per_class": 20, "spread": 0.5},
        "seeds": [0, 1]
    }"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_json(TINY).unwrap();
        c.validate().unwrap();
        assert_eq!(c.learning_rate, LearningRate::Constant { eta: 0.1 });
        assert_eq!(c.sketch, SketchConfig::default());
        assert!(c.track_regret);
        assert_eq!(c.selection_layer_ids(), vec!["layer0".to_string()]);
    }

    #[test]
    fn canonical_round_trip() {
        let c = ExperimentConfig::from_json(TINY).unwrap();
        let again = ExperimentConfig::from_json(&c.canonical_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.canonical_json(), again.canonical_json());
        assert_eq!(c.config_hash(), again.config_hash());
        assert_eq!(c.config_hash().len(), 64);
    }

    #[test]
    fn rejects_unknown_and_invalid_fields() {
        let typo = TINY.replace("\"rounds\"", "\"round\"");
        assert!(ExperimentConfig::from_json(&typo).is_err());
        let mut c = ExperimentConfig::from_json(TINY).unwrap();
        c.clients_per_round = 5;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::from_json(TINY).unwrap();
        c.selection_layers = Some(vec!["layer1".into()]);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::from_json(TINY).unwrap();
        c.num_clients = 40;
        c.clients_per_round = 8;
        assert!(matches!(c.validate(), Err(FedselError::Config(m)) if m.contains("oracle")));
        c.track_regret = false;
        c.validate().unwrap();
    }

    #[test]
    fn step_decay_schedule() {
        let lr = LearningRate::StepDecay { eta: 0.1, factor: 0.5, every: 10 };
        assert_eq!(lr.at(1), 0.1);
        assert_eq!(lr.at(10), 0.1);
        assert_eq!(lr.at(11), 0.05);
        assert_eq!(lr.at(21), 0.025);
    }
}
