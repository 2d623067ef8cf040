//! Experiment configuration: a single human-readable file (TOML or JSON)
//! that fully determines a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::Strategy;
use crate::editing::EditConfig;
use crate::error::{Error, Result};
use crate::toytask::TaskDims;

/// Independent base seeds for the four random subsystems. Keeping them apart
/// is what lets two strategies share identical data, initialization and
/// sampling sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedBundle {
    pub data: u64,
    pub init: u64,
    pub sampling: u64,
    pub training: u64,
}

impl Default for SeedBundle {
    fn default() -> Self {
        Self {
            data: 11,
            init: 12,
            sampling: 13,
            training: 14,
        }
    }
}

impl SeedBundle {
    /// Derive a full bundle from one master seed.
    pub fn from_master(master: u64) -> Self {
        Self {
            data: crate::rng::derive_seed(master, &[1]),
            init: crate::rng::derive_seed(master, &[2]),
            sampling: crate::rng::derive_seed(master, &[3]),
            training: crate::rng::derive_seed(master, &[4]),
        }
    }

    /// Compact `key=value` form for telemetry rows.
    pub fn describe(&self) -> String {
        format!(
            "data={}|init={}|sampling={}|training={}",
            self.data, self.init, self.sampling, self.training
        )
    }
}

/// Local-training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            lr: 0.06,
            batch: 8,
        }
    }
}

/// Everything a run needs. Unset fields take the defaults below, which mirror
/// a 10-client federation with sampling rate 0.4 and client ranks spanning 4
/// to 32.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_n_clients")]
    pub n_clients: usize,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Per-client LoRA rank; length must equal `n_clients`.
    #[serde(default = "default_ranks")]
    pub rank_assignment: Vec<usize>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub missing_ratio: f64,
    #[serde(default)]
    pub edit: EditConfig,
    #[serde(default)]
    pub seeds: SeedBundle,
    #[serde(default)]
    pub dims: TaskDims,
    #[serde(default = "default_total_samples")]
    pub total_samples: usize,
    #[serde(default = "default_min_subset")]
    pub min_subset: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Relative scale of the cross-modal label signal; see the task docs.
    #[serde(default = "default_cross_gain")]
    pub cross_gain: f64,
    /// Multiplier on the standard `1/sqrt(in_dim)` adapter-A init scale.
    #[serde(default = "default_adapter_init_scale")]
    pub adapter_init_scale: f64,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_n_clients() -> usize {
    10
}

fn default_sample_rate() -> f64 {
    0.4
}

fn default_rounds() -> usize {
    15
}

fn default_ranks() -> Vec<usize> {
    vec![4, 4, 8, 8, 12, 16, 16, 24, 32, 32]
}

fn default_strategy() -> Strategy {
    Strategy::FediLora
}

fn default_total_samples() -> usize {
    1100
}

fn default_min_subset() -> usize {
    20
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_cross_gain() -> f64 {
    1.0
}

fn default_adapter_init_scale() -> f64 {
    0.18
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_clients: default_n_clients(),
            sample_rate: default_sample_rate(),
            rounds: default_rounds(),
            rank_assignment: default_ranks(),
            strategy: default_strategy(),
            missing_ratio: 0.0,
            edit: EditConfig::default(),
            seeds: SeedBundle::default(),
            dims: TaskDims::default(),
            total_samples: default_total_samples(),
            min_subset: default_min_subset(),
            train_fraction: default_train_fraction(),
            cross_gain: default_cross_gain(),
            adapter_init_scale: default_adapter_init_scale(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The experiment-wide global rank: the maximum over all registered
    /// clients, not just any round's sample.
    pub fn global_rank(&self) -> usize {
        self.rank_assignment.iter().copied().max().unwrap_or(0)
    }

    /// Clients sampled per round: `ceil(sample_rate * n_clients)`, at least 1.
    pub fn clients_per_round(&self) -> usize {
        ((self.sample_rate * self.n_clients as f64).ceil() as usize).clamp(1, self.n_clients)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::InvalidConfig("n_clients must be >= 1".to_string()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sample_rate {} outside (0, 1]",
                self.sample_rate
            )));
        }
        if self.rank_assignment.len() != self.n_clients {
            return Err(Error::InvalidConfig(format!(
                "rank_assignment has {} entries for {} clients",
                self.rank_assignment.len(),
                self.n_clients
            )));
        }
        if self.rank_assignment.iter().any(|&r| r == 0) {
            return Err(Error::InvalidConfig("ranks must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.missing_ratio) {
            return Err(Error::InvalidRatio(self.missing_ratio));
        }
        if self.edit.k == 0 || self.edit.k > self.dims.layers {
            return Err(Error::InvalidConfig(format!(
                "edit.k {} outside 1..={}",
                self.edit.k, self.dims.layers
            )));
        }
        if let Some(g) = self.edit.gamma_override {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::InvalidConfig(format!(
                    "edit.gamma_override {g} outside [0, 1]"
                )));
            }
        }
        if !(self.adapter_init_scale > 0.0 && self.adapter_init_scale.is_finite()) {
            return Err(Error::InvalidConfig(
                "adapter_init_scale must be positive and finite".to_string(),
            ));
        }
        if self.train.steps == 0 {
            return Err(Error::InvalidConfig("train.steps must be >= 1".to_string()));
        }
        if self.train.lr < 0.0 {
            return Err(Error::InvalidConfig("train.lr must be >= 0".to_string()));
        }
        if self.train.batch == 0 {
            return Err(Error::InvalidConfig("train.batch must be >= 1".to_string()));
        }
        self.dataset_spec().validate()
    }

    pub fn dataset_spec(&self) -> crate::toytask::DatasetSpec {
        crate::toytask::DatasetSpec {
            n_clients: self.n_clients,
            total_samples: self.total_samples,
            min_subset: self.min_subset,
            train_fraction: self.train_fraction,
            missing_ratio: self.missing_ratio,
            cross_gain: self.cross_gain,
            dims: self.dims,
        }
    }

    /// Load from a TOML (default) or JSON (`.json`) file and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!(
                "config not found or unreadable: {}: {e}",
                path.display()
            ))
        })?;
        let config: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        };
        config.validate()?;
        Ok(config)
    }

    /// Serialize the fully-resolved config as JSON (the config echo).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.global_rank(), 32);
        assert_eq!(c.clients_per_round(), 4);
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut c = ExperimentConfig::default();
        c.sample_rate = 0.0;
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::default();
        c.rank_assignment = vec![4; 9];
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::default();
        c.missing_ratio = 1.2;
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::default();
        c.edit.k = 99;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip_with_partial_file() {
        let mut f = tempfile::Builder::new().suffix(".toml").tempfile().unwrap();
        write!(
            f,
            "rounds = 3\nstrategy = \"hetlora\"\nmissing_ratio = 0.4\n\n[seeds]\ndata = 1\ninit = 2\nsampling = 3\ntraining = 4\n"
        )
        .unwrap();
        let c = ExperimentConfig::load(f.path()).unwrap();
        assert_eq!(c.rounds, 3);
        assert_eq!(c.strategy, Strategy::HetLora);
        assert_eq!(c.missing_ratio, 0.4);
        assert_eq!(c.seeds.data, 1);
        // Unset fields take defaults.
        assert_eq!(c.n_clients, 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut f = tempfile::Builder::new().suffix(".toml").tempfile().unwrap();
        write!(f, "rounds = 3\nnot_a_key = true\n").unwrap();
        assert!(ExperimentConfig::load(f.path()).is_err());
    }

    #[test]
    fn json_echo_reloads_identically() {
        let c = ExperimentConfig::default();
        let json = c.to_json().unwrap();
        let mut f = tempfile::Builder::new().suffix(".json").tempfile().unwrap();
        write!(f, "{json}").unwrap();
        let back = ExperimentConfig::load(f.path()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let err = ExperimentConfig::load(Path::new("/definitely/not/here.toml")).unwrap_err();
        assert!(err.to_string().contains("config not found"));
    }
}
