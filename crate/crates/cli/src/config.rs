//! Experiment configuration: one TOML file covering feeder, scenario and
//! training, echoed fully resolved into every run directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fpsurrogate::datagen::{random_pv_locations, ScenarioConfig};
use fpsurrogate::derive_seed;
use fpsurrogate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Seed purposes split off the master seed.
pub mod purpose {
    pub const FEEDER: u64 = 0;
    pub const PV_SITES: u64 = 1;
    pub const DATA: u64 = 2;
    pub const SHUFFLE: u64 = 3;
}

/// Where the feeder comes from: a JSON file, or a synthetic radial feeder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeederSource {
    /// Feeder JSON. Relative paths are resolved against the config file.
    pub path: Option<PathBuf>,
    /// PQ bus count of a synthetic feeder.
    pub buses: usize,
    /// Synthetic generation seed; derived from the master seed when that is set.
    pub seed: u64,
}

impl Default for FeederSource {
    fn default() -> Self {
        Self {
            path: None,
            buses: 13,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. When present it overrides the feeder, scenario and
    /// training seeds, each derived on its own stream.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Random PV sites drawn when `scenario.pv_buses` is empty.
    pub pv_sites: usize,
    pub feeder: FeederSource,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("runs/experiment"),
            pv_sites: 0,
            feeder: FeederSource::default(),
            scenario: ScenarioConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config file; a relative `feeder.path` is made relative to the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config =
            Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let (Some(feeder), Some(dir)) = (config.feeder.path.as_mut(), path.parent()) {
            if feeder.is_relative() {
                *feeder = dir.join(&*feeder);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Pushes the master seed (if any) into every per-purpose seed.
    pub fn apply_master_seed(&mut self) {
        if let Some(master) = self.seed {
            self.feeder.seed = derive_seed(master, purpose::FEEDER);
            self.scenario.seed = derive_seed(master, purpose::DATA);
            self.train.seed = derive_seed(master, purpose::SHUFFLE);
        }
    }

    /// Fills PV sites for an `n_buses` feeder when none are listed.
    pub fn resolve_pv_sites(&mut self, n_buses: usize) {
        if self.scenario.pv_buses.is_empty() && self.pv_sites > 0 {
            let seed = match self.seed {
                Some(master) => derive_seed(master, purpose::PV_SITES),
                None => self.scenario.seed,
            };
            self.scenario.pv_buses = random_pv_locations(n_buses, self.pv_sites, seed);
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.feeder.path.is_none() && self.feeder.buses == 0 {
            bail!(fpsurrogate::Error::Config(
                "feeder.buses must be at least 1".into()
            ));
        }
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let config = ExperimentConfig::default();
        let text = config.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), config);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let config =
            ExperimentConfig::from_toml("seed = 4\n[feeder]\nbuses = 5\n[train]\nepochs = 3\n")
                .unwrap();
        assert_eq!(config.seed, Some(4));
        assert_eq!(config.feeder.buses, 5);
        assert_eq!(config.train.epochs, 3);
        assert_eq!(config.train.lr_initial, 0.5);
        assert_eq!(config.scenario, ScenarioConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[train]\nlearning_rate = 1.0\n").is_err());
    }

    #[test]
    fn master_seed_splits_into_streams() {
        let mut config = ExperimentConfig {
            seed: Some(9),
            ..Default::default()
        };
        config.apply_master_seed();
        let seeds = [config.feeder.seed, config.scenario.seed, config.train.seed];
        assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2] && seeds[0] != seeds[2]);
        let mut again = config.clone();
        again.apply_master_seed();
        assert_eq!(again, config);
    }

    #[test]
    fn pv_sites_resolved_once() {
        let mut config = ExperimentConfig {
            seed: Some(1),
            pv_sites: 3,
            ..Default::default()
        };
        config.resolve_pv_sites(13);
        assert_eq!(config.scenario.pv_buses.len(), 3);
        let first = config.scenario.pv_buses.clone();
        config.resolve_pv_sites(13);
        assert_eq!(config.scenario.pv_buses, first);
    }
}
