// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: a TOML file with sections, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use somnus::qnet::NetworkConfig;
use somnus::recommend::{AdvisableVariant, GradientAscentConfig};
use somnus::synthgen::GeneratorConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringChoice {
    #[default]
    All,
    Reported,
    OracleActual,
    Counterfactual,
    SimulatedReport,
}

impl std::str::FromStr for ScoringChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "all" => Self::All,
            "reported" => Self::Reported,
            "oracle-actual" => Self::OracleActual,
            "counterfactual" => Self::Counterfactual,
            "simulated-report" => Self::SimulatedReport,
            other => return Err(format!("unknown scoring '{other}'")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommendSection {
    pub variant: AdvisableVariant,
    pub ascent: GradientAscentConfig,
}

impl Default for RecommendSection {
    fn default() -> Self {
        Self {
            variant: AdvisableVariant::Base,
            ascent: GradientAscentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Share of users held out from training for evaluation.
    pub holdout: f64,
    pub folds: usize,
    pub scoring: ScoringChoice,
    /// Finite-difference step for second derivatives.
    pub probe_step: f64,
    /// Cap on users used for second derivatives.
    pub max_users: usize,
    /// Simulated-report replicates in the flip test.
    pub replicates: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            holdout: 0.2,
            folds: 10,
            scoring: ScoringChoice::All,
            probe_step: 1e-3,
            max_users: 200,
            replicates: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single source of randomness; copied into every seeded section.
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub plot: bool,
    pub generator: GeneratorConfig,
    pub network: NetworkConfig,
    pub recommend: RecommendSection,
    pub evaluation: EvaluationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            out: PathBuf::from("out"),
            data: None,
            model: None,
            plot: false,
            generator: GeneratorConfig::default(),
            network: NetworkConfig::default(),
            recommend: RecommendSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Propagates the run seed into the seeded sections.
    pub fn resolve(mut self) -> Self {
        self.generator.seed = self.seed;
        self.network.seed = self.seed;
        self
    }

    /// Writes `config.resolved` into the output directory.
    pub fn write_resolved(&self) -> Result<()> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        let text = toml::to_string(self).context("serializing resolved config")?;
        fs::write(self.out.join("config.resolved"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.seed = 7;
        c.data = Some(PathBuf::from("pop"));
        c.network.epochs = 3;
        c.recommend.variant = AdvisableVariant::NoNoise;
        let c = c.resolve();
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.network.seed, 7);
        assert_eq!(back.generator.seed, 7);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig = toml::from_str("seed = 3\n[network]\nepochs = 2\n").unwrap();
        assert_eq!(c.network.epochs, 2);
        assert_eq!(c.network.lstm_sizes, vec![50, 10]);
        assert_eq!(c.evaluation.holdout, 0.2);
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }
}
