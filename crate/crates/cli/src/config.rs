//! Run configuration: one TOML file covering data, model, training,
//! generation and metrics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pdvae::metrics::MetricConfig;
use pdvae::motion::{ExportFormat, Skeleton, SynthConfig};
use pdvae::networks::{LatentMode, ModelConfig};
use pdvae::training::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub dancers: usize,
    /// Formation spacing in metres.
    pub spacing: f64,
    /// `frame-dump` or `bvh`.
    pub format: String,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            dancers: 5,
            spacing: 1.5,
            format: "frame-dump".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dancers: Vec<usize>,
    /// Timed repetitions per dancer count; the median is reported.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dancers: vec![2, 5, 10, 50, 100],
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub metrics: MetricConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("pdvae-out"),
            data: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generate: GenerateConfig::default(),
            metrics: MetricConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Copies the data-determined sizes into the model section and checks
    /// every section.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let skeleton = Skeleton::from_kind(self.data.skeleton);
        self.model.joints = skeleton.joint_count();
        self.model.frames = self.data.frames;
        self.model.cond_dim = self.data.conditioning_dim();
        self.data.validate().map_err(config)?;
        self.model.validate().map_err(config)?;
        self.train.validate().map_err(config)?;
        self.metrics.validate().map_err(config)?;
        self.format()?;
        if self.bench.repeats == 0 || self.bench.dancers.contains(&0) {
            return Err(CliError::Config("bench needs repeats >= 1 and positive dancer counts".into()));
        }
        Ok(self)
    }

    pub fn format(&self) -> Result<ExportFormat, CliError> {
        self.generate.format.parse().map_err(config)
    }

    pub fn latent_mode(&self) -> LatentMode {
        self.train.ablation().latent_mode()
    }
}

fn config(e: pdvae::Error) -> CliError {
    CliError::Config(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nlayerz = 2").is_err());
        assert!(RunConfig::from_toml("[train.weights]\nkl = 0.1\nfoo = 1").is_err());
    }

    #[test]
    fn resolve_copies_data_sizes() {
        let c = RunConfig::from_toml("[data]\nskeleton = \"toy8\"\nframes = 32\nstyles = 2").unwrap().resolve().unwrap();
        assert_eq!((c.model.joints, c.model.frames, c.model.cond_dim), (8, 32, 4));
        assert!(RunConfig::from_toml("[data]\ngroups = 0").unwrap().resolve().is_err());
        assert!(RunConfig::from_toml("[generate]\nformat = \"fbx\"").unwrap().resolve().is_err());
    }
}
