//! Declarative run configuration.
//!
//! One TOML document with sections for the dataset, architecture, training,
//! sampler, guidance, experiment mode, and output. Every key has a default;
//! unknown keys are rejected. The resolved document is echoed into each
//! output directory so any artifact can be replayed from its config and
//! seed alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, SamplerConfig, TrainConfig};
use crate::domain::{generate_synthetic, ingest_records, load_dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::harness::experiment::Mode;
use crate::nn::optim::AdamWConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    /// Root seed; all randomness in a run derives from it.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub architecture: ArchitectureSection,
    pub training: TrainingSection,
    pub sampler: SamplerSection,
    pub guidance: GuidanceSection,
    pub experiment: ExperimentSection,
    pub output: OutputSection,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile {
            seed: 42,
            dataset: DatasetSection::default(),
            architecture: ArchitectureSection::default(),
            training: TrainingSection::default(),
            sampler: SamplerSection::default(),
            guidance: GuidanceSection::default(),
            experiment: ExperimentSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// `synthetic` or `file`.
    pub source: String,
    /// Total synthetic instances before the 80/10/10 split.
    pub count: usize,
    /// Dataset-specific seed; falls back to the root seed.
    pub seed: Option<u64>,
    pub radius: f64,
    /// Record file for `source = "file"`.
    pub path: Option<String>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: "synthetic".to_string(),
            count: 2500,
            seed: None,
            radius: 1.0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureSection {
    pub heads: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub out_scale: f64,
}

impl Default for ArchitectureSection {
    fn default() -> Self {
        ArchitectureSection {
            heads: 4,
            embed_dim: 64,
            time_dim: 32,
            hidden: 256,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            out_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub phase1_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub ir_weight_start: f64,
    pub ir_weight_end: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            epochs: 30,
            phase1_epochs: 15,
            batch_size: 256,
            base_lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_decay: 1e-4,
            ir_weight_start: 10.0,
            ir_weight_end: 50.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub clean_clip: f64,
    pub drift_clamp: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            steps: 50,
            clean_clip: 1.2,
            drift_clamp: 1.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub lambda: f64,
    pub t_start: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub radius: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        GuidanceSection {
            lambda: g.lambda,
            t_start: g.t_start,
            alpha: g.alpha,
            beta: g.beta,
            gamma: g.gamma,
            delta: g.delta,
            epsilon: g.eps_num,
            radius: g.radius,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// guided | unguided | projection | hard_constraint | supervised.
    pub mode: String,
    /// Samples drawn per test instance.
    pub ensemble: usize,
    /// Worker threads for sampling and grid cells.
    pub jobs: usize,
    /// Load parameters from this checkpoint instead of training.
    pub checkpoint: Option<String>,
    /// Rewrite both disagreement points to their mean before sampling.
    pub counterfactual_equalize_d: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            mode: "guided".to_string(),
            ensemble: 1,
            jobs: 1,
            checkpoint: None,
            counterfactual_equalize_d: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Artifact directory; nothing is written when absent.
    pub dir: Option<String>,
}

impl RunConfigFile {
    pub fn from_path(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("config `{}`: {e}", path.display())))?;
        let cfg: RunConfigFile = toml::from_str(&raw)
            .map_err(|e| Error::Parse(format!("config `{}`: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(format!("serialize config: {e}")))
    }

    /// The full key set with its built-in defaults, as a TOML document.
    pub fn default_toml() -> String {
        RunConfigFile::default()
            .to_toml()
            .expect("default config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.source.as_str() {
            "synthetic" => {}
            "file" => {
                if self.dataset.path.is_none() {
                    return Err(Error::Config(
                        "dataset.source = \"file\" requires dataset.path".to_string(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "dataset.source `{other}` must be `synthetic` or `file`"
                )))
            }
        }
        if self.architecture.time_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "architecture.time_dim {} must be even",
                self.architecture.time_dim
            )));
        }
        self.noise_schedule()?;
        self.sampler_config().validate(self.architecture.timesteps)?;
        self.guidance_config().validate()?;
        self.mode()?;
        if self.experiment.ensemble == 0 {
            return Err(Error::Config("experiment.ensemble must be >= 1".to_string()));
        }
        if self.training.phase1_epochs > self.training.epochs {
            return Err(Error::Config(format!(
                "training.phase1_epochs {} exceeds training.epochs {}",
                self.training.phase1_epochs, self.training.epochs
            )));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.architecture.timesteps,
            self.architecture.beta_start,
            self.architecture.beta_end,
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            phase1_epochs: self.training.phase1_epochs,
            batch_size: self.training.batch_size,
            adamw: AdamWConfig {
                base_lr: self.training.base_lr,
                beta1: self.training.adam_beta1,
                beta2: self.training.adam_beta2,
                eps: 1e-8,
                weight_decay: self.training.weight_decay,
                horizon: 1,
            },
            ir_weight_start: self.training.ir_weight_start,
            ir_weight_end: self.training.ir_weight_end,
            c_max: self.sampler.clean_clip,
            guidance: self.guidance_config(),
            seed: self.seed,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler.steps,
            c_max: self.sampler.clean_clip,
            c_drift: self.sampler.drift_clamp,
            seed: self.seed,
        }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            lambda: self.guidance.lambda,
            t_start: self.guidance.t_start,
            alpha: self.guidance.alpha,
            beta: self.guidance.beta,
            gamma: self.guidance.gamma,
            delta: self.guidance.delta,
            eps_num: self.guidance.epsilon,
            radius: self.guidance.radius,
        }
    }

    pub fn mode(&self) -> Result<Mode> {
        self.experiment.mode.parse()
    }

    pub fn build_dataset(&self) -> Result<DatasetSplit> {
        match self.dataset.source.as_str() {
            "synthetic" => generate_synthetic(
                self.dataset.count,
                self.dataset.seed.unwrap_or(self.seed),
                self.dataset.radius,
            ),
            "file" => {
                let path = self
                    .dataset
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("dataset.path missing".to_string()))?;
                let path = Path::new(path);
                let sidecar = path.with_extension("meta.json");
                if sidecar.exists() {
                    load_dataset(path)
                } else {
                    ingest_records(path)
                }
            }
            other => Err(Error::Config(format!("unknown dataset source `{other}`"))),
        }
    }

    pub fn output_dir(&self) -> Option<PathBuf> {
        self.output.dir.as_ref().map(PathBuf::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_self_consistent() {
        let cfg = RunConfigFile::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.architecture.hidden, 256);
        assert_eq!(cfg.architecture.timesteps, 1000);
        assert_eq!(cfg.sampler.steps, 50);
        assert_eq!(cfg.guidance.delta, 0.05);
        // The denoiser input dimension implied by the defaults.
        assert_eq!(2 + cfg.architecture.time_dim + cfg.architecture.embed_dim, 98);
    }

    #[test]
    fn toml_round_trip_preserves_values() {
        let mut cfg = RunConfigFile::default();
        cfg.seed = 7;
        cfg.guidance.lambda = 0.12;
        cfg.experiment.mode = "projection".to_string();
        let text = cfg.to_toml().unwrap();
        let back: RunConfigFile = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.guidance.lambda, 0.12);
        assert_eq!(back.experiment.mode, "projection");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfigFile>(
            "[guidance]\nlambda = 0.1\nnot_a_key = 3\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("not_a_key"), "{err}");
    }

    #[test]
    fn partial_files_inherit_defaults() {
        let cfg: RunConfigFile = toml::from_str("seed = 9\n[sampler]\nsteps = 15\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.sampler.steps, 15);
        assert_eq!(cfg.sampler.clean_clip, 1.2);
        assert_eq!(cfg.training.epochs, 30);
    }

    #[test]
    fn invalid_mode_is_rejected() {
        let mut cfg = RunConfigFile::default();
        cfg.experiment.mode = "wild".to_string();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn file_source_requires_path() {
        let mut cfg = RunConfigFile::default();
        cfg.dataset.source = "file".to_string();
        assert!(cfg.validate().is_err());
    }
}
