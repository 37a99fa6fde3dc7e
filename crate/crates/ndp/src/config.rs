//! Run configuration: TOML ingestion, validation, defaults.
//!
//! An empty file parses to the fiducial regression setup (H = 64, 5 blocks,
//! 8 heads, T = 500, batch 32, L1 loss, cosine learning-rate decay).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NdpError, Result};
use crate::gp::{InputMode, KernelFamily, KernelSpec, LengthscalePrior};
use crate::model::ModelConfig;
use crate::sample::{SamplerConfig, VarianceForm};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::train::{LossKind, TrainSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub precision: Precision,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub tasks: TasksSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: "ndp_out".into(),
            precision: Precision::F32,
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
            tasks: TasksSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_width: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub timesteps: usize,
    pub deterministic_inputs: bool,
    pub head_depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_width: 64,
            num_blocks: 5,
            num_heads: 8,
            timesteps: 500,
            deterministic_inputs: true,
            head_depth: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKindName,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { kind: ScheduleKindName::Cosine }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKindName {
    Cosine,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelName {
    SquaredExponential,
    Matern32,
    Matern52,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputModeName {
    UniformRandom,
    Grid,
    Halton,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub kind: PriorKindName,
    pub mu_log: f64,
    pub sigma_log: f64,
    pub per_dimension: bool,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            kind: PriorKindName::Fixed,
            mu_log: 0.5f64.ln(),
            sigma_log: 0.5f64.sqrt(),
            per_dimension: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKindName {
    Fixed,
    LogNormal,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dimension: usize,
    pub kernel: KernelName,
    pub lengthscales: Vec<f64>,
    pub kernel_variance: f64,
    pub noise_variance: f64,
    pub input_mode: InputModeName,
    pub lengthscale_prior: PriorSection,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dimension: 1,
            kernel: KernelName::SquaredExponential,
            lengthscales: vec![0.2],
            kernel_variance: 1.0,
            noise_variance: 1e-6,
            input_mode: InputModeName::Grid,
            lengthscale_prior: PriorSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub points_per_dataset: usize,
    pub loss: LossName,
    pub lr_max: f64,
    pub warmup_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 250,
            samples_per_epoch: 4096,
            batch_size: 32,
            points_per_dataset: 100,
            loss: LossName::L1,
            lr_max: 1e-3,
            warmup_epochs: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    L1,
    L2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub resample_count: usize,
    pub clamp_final_step: bool,
    pub variance_form: VarianceFormName,
    pub num_targets: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            resample_count: 5,
            clamp_final_step: true,
            variance_form: VarianceFormName::TildeBeta,
            num_targets: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceFormName {
    TildeBeta,
    Eq4AsWritten,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksSection {
    pub bo: BoSection,
    pub density: DensitySection,
    pub marginalisation: MarginalisationSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoSection {
    pub budget: usize,
    pub num_candidates: usize,
    pub num_seeds: usize,
    pub initial_design: usize,
    pub gpr_grid_min: f64,
    pub gpr_grid_max: f64,
    pub gpr_grid_points: usize,
}

impl Default for BoSection {
    fn default() -> Self {
        BoSection {
            budget: 50,
            num_candidates: 128,
            num_seeds: 5,
            initial_design: 3,
            gpr_grid_min: 0.05,
            gpr_grid_max: 5.0,
            gpr_grid_points: 32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitySection {
    pub budget: usize,
    pub samples_per_step: usize,
    pub std_floor: f64,
}

impl Default for DensitySection {
    fn default() -> Self {
        DensitySection { budget: 20, samples_per_step: 1, std_floor: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginalisationSection {
    pub num_samples: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    pub eval_points: usize,
}

impl Default for MarginalisationSection {
    fn default() -> Self {
        MarginalisationSection {
            num_samples: 128,
            grid_min: 0.05,
            grid_max: 5.0,
            grid_points: 64,
            eval_points: 64,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| NdpError::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.data.lengthscales.len() != self.data.dimension {
            return Err(NdpError::ConfigInvalid(format!(
                "data.lengthscales has {} entries but data.dimension is {}",
                self.data.lengthscales.len(),
                self.data.dimension
            )));
        }
        self.kernel_spec()?;
        self.train_settings().validate()?;
        self.sampler_config().validate()?;
        if self.tasks.bo.budget == 0 || self.tasks.density.budget == 0 {
            return Err(NdpError::ConfigInvalid("tasks budgets must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_width: self.model.embed_width,
            num_blocks: self.model.num_blocks,
            num_heads: self.model.num_heads,
            timesteps: self.model.timesteps,
            deterministic_inputs: self.model.deterministic_inputs,
            head_depth: self.model.head_depth,
        }
    }

    pub fn schedule_kind(&self) -> ScheduleKind {
        match self.schedule.kind {
            ScheduleKindName::Cosine => ScheduleKind::Cosine,
            ScheduleKindName::Linear => ScheduleKind::Linear,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.schedule_kind(), self.model.timesteps)
    }

    pub fn kernel_family(&self) -> KernelFamily {
        match self.data.kernel {
            KernelName::SquaredExponential => KernelFamily::SquaredExponential,
            KernelName::Matern32 => KernelFamily::Matern32,
            KernelName::Matern52 => KernelFamily::Matern52,
        }
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        KernelSpec::new(
            self.kernel_family(),
            self.data.lengthscales.clone(),
            self.data.kernel_variance,
            self.data.noise_variance,
        )
    }

    pub fn lengthscale_prior(&self) -> LengthscalePrior {
        match self.data.lengthscale_prior.kind {
            PriorKindName::Fixed => LengthscalePrior::Fixed,
            PriorKindName::LogNormal => LengthscalePrior::LogNormal {
                mu_log: self.data.lengthscale_prior.mu_log,
                sigma_log: self.data.lengthscale_prior.sigma_log,
                per_dimension: self.data.lengthscale_prior.per_dimension,
            },
        }
    }

    pub fn input_mode(&self) -> InputMode {
        match self.data.input_mode {
            InputModeName::UniformRandom => InputMode::UniformRandom,
            InputModeName::Grid => InputMode::Grid,
            InputModeName::Halton => InputMode::Halton,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.train.epochs,
            samples_per_epoch: self.train.samples_per_epoch,
            batch_size: self.train.batch_size,
            points_per_dataset: self.train.points_per_dataset,
            dimension: self.data.dimension,
            loss: match self.train.loss {
                LossName::L1 => LossKind::L1,
                LossName::L2 => LossKind::L2,
            },
            lr_max: self.train.lr_max,
            warmup_epochs: self.train.warmup_epochs,
            kernel: self.kernel_spec().expect("validated"),
            lengthscale_prior: self.lengthscale_prior(),
            input_mode: self.input_mode(),
            seed: self.seed,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            resample_count: self.sampler.resample_count,
            clamp_final_step: self.sampler.clamp_final_step,
            variance_form: match self.sampler.variance_form {
                VarianceFormName::TildeBeta => VarianceForm::TildeBeta,
                VarianceFormName::Eq4AsWritten => VarianceForm::Eq4AsWritten,
            },
            num_targets: self.sampler.num_targets,
        }
    }
}

/// Parse and validate a TOML config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_toml_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_fiducial_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.model.embed_width, 64);
        assert_eq!(cfg.model.num_blocks, 5);
        assert_eq!(cfg.model.num_heads, 8);
        assert_eq!(cfg.model.timesteps, 500);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.epochs, 250);
        assert_eq!(cfg.train.samples_per_epoch, 4096);
        assert_eq!(cfg.train.loss, LossName::L1);
        assert_eq!(cfg.train.lr_max, 1e-3);
        assert_eq!(cfg.train.warmup_epochs, 20);
        assert_eq!(cfg.schedule.kind, ScheduleKindName::Cosine);
        assert_eq!(cfg.sampler.resample_count, 5);
    }

    #[test]
    fn head_divisibility_is_validated() {
        let err = RunConfig::from_toml_str("[model]\nnum_heads = 7\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("num_heads") || msg.contains("divisible"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[model]\nwidth = 3\n").unwrap_err();
        assert!(matches!(err, NdpError::ConfigParse(_)), "{err}");
    }

    #[test]
    fn parse_error_carries_line_info() {
        let err = RunConfig::from_toml_str("[model\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn round_trip_is_semantically_identical() {
        let mut cfg = RunConfig::from_toml_str(
            "[model]\nembed_width = 32\nnum_blocks = 3\nnum_heads = 4\ntimesteps = 250\n\
             [data]\nkernel = \"matern32\"\nlengthscales = [0.5]\n\
             [train]\nepochs = 7\n",
        )
        .unwrap();
        cfg.seed = 42;
        let text = cfg.to_toml_string();
        let reparsed = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(text, reparsed.to_toml_string());
        assert_eq!(reparsed.model.embed_width, 32);
        assert_eq!(reparsed.seed, 42);
        assert_eq!(reparsed.data.kernel, KernelName::Matern32);
    }

    #[test]
    fn lengthscale_dimension_consistency() {
        let err = RunConfig::from_toml_str("[data]\ndimension = 2\nlengthscales = [0.5]\n")
            .unwrap_err();
        assert!(err.to_string().contains("lengthscales"), "{err}");
    }
}
