//! Experiment configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bridge::BridgeSchedule;
use crate::error::{Error, Result};
use crate::haze::DcpParams;
use crate::nets::GeneratorConfig;
use crate::prompt::PromptConfig;
use crate::regularizers::HfdConfig;
use crate::trainer::{ImageTrainConfig, LossWeights, OptimConfig};

use super::data::PointCloud;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Toy2d,
    SynthHaze,
    ImageDir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    /// Images per step; point clouds use `toy.batch`.
    pub batch: usize,
    /// Evaluate every this many steps (0: only before and after training).
    pub eval_every: u64,
    /// Save a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: u64,
    pub nfe: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 2000,
            batch: 16,
            eval_every: 500,
            checkpoint_every: 1000,
            nfe: vec![1, 3, 5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub intervals: usize,
    pub tau: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            intervals: 5,
            tau: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub base_channels: usize,
    pub width: usize,
    pub blocks: usize,
    pub critic_hidden: usize,
    pub point_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        ModelSection {
            base_channels: g.base_channels,
            width: g.width,
            blocks: g.blocks,
            critic_hidden: 32,
            point_hidden: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerSection {
    pub nce_locations: usize,
    pub nce_temperature: f64,
    pub hfd: HfdConfig,
}

impl Default for RegularizerSection {
    fn default() -> Self {
        RegularizerSection {
            nce_locations: 64,
            nce_temperature: 0.07,
            hfd: HfdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Procedural clear images before the hazy/clear split.
    pub images: usize,
    pub size: usize,
    pub light_range: [f64; 2],
    pub transmission_range: [f64; 2],
    pub test_pairs: usize,
    pub hazy_dir: Option<PathBuf>,
    pub clear_dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            images: 512,
            size: 32,
            light_range: [0.8, 1.0],
            transmission_range: [0.35, 0.65],
            test_pairs: 32,
            hazy_dir: None,
            clear_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub source: PointCloud,
    pub target: PointCloud,
    pub points: usize,
    pub eval_points: usize,
    pub batch: usize,
}

impl Default for ToySection {
    fn default() -> Self {
        ToySection {
            source: PointCloud::TwoMoons,
            target: PointCloud::Ring,
            points: 4096,
            eval_points: 512,
            batch: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub regularizers: RegularizerSection,
    #[serde(default)]
    pub dcp: DcpParams,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub toy: ToySection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            kind,
            seed: 0,
            out_dir: default_out_dir(),
            train: TrainSection::default(),
            schedule: ScheduleSection::default(),
            weights: LossWeights::default(),
            optim: OptimConfig::default(),
            model: ModelSection::default(),
            regularizers: RegularizerSection::default(),
            dcp: DcpParams::default(),
            prompt: PromptConfig::default(),
            data: DataSection::default(),
            toy: ToySection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(d) => Error::Config(format!("{}: {d}", path.display())),
            other => other,
        })
    }

    pub fn schedule(&self) -> Result<BridgeSchedule> {
        BridgeSchedule::new(self.schedule.intervals, self.schedule.tau)
    }

    pub fn image_train_config(&self) -> ImageTrainConfig {
        ImageTrainConfig {
            weights: self.weights,
            optim: self.optim,
            hfd: self.regularizers.hfd,
            dcp: self.dcp,
            generator: GeneratorConfig {
                base_channels: self.model.base_channels,
                width: self.model.width,
                blocks: self.model.blocks,
            },
            nce_locations: self.regularizers.nce_locations,
            nce_temperature: self.regularizers.nce_temperature,
            guidance: self.prompt.loss_terms,
            embed_dim: self.prompt.embed_dim,
            critic_hidden: self.model.critic_hidden,
            image_size: [self.data.size, self.data.size],
        }
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let schedule = self.schedule()?;
        if let Some(n) = self
            .train
            .nfe
            .iter()
            .find(|&&n| n < 1 || n > schedule.n_intervals())
        {
            return bad(format!("nfe {n} outside 1..={}", schedule.n_intervals()));
        }
        if self.train.nfe.is_empty() {
            return bad("train.nfe must list at least one value".into());
        }
        self.weights.validate()?;
        if !(self.optim.lr > 0.0
            && (0.0..1.0).contains(&self.optim.beta1)
            && (0.0..1.0).contains(&self.optim.beta2))
        {
            return bad(format!("optimizer settings {:?} out of range", self.optim));
        }
        match self.kind {
            ExperimentKind::Toy2d => {
                if self.toy.batch < 2 || self.toy.points < 100 || self.toy.eval_points < 2 {
                    return bad("toy needs batch >= 2, points >= 100 and eval_points >= 2".into());
                }
            }
            ExperimentKind::SynthHaze | ExperimentKind::ImageDir => {
                if self.train.batch < 2 {
                    return bad("train.batch must be at least 2".into());
                }
                self.dcp.validate()?;
                self.regularizers.hfd.validate()?;
                if self.prompt.embed_dim == 0
                    || self.model.base_channels == 0
                    || self.model.width == 0
                {
                    return bad("network sizes must be positive".into());
                }
                if self.regularizers.nce_locations == 0
                    || !(self.regularizers.nce_temperature > 0.0)
                {
                    return bad("PatchNCE needs locations > 0 and temperature > 0".into());
                }
                if self.kind == ExperimentKind::SynthHaze {
                    if self.data.images < 2 * self.train.batch {
                        return bad(format!(
                            "{} images cannot fill two batches of {}",
                            self.data.images, self.train.batch
                        ));
                    }
                    if self.data.size < 16 || self.data.size % 4 != 0 {
                        return bad(format!(
                            "image size {} must be a multiple of 4 and at least 16",
                            self.data.size
                        ));
                    }
                    for (name, r) in [
                        ("light_range", self.data.light_range),
                        ("transmission_range", self.data.transmission_range),
                    ] {
                        if !(r[0] > 0.0 && r[0] <= r[1] && r[1] <= 1.0) {
                            return bad(format!(
                                "data.{name} must satisfy 0 < lo <= hi <= 1, got {r:?}"
                            ));
                        }
                    }
                } else if self.data.hazy_dir.is_none() || self.data.clear_dir.is_none() {
                    return bad(
                        "image-dir experiments need data.hazy_dir and data.clear_dir".into(),
                    );
                }
            }
        }
        Ok(())
    }
}
