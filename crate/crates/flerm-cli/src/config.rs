//! Experiment configuration: one JSON file fully determines a run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use fslr::data::{self, Dataset};
use fslr::error::{Error, Result};
use fslr::estimator::EstimatorChoice;
use fslr::models::{Arch, ModelConfig};
use fslr::optim::{OptimHyper, OptimKind};
use fslr::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleAxis {
    Width,
    Depth,
    InitScale,
    WidthDepth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Standard,
    FlermSetOnce,
    FlermPeriodic,
    AblationUniformSplit,
    AblationUniformFlat,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::Standard => "standard",
            RunMode::FlermSetOnce => "flerm_set_once",
            RunMode::FlermPeriodic => "flerm_periodic",
            RunMode::AblationUniformSplit => "ablation_uniform_split",
            RunMode::AblationUniformFlat => "ablation_uniform_flat",
        }
    }

    pub fn needs_schedule_files(&self) -> bool {
        matches!(self, RunMode::FlermSetOnce | RunMode::FlermPeriodic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        n: usize,
        d: usize,
        classes: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Cifar10 {
        path: PathBuf,
    },
    CharFile {
        path: PathBuf,
        seq_len: usize,
    },
    CharSynthetic {
        len: usize,
        seq_len: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimKind,
    #[serde(default)]
    pub hyper: OptimHyper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub optimizer: OptimizerSpec,
    pub eta0_grid: Vec<f64>,
    pub scale_axis: ScaleAxis,
    /// The first multiplier is the base scale that schedules are recorded
    /// at and that summarize() measures shifts against.
    pub scale_multipliers: Vec<f64>,
    pub mode: RunMode,
    pub seeds: Vec<u64>,
    pub steps: u64,
    #[serde(default = "default_cadence")]
    pub cadence: u64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    /// EMA weight of the NEW sample (Algorithm-1 convention). A decay-rate
    /// of 0.9 in the usual sense corresponds to beta = 0.1 here.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub estimator: EstimatorChoice,
    #[serde(default)]
    pub schedule_dir: Option<PathBuf>,
}

fn default_cadence() -> u64 {
    100
}
fn default_warmup() -> u64 {
    40
}
fn default_beta() -> f64 {
    0.9
}
fn default_batch_size() -> usize {
    16
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Model config at one point of the scale axis.
    pub fn scaled_model(&self, mult: f64) -> Result<ModelConfig> {
        let mut cfg = self.model.clone();
        match self.scale_axis {
            ScaleAxis::Width => cfg.width_mult *= mult,
            ScaleAxis::Depth => cfg.depth_mult = int_mult(cfg.depth_mult, mult)?,
            ScaleAxis::InitScale => cfg.init_scale *= mult,
            ScaleAxis::WidthDepth => {
                cfg.width_mult *= mult;
                cfg.depth_mult = int_mult(cfg.depth_mult, mult)?;
            }
        }
        Ok(cfg)
    }

    /// Every problem with this config; an empty list means runnable.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.eta0_grid.is_empty() {
            problems.push("eta0_grid is empty".to_string());
        }
        for &eta in &self.eta0_grid {
            if !(eta > 0.0) || !eta.is_finite() {
                problems.push(format!("eta0 {eta} must be positive and finite"));
            }
        }
        if self.scale_multipliers.is_empty() {
            problems.push("scale_multipliers is empty".to_string());
        }
        if self.seeds.is_empty() {
            problems.push("seeds is empty".to_string());
        }
        if self.steps == 0 {
            problems.push("steps must be >= 1".to_string());
        }
        if self.cadence == 0 {
            problems.push("cadence must be >= 1".to_string());
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            problems.push(format!("beta {} must be in (0, 1]", self.beta));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if self.mode.needs_schedule_files() && self.schedule_dir.is_none() {
            problems.push(format!(
                "mode {} requires schedule_dir",
                self.mode.as_str()
            ));
        }
        for &mult in &self.scale_multipliers {
            match self.scaled_model(mult) {
                Ok(cfg) => {
                    if let Err(e) = cfg.scaled() {
                        problems.push(format!("scale multiplier {mult}: {e}"));
                    }
                }
                Err(e) => problems.push(format!("scale multiplier {mult}: {e}")),
            }
        }
        match (&self.dataset, self.model.arch) {
            (DatasetSpec::Synthetic { .. } | DatasetSpec::Cifar10 { .. }, Arch::ResMlp) => {}
            (DatasetSpec::CharFile { .. } | DatasetSpec::CharSynthetic { .. }, Arch::Transformer) => {}
            _ => problems.push("dataset kind does not match model architecture".to_string()),
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                n,
                d,
                classes,
                separation,
                ..
            } => {
                if *classes < 2 {
                    problems.push("synthetic dataset needs classes >= 2".to_string());
                }
                if classes > d {
                    problems.push(format!(
                        "synthetic dataset needs d >= classes, got d={d}, classes={classes}"
                    ));
                }
                if !(separation > &0.0) {
                    problems.push("synthetic dataset needs positive separation".to_string());
                }
                let probe = ((*n as f64) * data::PROBE_FRACTION).ceil() as usize;
                if probe < self.batch_size || n.saturating_sub(probe) < self.batch_size {
                    problems.push(format!(
                        "dataset size {n} too small for batch {} with a probe slice",
                        self.batch_size
                    ));
                }
            }
            DatasetSpec::CharSynthetic { len, seq_len, .. } => {
                if len <= seq_len {
                    problems.push("char corpus must be longer than seq_len".to_string());
                }
            }
            _ => {}
        }
        problems
    }

    /// Build the dataset; relative file paths resolve against
    /// `FLERM_DATA_ROOT` when set.
    pub fn build_dataset(&self) -> Result<Arc<Dataset>> {
        let resolve = |p: &PathBuf| -> PathBuf {
            if p.is_relative() {
                if let Ok(root) = std::env::var("FLERM_DATA_ROOT") {
                    return PathBuf::from(root).join(p);
                }
            }
            p.clone()
        };
        let ds = match &self.dataset {
            DatasetSpec::Synthetic {
                n,
                d,
                classes,
                separation,
                seed,
            } => data::synthetic_classification(
                &mut Rng::new(*seed).derive("dataset", 0),
                *n,
                *d,
                *classes,
                *separation,
            )?,
            DatasetSpec::Cifar10 { path } => data::load_cifar10_bin(&resolve(path))?,
            DatasetSpec::CharFile { path, seq_len } => {
                let bytes = std::fs::read(resolve(path))?;
                data::char_text(&bytes, *seq_len)?
            }
            DatasetSpec::CharSynthetic { len, seq_len, seed } => {
                let text = data::synthetic_text(&mut Rng::new(*seed).derive("corpus", 0), *len);
                data::char_text(&text, *seq_len)?
            }
        };
        Ok(Arc::new(ds))
    }

    /// Cell-level model config: scale applied and task dims bound to the
    /// dataset (input features, class count, vocabulary, sequence length).
    pub fn cell_model(&self, mult: f64, dataset: &Dataset) -> Result<ModelConfig> {
        let mut cfg = self.scaled_model(mult)?;
        match dataset {
            Dataset::Classification { classes, .. } => {
                cfg.input_dim = dataset.feature_dim().expect("dense dataset");
                cfg.num_classes = *classes;
            }
            Dataset::CharText { vocab, seq_len, .. } => {
                cfg.vocab = *vocab;
                cfg.num_classes = *vocab;
                cfg.max_seq = *seq_len;
            }
        }
        Ok(cfg)
    }
}

fn int_mult(base: usize, mult: f64) -> Result<usize> {
    let exact = base as f64 * mult;
    let rounded = exact.round();
    if (exact - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::Config(format!(
            "depth multiplier {mult} on base {base} is not a positive integer"
        )));
    }
    Ok(rounded as usize)
}
