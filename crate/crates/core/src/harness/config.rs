use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotator::{AllocationMode, AllocationStrategy};
use crate::error::{Error, Result};
use crate::model::{Adam, LossMode, ModelConfig, Optimizer, Sgd, Sharing};

/// Everything an experiment depends on. Every artifact is a pure function of
/// this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub curve: CurveConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Scene side length in pixels.
    pub size: usize,
    pub train_count: usize,
    /// Held-out scenes used to synthesize stage-2 training tuples.
    pub interactive_count: usize,
    pub eval_count: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Extreme-point displacement along the region boundary, in pixels.
    pub extreme_jitter: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            size: 64,
            train_count: 200,
            interactive_count: 200,
            eval_count: 50,
            min_regions: 2,
            max_regions: 8,
            extreme_jitter: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossMode,
    pub sharing: Sharing,
    pub optimizer: OptimizerKind,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Fractions of the run after which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_at: Vec<f64>,
    pub lr_decay_factor: f64,
    /// Box margin as a fraction of the extreme-point span.
    pub box_margin: f64,
    /// Interactive rounds simulated with the stage-1 model per stage-2 scene.
    pub stage2_rounds: usize,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossMode::Pixelwise,
            sharing: Sharing::Shared,
            optimizer: OptimizerKind::Adam,
            stage1_steps: 1600,
            stage2_steps: 1600,
            batch_size: 1,
            learning_rate: 0.001,
            momentum: 0.9,
            grad_clip: Some(5.0),
            lr_decay_at: vec![0.75],
            lr_decay_factor: 0.1,
            box_margin: 0.0,
            stage2_rounds: 3,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> Box<dyn Optimizer<f32>> {
        match self.optimizer {
            OptimizerKind::Sgd => Box::new(Sgd::new(self.learning_rate, self.momentum, self.grad_clip)),
            OptimizerKind::Adam => Box::new(Adam::new(self.learning_rate, self.grad_clip)),
        }
    }

    /// Learning rate at `step` of a run of `total` steps.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let frac = step as f64 / total.max(1) as f64;
        let decays = self.lr_decay_at.iter().filter(|&&f| frac >= f).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveConfig {
    pub strategy: AllocationMode,
    pub rounds: usize,
    /// Free-mode scribbles per round; defaults to the region count.
    pub budget: Option<usize>,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig {
            strategy: AllocationMode::Free,
            rounds: 4,
            budget: None,
        }
    }
}

impl CurveConfig {
    pub fn strategy(&self) -> AllocationStrategy {
        AllocationStrategy {
            mode: self.strategy,
            budget: self.budget,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write PNG overlays of every eval prediction per round.
    pub overlays: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs"),
            overlays: false,
        }
    }
}

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            curve: CurveConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        if ![32, 64, 128].contains(&d.size) {
            return bad(format!("data.size must be 32, 64 or 128, got {}", d.size));
        }
        if d.train_count == 0 || d.eval_count == 0 {
            return bad("data.train_count and data.eval_count must be >= 1".into());
        }
        if d.min_regions < 2 || d.max_regions > 8 || d.min_regions > d.max_regions {
            return bad(format!(
                "region range {}..={} must lie within 2..=8",
                d.min_regions, d.max_regions
            ));
        }
        self.model.validate()?;
        if !d.size.is_multiple_of(self.model.reduction()) {
            return bad(format!("data.size {} not divisible by reduction {}", d.size, self.model.reduction()));
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad("train.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return bad("train.momentum must lie in [0, 1)".into());
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if t.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("train.grad_clip must be positive".into());
        }
        if !(t.lr_decay_factor > 0.0) || t.lr_decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("learning-rate decay settings out of range".into());
        }
        if !(0.0..=1.0).contains(&t.box_margin) {
            return bad("train.box_margin must lie in [0, 1]".into());
        }
        if self.curve.budget == Some(0) {
            return bad("curve.budget must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::new(5);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 3\n[train]\nloss = \"maskwise\"\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.loss, LossMode::Maskwise);
        assert_eq!(cfg.data, DataConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("seed = 1\n[train]\nlr = 0.1\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("seed = 1\n[data]\nsize = 50\n").is_err());
        assert!(ExperimentConfig::from_toml("seed = 1\n[data]\nmax_regions = 9\n").is_err());
        assert!(ExperimentConfig::from_toml("seed = 1\n[train]\nmomentum = 1.0\n").is_err());
    }

    #[test]
    fn learning_rate_schedule() {
        let t = TrainConfig {
            learning_rate: 1.0,
            lr_decay_at: vec![0.5, 0.75],
            lr_decay_factor: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(t.learning_rate_at(0, 100), 1.0);
        assert!((t.learning_rate_at(50, 100) - 0.1).abs() < 1e-12);
        assert!((t.learning_rate_at(99, 100) - 0.01).abs() < 1e-12);
    }
}
