use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::{default_gamma, GammaSchedule, WARMUP_FRACTION};
use crate::som::{Metric, TemperatureSchedule, T_MIN};
use crate::vit::{Task, VitConfig};

/// Everything a training run depends on. Sections mirror the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub som: SomConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Directory holding the dataset files; the command line and
    /// `VITSOM_DATA_ROOT` take over when absent.
    pub root: Option<PathBuf>,
    /// Use only the first `n` training samples.
    pub train_samples: Option<usize>,
    pub test_samples: Option<usize>,
    /// Crop/flip augmentation for classification training.
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::Mnist,
            root: None,
            train_samples: None,
            test_samples: None,
            augment: true,
        }
    }
}

/// Optional changes to the task's standard backbone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub patch_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub mlp_dim: Option<usize>,
    pub encoder_depth: Option<usize>,
    pub decoder_depth: Option<usize>,
    pub num_heads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SomConfig {
    pub height: usize,
    pub width: usize,
    pub metric: Metric,
    /// Defaults to half the larger map side.
    pub t_max: Option<f64>,
    pub t_min: f64,
}

impl Default for SomConfig {
    fn default() -> Self {
        SomConfig {
            height: 24,
            width: 24,
            metric: Metric::Cosine,
            t_max: None,
            t_min: T_MIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Total optimizer steps; also the horizon of every schedule.
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            steps: 1000,
            batch_size: 64,
            lr: 0.01,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Final SOM-loss weight; the task default when absent.
    pub gamma: Option<f64>,
    pub warmup_fraction: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            gamma: None,
            warmup_fraction: WARMUP_FRACTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate and checkpoint every `interval` steps (and at the end).
    pub interval: u64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            interval: 500,
            batch_size: 250,
        }
    }
}

impl TrainConfig {
    /// Standard settings for `task` on `dataset`.
    pub fn new(task: Task, dataset: DatasetKind) -> Self {
        TrainConfig {
            task,
            seed: 0,
            data: DataConfig {
                dataset,
                ..DataConfig::default()
            },
            model: ModelOverrides::default(),
            som: SomConfig::default(),
            optim: OptimConfig::default(),
            objective: ObjectiveConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if o.steps == 0 || o.batch_size == 0 {
            return fail("optim.steps and optim.batch_size must be positive");
        }
        if !(o.lr > 0.0 && o.lr_min >= 0.0 && o.lr_min <= o.lr) {
            return fail("learning rates must satisfy 0 <= optim.lr_min <= optim.lr, optim.lr > 0");
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return fail("optim.beta1 and optim.beta2 must lie in [0, 1)");
        }
        if !(o.eps > 0.0 && o.weight_decay >= 0.0) {
            return fail("optim.eps must be positive and optim.weight_decay non-negative");
        }
        if self.eval.interval == 0 || self.eval.batch_size == 0 {
            return fail("eval.interval and eval.batch_size must be positive");
        }
        if matches!(self.data.train_samples, Some(0)) || matches!(self.data.test_samples, Some(0)) {
            return fail("data sample limits must be positive");
        }
        self.model_config()?.validate()?;
        self.temperature()?;
        self.gamma()?;
        Ok(())
    }

    pub fn vit_config(&self) -> VitConfig {
        let kind = self.data.dataset;
        let mut v = match self.task {
            Task::Clustering => VitConfig::clustering(kind.image_size(), kind.channels()),
            Task::Classification => VitConfig::classification(kind.image_size(), kind.channels(), kind.num_classes()),
        };
        let m = &self.model;
        v.patch_size = m.patch_size.unwrap_or(v.patch_size);
        v.embed_dim = m.embed_dim.unwrap_or(v.embed_dim);
        v.mlp_dim = m.mlp_dim.unwrap_or(v.mlp_dim);
        v.encoder_depth = m.encoder_depth.unwrap_or(v.encoder_depth);
        v.decoder_depth = m.decoder_depth.unwrap_or(v.decoder_depth);
        v.num_heads = m.num_heads.unwrap_or(v.num_heads);
        v
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vit: self.vit_config(),
            map_height: self.som.height,
            map_width: self.som.width,
            metric: self.som.metric,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn temperature(&self) -> Result<TemperatureSchedule> {
        let t_max = self
            .som
            .t_max
            .unwrap_or(self.som.height.max(self.som.width) as f64 / 2.0);
        TemperatureSchedule::new(t_max, self.som.t_min, self.optim.steps)
    }

    pub fn gamma(&self) -> Result<GammaSchedule> {
        let g = self.objective.gamma.unwrap_or_else(|| default_gamma(self.task));
        GammaSchedule::with_fraction(g, self.objective.warmup_fraction, self.optim.steps)
    }
}
