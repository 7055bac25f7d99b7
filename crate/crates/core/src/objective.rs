//! The training objective: task loss plus the γ-weighted SOM loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::vit::Task;

/// Final SOM-loss weight for the clustering task.
pub const GAMMA_CLUSTERING: f64 = 0.005;
/// Final SOM-loss weight for the classification task.
pub const GAMMA_CLASSIFICATION: f64 = 0.01;
/// Share of the run spent ramping γ up from zero.
pub const WARMUP_FRACTION: f64 = 0.1;

pub fn default_gamma(task: Task) -> f64 {
    match task {
        Task::Clustering => GAMMA_CLUSTERING,
        Task::Classification => GAMMA_CLASSIFICATION,
    }
}

/// Linear warmup of γ from 0 to `gamma_final` over `warmup_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSchedule {
    pub gamma_final: f64,
    pub warmup_steps: u64,
}

impl GammaSchedule {
    pub fn new(gamma_final: f64, warmup_steps: u64) -> Result<Self> {
        if !(gamma_final >= 0.0) || !gamma_final.is_finite() {
            return Err(Error::Config(format!(
                "gamma must be a finite value >= 0, got {gamma_final}"
            )));
        }
        Ok(GammaSchedule {
            gamma_final,
            warmup_steps,
        })
    }

    /// Warmup length as a fraction of `total_steps`, rounded to the nearest step.
    pub fn with_fraction(gamma_final: f64, fraction: f64, total_steps: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("warmup fraction {fraction} outside [0, 1]")));
        }
        Self::new(gamma_final, (fraction * total_steps as f64).round() as u64)
    }

    pub fn gamma(&self, step: u64) -> f64 {
        if step >= self.warmup_steps {
            self.gamma_final
        } else {
            self.gamma_final * step as f64 / self.warmup_steps as f64
        }
    }
}

/// `l_nn + γ(step) · l_som` on plain numbers.
pub fn total_loss(l_nn: f64, l_som: f64, step: u64, schedule: &GammaSchedule) -> Result<f64> {
    for (name, v) in [("L_nn", l_nn), ("L_som", l_som)] {
        if v.is_nan() {
            return Err(Error::Numeric(format!("{name} is NaN")));
        }
    }
    Ok(l_nn + schedule.gamma(step) * l_som)
}

/// Records `l_nn + gamma · l_som` on the tape.
pub fn combine(tape: &mut Tape, l_nn: Var, l_som: Var, gamma: f64) -> Result<Var> {
    let weighted = tape.scale(l_som, gamma);
    tape.add(l_nn, weighted)
}

/// What the task loss compares the model output against.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    /// Original images for reconstruction.
    Images(&'a Tensor),
    /// Class indices for classification.
    Labels(&'a [usize]),
}

/// Pixel MSE for clustering, mean cross-entropy for classification.
pub fn task_loss(tape: &mut Tape, output: Var, targets: Targets<'_>, task: Task) -> Result<Var> {
    match (task, targets) {
        (Task::Clustering, Targets::Images(x)) => {
            let target = tape.constant(x.clone());
            tape.mse(output, target)
        }
        (Task::Classification, Targets::Labels(y)) => tape.cross_entropy(output, y),
        (task, _) => Err(Error::Contract(format!("targets do not match the {task} task"))),
    }
}
