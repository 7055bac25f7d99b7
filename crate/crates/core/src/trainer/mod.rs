//! Joint optimization of the backbone and the SOM prototypes.
//!
//! Every step draws the next batch of a seeded epoch permutation, records
//! the full objective, backpropagates, and applies one AdamW update to all
//! parameters. Temperature, γ and learning rate are pure functions of the
//! step index, so a run resumed from a checkpoint continues bit-exactly.

mod checkpoint;
mod classic;
mod config;
mod optim;

use std::path::{Path, PathBuf};

pub use checkpoint::Checkpoint;
pub use classic::{ClassicSom, ClassicSomConfig};
pub use config::{DataConfig, EvalConfig, ModelOverrides, ObjectiveConfig, OptimConfig, SomConfig, TrainConfig};
pub use optim::{cosine_lr, AdamW};

use crate::data::{Augmentation, BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{self, LogRow, MetricLog, MetricsRecord};
use crate::model::VitSom;
use crate::ndgrad::{Tape, Tensor};
use crate::objective::GammaSchedule;
use crate::som::TemperatureSchedule;
use crate::vit::Task;

/// Losses and schedule values of one completed step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// Index of the step (0-based) the schedules were evaluated at.
    pub step: u64,
    pub l_nn: f64,
    pub l_som: f64,
    pub l_total: f64,
    pub temperature: f64,
    pub gamma: f64,
    pub lr: f64,
}

impl StepStats {
    pub fn log_row(&self, eval: Option<MetricsRecord>) -> LogRow {
        LogRow {
            step: self.step,
            l_nn: self.l_nn,
            l_som: self.l_som,
            l_total: self.l_total,
            eval,
            temperature: self.temperature,
            gamma: self.gamma,
            lr: self.lr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: VitSom,
    optimizer: AdamW,
    step: u64,
    temperature: TemperatureSchedule,
    gamma: GammaSchedule,
    batches: BatchIterator,
    augmentation: Option<Augmentation>,
    plan: Option<(u64, Vec<Vec<usize>>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = VitSom::new(config.model_config()?, config.seed)?;
        let o = &config.optim;
        let optimizer = AdamW::new(model.store(), o.beta1, o.beta2, o.eps, o.weight_decay);
        Self::assemble(config, model, optimizer, 0)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
        let mut model = VitSom::new(ck.config.model_config()?, ck.config.seed)?;
        if model.store().len() != ck.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                ck.params.len(),
                model.store().len()
            )));
        }
        for p in ck.params.iter() {
            model.store_mut().load(&p.name, p.tensor.clone())?;
        }
        Self::assemble(ck.config, model, ck.optimizer, ck.step)
    }

    fn assemble(config: TrainConfig, model: VitSom, optimizer: AdamW, step: u64) -> Result<Self> {
        let temperature = config.temperature()?;
        let gamma = config.gamma()?;
        let batches = BatchIterator::new(config.optim.batch_size, config.seed, false)?;
        let augmentation = if config.data.augment {
            Augmentation::for_task(config.task, config.data.dataset)
        } else {
            None
        };
        Ok(Trainer {
            config,
            model,
            optimizer,
            step,
            temperature,
            gamma,
            batches,
            augmentation,
            plan: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &VitSom {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut VitSom {
        &mut self.model
    }

    /// Steps completed so far.
    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.optim.steps
    }

    pub fn lr(&self, k: u64) -> f64 {
        let o = &self.config.optim;
        cosine_lr(k, o.steps, o.lr, o.lr_min)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.model.store().clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    fn next_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        let per_epoch = self.batches.batches_per_epoch(n) as u64;
        let (epoch, pos) = (self.step / per_epoch, (self.step % per_epoch) as usize);
        if self.plan.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.plan = Some((epoch, self.batches.epoch(n, epoch)?));
        }
        Ok(self.plan.as_ref().expect("plan just set").1[pos].clone())
    }

    /// Runs one optimization step on the next batch of `train`.
    pub fn step(&mut self, train: &Dataset) -> Result<StepStats> {
        let k = self.step;
        let idx = self.next_indices(train.len())?;
        let batch = train.gather(&idx, self.augmentation.as_ref(), self.config.seed ^ k.rotate_left(17))?;
        let (t, gamma, lr) = (self.temperature.temperature(k), self.gamma.gamma(k), self.lr(k));

        let mut tape = Tape::new();
        let p = self.model.store().bind(&mut tape);
        let f = self
            .model
            .forward(&mut tape, &p, &batch.images, batch.labels.as_deref(), t, gamma)?;
        let (l_nn, l_som) = (tape.value(f.l_nn).item(), tape.value(f.l_som).item());
        let l_total = tape.value(f.l_total).item();
        if !l_total.is_finite() {
            crate::objective::total_loss(l_nn, l_som, k, &self.gamma)?;
            return Err(Error::Numeric(format!(
                "non-finite loss at step {k}: L_nn={l_nn} L_som={l_som} L_total={l_total}"
            )));
        }
        tape.backward(f.l_total)?;
        let grads: Vec<Vec<f64>> = p
            .vars()
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .expect("parameters are gradient leaves")
            })
            .collect();
        self.optimizer.step(self.model.store_mut(), &grads, lr)?;
        self.step += 1;
        Ok(StepStats {
            step: k,
            l_nn,
            l_som,
            l_total,
            temperature: t,
            gamma,
            lr,
        })
    }

    /// Test-split metrics; never touches the parameters.
    pub fn evaluate(&self, ds: &Dataset) -> Result<MetricsRecord> {
        evaluate(&self.model, ds, self.config.eval.batch_size)
    }
}

/// Metrics of `model` on `ds`: purity (when labelled), quantization and
/// topographic error for clustering; accuracy plus the same map diagnostics
/// for classification.
pub fn evaluate(model: &VitSom, ds: &Dataset, batch_size: usize) -> Result<MetricsRecord> {
    let vit = &model.config().vit;
    if ds.image_shape() != [vit.channels, vit.image_size, vit.image_size] {
        return Err(Error::Contract(format!(
            "model expects {}×{}×{} images, {} has {:?}",
            vit.channels,
            vit.image_size,
            vit.image_size,
            ds.kind,
            ds.image_shape()
        )));
    }
    if ds.is_empty() {
        return Err(Error::Contract("evaluation on an empty dataset".into()));
    }
    let grid = model.grid()?;
    let mut bmus = Vec::with_capacity(ds.len());
    let mut logits: Vec<f64> = Vec::new();
    let (mut qe_sum, mut te_sum) = (0.0, 0.0);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let batch = ds.gather(chunk, None, 0)?;
        let emb = model.embed(&batch.images)?;
        let d = grid.distances(&emb.z)?;
        let assigned = crate::som::find_bmu(&d)?;
        qe_sum += assigned.iter().enumerate().map(|(i, &u)| d.row(i)[u]).sum::<f64>();
        if grid.units() >= 2 {
            te_sum += metrics::topographic_error_from_distances(&d, grid.lattice())? * chunk.len() as f64;
        }
        bmus.extend(assigned);
        if let Some(l) = emb.logits {
            logits.extend(l.into_data());
        }
    }
    let n = ds.len() as f64;
    let mut rec = MetricsRecord {
        quantization_error: Some(qe_sum / n),
        topographic_error: (grid.units() >= 2).then_some(te_sum / n),
        ..Default::default()
    };
    match model.task() {
        Task::Clustering => {
            if let Some(labels) = ds.labels() {
                rec.purity = Some(metrics::purity(&bmus, labels)?);
            }
        }
        Task::Classification => {
            let labels = ds
                .labels()
                .ok_or_else(|| Error::Contract("classification evaluation needs labels".into()))?;
            let classes = logits.len() / ds.len();
            rec.accuracy = Some(metrics::accuracy(&Tensor::new(&[ds.len(), classes], logits)?, labels)?);
        }
    }
    Ok(rec)
}

/// Where [`train`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub log: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        RunPaths {
            log: dir.join("metrics.csv"),
            checkpoint: dir.join("checkpoint.bin"),
        }
    }
}

/// Result of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub final_metrics: MetricsRecord,
    pub history: Vec<LogRow>,
}

/// Trains until the configured step count, evaluating on `test` and
/// checkpointing every `eval.interval` steps and at the end. Every step is
/// logged; evaluation columns are filled on evaluation steps.
///
/// A non-finite loss aborts the run with a numeric error; the checkpoint on
/// disk is then the last one written from finite state.
pub fn train(
    mut trainer: Trainer,
    train_set: &Dataset,
    test: &Dataset,
    out: Option<&RunPaths>,
) -> Result<TrainOutcome> {
    let mut log = out.map(|p| MetricLog::create(&p.log)).transpose()?;
    let interval = trainer.config.eval.interval;
    let mut history = Vec::new();
    let mut final_metrics = None;
    while !trainer.is_done() {
        let stats = trainer.step(train_set)?;
        let done = trainer.step_index();
        let eval = if done.is_multiple_of(interval) || trainer.is_done() {
            let rec = trainer.evaluate(test)?;
            if let Some(paths) = out {
                trainer.checkpoint().save(&paths.checkpoint)?;
            }
            log::info!("step {done}: L_total {:.6} {:?}", stats.l_total, rec);
            final_metrics = Some(rec.clone());
            Some(rec)
        } else {
            None
        };
        let row = stats.log_row(eval);
        if let Some(log) = log.as_mut() {
            log.append(&row)?;
        }
        history.push(row);
    }
    let final_metrics = match final_metrics {
        Some(m) => m,
        None => trainer.evaluate(test)?,
    };
    Ok(TrainOutcome {
        trainer,
        final_metrics,
        history,
    })
}

#[cfg(test)]
mod tests;
