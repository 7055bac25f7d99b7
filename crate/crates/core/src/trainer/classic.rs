use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRecord};
use crate::ndgrad::Tensor;
use crate::som::{classic_update, find_bmu, Metric, SomGrid, TemperatureSchedule, T_MIN};

/// Sequential Kohonen SOM on raw pixels, the reference baseline.
///
/// The learning rate decays exponentially from `alpha_start` to
/// `alpha_end` over all sample presentations; the neighborhood temperature
/// follows the same schedule as the joint model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicSomConfig {
    pub height: usize,
    pub width: usize,
    pub epochs: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub t_min: f64,
    pub seed: u64,
}

impl Default for ClassicSomConfig {
    fn default() -> Self {
        ClassicSomConfig {
            height: 24,
            width: 24,
            epochs: 10,
            alpha_start: 0.5,
            alpha_end: 0.01,
            t_min: T_MIN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassicSom {
    pub config: ClassicSomConfig,
    grid: SomGrid,
}

fn flatten(ds: &Dataset) -> Result<Tensor> {
    ds.images().clone().reshape(&[ds.len(), ds.image_len()])
}

impl ClassicSom {
    pub fn new(config: ClassicSomConfig, dim: usize) -> Result<Self> {
        if config.epochs == 0 || !(config.alpha_start > 0.0 && config.alpha_end > 0.0) {
            return Err(Error::Config(
                "classic SOM needs epochs >= 1 and positive learning rates".into(),
            ));
        }
        let grid = SomGrid::new(config.height, config.width, dim, Metric::Euclidean, config.seed)?;
        Ok(ClassicSom { config, grid })
    }

    pub fn grid(&self) -> &SomGrid {
        &self.grid
    }

    /// `height · width · dim` learnable values.
    pub fn param_count(&self) -> usize {
        self.grid.param_count()
    }

    /// Presents every training sample once per epoch, in a seeded order.
    pub fn fit(&mut self, train: &Dataset) -> Result<()> {
        let x = flatten(train)?;
        let n = train.len();
        let total = (n * self.config.epochs) as u64;
        let c = &self.config;
        let temp = TemperatureSchedule::new(c.height.max(c.width) as f64 / 2.0, c.t_min, total)?;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut k = 0u64;
        for _ in 0..c.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let frac = k as f64 / total as f64;
                let alpha = c.alpha_start * (c.alpha_end / c.alpha_start).powf(frac);
                classic_update(&mut self.grid, x.row(i), alpha, temp.temperature(k))?;
                k += 1;
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<MetricsRecord> {
        let x = flatten(ds)?;
        let d = self.grid.distances(&x)?;
        let bmus = find_bmu(&d)?;
        let qe = bmus.iter().enumerate().map(|(i, &u)| d.row(i)[u]).sum::<f64>() / ds.len() as f64;
        Ok(MetricsRecord {
            purity: ds.labels().map(|l| metrics::purity(&bmus, l)).transpose()?,
            accuracy: None,
            quantization_error: Some(qe),
            topographic_error: Some(metrics::topographic_error_from_distances(&d, self.grid.lattice())?),
        })
    }
}
