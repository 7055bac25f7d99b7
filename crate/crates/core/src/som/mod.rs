//! Batch-compatible self-organizing map.
//!
//! A [`SomGrid`] is an `H×W` lattice of prototype vectors. Unit `index`
//! sits at `(index / W, index % W)`. Training goes through [`som_loss`],
//! which weights each sample's distance to every prototype by a Gaussian
//! of the lattice distance to that sample's best matching unit:
//!
//! ```text
//! L = (1/B) Σ_i Σ_j h(bmu_i, j; T) · d(z_i, p_j)
//! h(b, j; T) = exp(-‖rc(b) - rc(j)‖² / (2 T²))
//! ```
//!
//! The neighborhood weights and the BMU choice are constants of the step;
//! gradients reach `z` and the prototypes only through `d`.
//!
//! [`classic_update`] implements the sequential Kohonen rule and serves as
//! the reference the batch loss is checked against.

mod export;

pub use export::{read_raw, render_tiles, write_raw, PrototypeHeader};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::ndgrad::Metric;
use crate::ndgrad::{Tape, Tensor, Var};

/// Half-width of the uniform prototype initialisation.
pub const INIT_RANGE: f64 = 0.05;

/// Final neighborhood temperature.
pub const T_MIN: f64 = 0.001;

/// Rectangular lattice geometry, independent of any prototype values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub height: usize,
    pub width: usize,
}

impl Lattice {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("map size {height}x{width} must be positive")));
        }
        Ok(Lattice { height, width })
    }

    pub fn units(&self) -> usize {
        self.height * self.width
    }

    pub fn coords(&self, unit: usize) -> (usize, usize) {
        (unit / self.width, unit % self.width)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    fn check(&self, unit: usize) -> Result<()> {
        if unit >= self.units() {
            return Err(Error::Bounds {
                index: unit,
                len: self.units(),
            });
        }
        Ok(())
    }

    /// Squared Euclidean distance between two units' lattice coordinates.
    pub fn grid_distance_sq(&self, i: usize, j: usize) -> Result<f64> {
        self.check(i)?;
        self.check(j)?;
        Ok(self.grid_distance_sq_unchecked(i, j))
    }

    fn grid_distance_sq_unchecked(&self, i: usize, j: usize) -> f64 {
        let (ri, ci) = self.coords(i);
        let (rj, cj) = self.coords(j);
        let dr = ri as f64 - rj as f64;
        let dc = ci as f64 - cj as f64;
        dr * dr + dc * dc
    }

    /// Whether two distinct units touch in the 8-neighborhood.
    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        let (ri, ci) = self.coords(i);
        let (rj, cj) = self.coords(j);
        i != j && ri.abs_diff(rj) <= 1 && ci.abs_diff(cj) <= 1
    }

    /// Gaussian neighborhood of `bmu` at temperature `t`, one weight per unit.
    /// At `t == 0` this is the one-hot limit.
    pub fn neighborhood_weights(&self, bmu: usize, t: f64) -> Result<Vec<f64>> {
        self.check(bmu)?;
        Ok(self.neighborhood_unchecked(bmu, t))
    }

    fn neighborhood_unchecked(&self, bmu: usize, t: f64) -> Vec<f64> {
        let denom = 2.0 * t * t;
        (0..self.units())
            .map(|j| {
                if j == bmu {
                    1.0
                } else if denom > 0.0 {
                    (-self.grid_distance_sq_unchecked(j, bmu) / denom).exp()
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SomGrid {
    lattice: Lattice,
    metric: Metric,
    prototypes: Tensor,
}

impl SomGrid {
    /// A `height×width` map of `dim`-dimensional prototypes drawn uniformly
    /// from `[-INIT_RANGE, INIT_RANGE]`.
    pub fn new(height: usize, width: usize, dim: usize, metric: Metric, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = height * width;
        let data = (0..m * dim)
            .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        Self::from_prototypes(height, width, metric, Tensor::new(&[m, dim], data)?)
    }

    pub fn from_prototypes(height: usize, width: usize, metric: Metric, prototypes: Tensor) -> Result<Self> {
        let lattice = Lattice::new(height, width)?;
        if prototypes.rank() != 2 || prototypes.shape()[0] != height * width {
            return Err(Error::dim(format!(
                "prototypes {:?} do not fit a {height}x{width} map",
                prototypes.shape()
            )));
        }
        if prototypes.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite prototype component".into()));
        }
        Ok(SomGrid {
            lattice,
            metric,
            prototypes,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn height(&self) -> usize {
        self.lattice.height
    }

    pub fn width(&self) -> usize {
        self.lattice.width
    }

    pub fn units(&self) -> usize {
        self.lattice.units()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn prototypes_mut(&mut self) -> &mut Tensor {
        &mut self.prototypes
    }

    pub fn prototype(&self, unit: usize) -> &[f64] {
        self.prototypes.row(unit)
    }

    /// Number of learnable values, `M · dim`.
    pub fn param_count(&self) -> usize {
        self.prototypes.numel()
    }

    pub fn coords(&self, unit: usize) -> (usize, usize) {
        self.lattice.coords(unit)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        self.lattice.index(row, col)
    }

    pub fn grid_distance_sq(&self, i: usize, j: usize) -> Result<f64> {
        self.lattice.grid_distance_sq(i, j)
    }

    pub fn neighborhood_weights(&self, bmu: usize, t: f64) -> Result<Vec<f64>> {
        self.lattice.neighborhood_weights(bmu, t)
    }

    /// `[B×M]` distances between the rows of `z` and every prototype.
    pub fn distances(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let wv = tape.constant(self.prototypes.clone());
        let d = tape.pairwise_distance(zv, wv, self.metric)?;
        Ok(tape.value(d).clone())
    }

    /// Best matching unit of every row of `z`.
    pub fn bmus(&self, z: &Tensor) -> Result<Vec<usize>> {
        find_bmu(&self.distances(z)?)
    }
}

/// Exponential temperature decay from `t_max` at step 0 to `t_min` at step `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub t_max: f64,
    pub t_min: f64,
    pub total_steps: u64,
}

impl TemperatureSchedule {
    pub fn new(t_max: f64, t_min: f64, total_steps: u64) -> Result<Self> {
        if !(t_min > 0.0 && t_max >= t_min) || total_steps == 0 {
            return Err(Error::Config(format!(
                "temperature schedule needs t_max >= t_min > 0 and K >= 1 (got {t_max}, {t_min}, {total_steps})"
            )));
        }
        Ok(TemperatureSchedule {
            t_max,
            t_min,
            total_steps,
        })
    }

    /// Starts at half the map side (the larger one for rectangular maps) and
    /// ends at [`T_MIN`].
    pub fn for_map(height: usize, width: usize, total_steps: u64) -> Result<Self> {
        let t_max = (height.max(width) as f64 / 2.0).max(T_MIN);
        Self::new(t_max, T_MIN, total_steps)
    }

    /// `T(k) = t_max · (t_min / t_max)^(k/K)`; steps past `K` stay at `t_min`.
    pub fn temperature(&self, k: u64) -> f64 {
        if k == 0 {
            return self.t_max;
        }
        if k >= self.total_steps {
            return self.t_min;
        }
        let frac = k as f64 / self.total_steps as f64;
        self.t_max * (self.t_min / self.t_max).powf(frac)
    }
}

/// Per-row argmin of a `[B×M]` distance matrix; ties go to the lowest index.
pub fn find_bmu(distances: &Tensor) -> Result<Vec<usize>> {
    if distances.rank() != 2 {
        return Err(Error::dim(format!(
            "find_bmu expects [B, M], got {:?}",
            distances.shape()
        )));
    }
    let m = distances.shape()[1];
    if m == 0 {
        return Err(Error::dim("find_bmu over zero units"));
    }
    distances
        .data()
        .chunks(m)
        .enumerate()
        .map(|(i, row)| {
            let mut best = 0;
            for (j, &d) in row.iter().enumerate() {
                if d.is_nan() {
                    return Err(Error::Numeric(format!("NaN distance for sample {i} (unit {j})")));
                }
                if d < row[best] {
                    best = j;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Output of [`som_loss`]: the loss node plus the step's BMU choices.
#[derive(Debug)]
pub struct SomLoss {
    pub loss: Var,
    pub distances: Var,
    pub bmus: Vec<usize>,
}

/// Records the batch SOM loss for latent rows `z: [B×dim]` against the
/// prototype node `prototypes: [M×dim]` at neighborhood temperature `t`.
pub fn som_loss(
    tape: &mut Tape,
    lattice: &Lattice,
    metric: Metric,
    z: Var,
    prototypes: Var,
    t: f64,
) -> Result<SomLoss> {
    let b = tape.shape(z).first().copied().unwrap_or(0);
    if b == 0 {
        return Err(Error::Contract("som_loss of an empty batch".into()));
    }
    if tape.shape(prototypes).first() != Some(&lattice.units()) {
        return Err(Error::dim(format!(
            "prototypes {:?} do not fit a {}x{} map",
            tape.shape(prototypes),
            lattice.height,
            lattice.width
        )));
    }
    let distances = tape.pairwise_distance(z, prototypes, metric)?;
    let bmus = find_bmu(tape.value(distances))?;
    let m = lattice.units();
    let mut weights = Vec::with_capacity(b * m);
    for &bmu in &bmus {
        weights.extend(lattice.neighborhood_unchecked(bmu, t));
    }
    let weights = tape.constant(Tensor::new(&[b, m], weights)?);
    let weighted = tape.mul(weights, distances)?;
    let total = tape.sum(weighted);
    let loss = tape.scale(total, 1.0 / b as f64);
    Ok(SomLoss { loss, distances, bmus })
}

/// Sum and per-sample mean of the distance from each row of `z` to its
/// best matching prototype.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantization {
    pub total: f64,
    pub mean: f64,
}

pub fn quantization_objective(z: &Tensor, grid: &SomGrid) -> Result<Quantization> {
    let b = z.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(Error::Contract("quantization objective of an empty batch".into()));
    }
    let d = grid.distances(z)?;
    let bmus = find_bmu(&d)?;
    let total: f64 = bmus.iter().enumerate().map(|(i, &j)| d.row(i)[j]).sum();
    Ok(Quantization {
        total,
        mean: total / b as f64,
    })
}

/// One sequential Kohonen step for a single sample under the Euclidean
/// metric: `p_j ← p_j + α · h_j · (z − p_j)`. Returns the BMU.
pub fn classic_update(grid: &mut SomGrid, z: &[f64], alpha: f64, t: f64) -> Result<usize> {
    if grid.metric() != Metric::Euclidean {
        return Err(Error::Contract(
            "classic_update is defined for the euclidean metric".into(),
        ));
    }
    let dim = grid.dim();
    if z.len() != dim {
        return Err(Error::dim(format!(
            "sample of length {} for {dim}-d prototypes",
            z.len()
        )));
    }
    let bmu = nearest_euclidean(grid.prototypes.data(), dim, z);
    let h = grid.lattice.neighborhood_unchecked(bmu, t);
    for (p, hj) in grid.prototypes.data_mut().chunks_mut(dim).zip(h) {
        let step = alpha * hj;
        if step == 0.0 {
            continue;
        }
        for (pk, zk) in p.iter_mut().zip(z) {
            *pk += step * (zk - *pk);
        }
    }
    Ok(bmu)
}

fn nearest_euclidean(prototypes: &[f64], dim: usize, z: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, p) in prototypes.chunks(dim).enumerate() {
        let d: f64 = p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}
