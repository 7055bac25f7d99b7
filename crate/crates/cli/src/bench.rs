//! Batched versus per-sample BMU search.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vit_som::ndgrad::{Metric, Tensor};
use vit_som::som::{find_bmu, SomGrid};
use vit_som::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub batch: usize,
    pub metric: String,
    pub repeats: usize,
    pub batched_secs: f64,
    pub sequential_secs: f64,
    pub speedup: f64,
    pub samples_per_sec_batched: f64,
    pub samples_per_sec_sequential: f64,
    /// Samples whose two searches picked different units.
    pub mismatches: usize,
}

fn distance(metric: Metric, z: &[f64], w: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => z.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum(),
        Metric::Manhattan => z.iter().zip(w).map(|(a, b)| (a - b).abs()).sum(),
        Metric::Cosine => {
            let dot: f64 = z.iter().zip(w).map(|(a, b)| a * b).sum();
            let nz = z.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nw = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nz * nw > 0.0 {
                1.0 - (dot / (nz * nw)).clamp(-1.0, 1.0)
            } else {
                1.0
            }
        }
    }
}

/// One sample at a time, one unit at a time; the first minimum wins.
pub fn sequential_bmus(grid: &SomGrid, z: &Tensor) -> Vec<usize> {
    (0..z.shape()[0])
        .map(|i| {
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for u in 0..grid.units() {
                let d = distance(grid.metric(), z.row(i), grid.prototype(u));
                if d < best_d {
                    best = u;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

pub fn run(
    height: usize,
    width: usize,
    dim: usize,
    batch: usize,
    metric: Metric,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if dim == 0 || batch == 0 || repeats == 0 {
        return Err(Error::Config("bench-bmu needs positive dim, batch and repeats".into()));
    }
    let grid = SomGrid::new(height, width, dim, metric, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let z = Tensor::new(
        &[batch, dim],
        (0..batch * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;

    let start = Instant::now();
    let mut batched = Vec::new();
    for _ in 0..repeats {
        batched = find_bmu(&grid.distances(&z)?)?;
    }
    let batched_secs = start.elapsed().as_secs_f64() / repeats as f64;

    let start = Instant::now();
    let mut sequential = Vec::new();
    for _ in 0..repeats {
        sequential = sequential_bmus(&grid, &z);
    }
    let sequential_secs = start.elapsed().as_secs_f64() / repeats as f64;

    // Rounding differs between the two routes, so a disagreement only counts
    // when the units are not tied to within 1e-12.
    let mismatches = batched
        .iter()
        .zip(&sequential)
        .enumerate()
        .filter(|&(i, (&a, &b))| {
            a != b && {
                let da = distance(metric, z.row(i), grid.prototype(a));
                let db = distance(metric, z.row(i), grid.prototype(b));
                (da - db).abs() > 1e-12
            }
        })
        .count();
    Ok(BenchReport {
        height,
        width,
        dim,
        batch,
        metric: metric.to_string(),
        repeats,
        batched_secs,
        sequential_secs,
        speedup: sequential_secs / batched_secs,
        samples_per_sec_batched: batch as f64 / batched_secs,
        samples_per_sec_sequential: batch as f64 / sequential_secs,
        mismatches,
    })
}
