//! Evaluation metrics and the CSV metric log.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::som::{Lattice, SomGrid};

/// Per-sample cluster ids (BMU units) paired with true labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    units: Vec<usize>,
    labels: Vec<usize>,
}

impl ClusterAssignment {
    pub fn new(units: Vec<usize>, labels: Vec<usize>, num_units: usize) -> Result<Self> {
        if units.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} assignments for {} labels",
                units.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = units.iter().find(|&&u| u >= num_units) {
            return Err(Error::Bounds {
                index: bad,
                len: num_units,
            });
        }
        Ok(ClusterAssignment { units, labels })
    }

    pub fn units(&self) -> &[usize] {
        &self.units
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn purity(&self) -> Result<f64> {
        purity(&self.units, &self.labels)
    }
}

/// Share of samples carrying the majority label of their cluster.
pub fn purity(clusters: &[usize], labels: &[usize]) -> Result<f64> {
    if clusters.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} cluster ids for {} labels",
            clusters.len(),
            labels.len()
        )));
    }
    if clusters.is_empty() {
        return Err(Error::Contract("purity of an empty assignment".into()));
    }
    let mut counts: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&c, &l) in clusters.iter().zip(labels) {
        *counts.entry(c).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = counts
        .values()
        .map(|per| per.values().max().copied().unwrap_or(0))
        .sum();
    Ok(majority as f64 / clusters.len() as f64)
}

/// Indices of the smallest and second-smallest entries of `row`, ties to
/// the lower index.
fn top_two(row: &[f64]) -> (usize, usize) {
    let (mut first, mut second) = (0, usize::MAX);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v < row[first] {
            second = first;
            first = j;
        } else if second == usize::MAX || v < row[second] {
            second = j;
        }
    }
    (first, second)
}

/// Fraction of rows of a `[B, M]` distance matrix whose two nearest units
/// are not 8-neighbors on `lattice`.
pub fn topographic_error_from_distances(distances: &Tensor, lattice: &Lattice) -> Result<f64> {
    let m = lattice.units();
    if m < 2 {
        return Err(Error::Contract("topographic error needs at least two units".into()));
    }
    if distances.rank() != 2 || distances.shape()[1] != m {
        return Err(Error::dim(format!(
            "distances {:?} do not match a map of {m} units",
            distances.shape()
        )));
    }
    let b = distances.shape()[0];
    if b == 0 {
        return Err(Error::Contract("topographic error of an empty batch".into()));
    }
    let mut errors = 0usize;
    for i in 0..b {
        let row = distances.row(i);
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("NaN distance for sample {i}")));
        }
        let (first, second) = top_two(row);
        if !lattice.adjacent(first, second) {
            errors += 1;
        }
    }
    Ok(errors as f64 / b as f64)
}

pub fn topographic_error(z: &Tensor, grid: &SomGrid) -> Result<f64> {
    topographic_error_from_distances(&grid.distances(z)?, grid.lattice())
}

/// Mean distance from each row of `z` to its best matching unit.
pub fn quantization_error(z: &Tensor, grid: &SomGrid) -> Result<f64> {
    Ok(crate::som::quantization_objective(z, grid)?.mean)
}

/// Argmax of each row, ties to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    if logits.rank() != 2 || logits.shape()[1] == 0 {
        return Err(Error::dim(format!("expected [B, C] logits, got {:?}", logits.shape())));
    }
    Ok((0..logits.shape()[0])
        .map(|i| {
            let row = logits.row(i);
            (1..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect())
}

/// Share of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = argmax_rows(logits)?;
    if pred.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} logit rows for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("accuracy of an empty batch".into()));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Evaluation results; fields not applicable to the task are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub purity: Option<f64>,
    pub accuracy: Option<f64>,
    pub quantization_error: Option<f64>,
    pub topographic_error: Option<f64>,
}

/// One line of the metric log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub l_nn: f64,
    pub l_som: f64,
    pub l_total: f64,
    pub eval: Option<MetricsRecord>,
    pub temperature: f64,
    pub gamma: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str =
    "step,l_nn,l_som,l_total,purity,accuracy,quantization_error,topographic_error,temperature,gamma,lr";

impl LogRow {
    /// CSV encoding; floats use the shortest round-tripping representation
    /// and missing evaluation values are left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let e = self.eval.clone().unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.l_nn,
            self.l_som,
            self.l_total,
            opt(e.purity),
            opt(e.accuracy),
            opt(e.quantization_error),
            opt(e.topographic_error),
            self.temperature,
            self.gamma,
            self.lr
        )
    }
}

/// Appends [`LogRow`]s to a CSV file, writing the header once.
pub struct MetricLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = MetricLog {
            path: path.to_owned(),
            out: BufWriter::new(file),
        };
        log.line(LOG_HEADER)?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, row: &LogRow) -> Result<()> {
        self.line(&row.to_csv())?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::som::Metric;

    #[test]
    fn purity_examples() {
        assert_eq!(purity(&[0, 0, 1, 1], &[3, 3, 7, 7]).unwrap(), 1.0);
        assert_eq!(purity(&[4, 4, 4, 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        // A: [0, 0, 1], B: [1, 1]
        assert_eq!(purity(&[0, 0, 0, 1, 1], &[0, 0, 1, 1, 1]).unwrap(), 0.8);
        assert!(matches!(purity(&[0], &[0, 1]), Err(Error::Contract(_))));
        assert!(matches!(purity(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn purity_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let n = rng.random_range(1..60);
            let c: Vec<usize> = (0..n).map(|_| rng.random_range(0..8)).collect();
            let l: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let p = purity(&c, &l).unwrap();
            // relabeling cluster ids
            let relabeled: Vec<usize> = c.iter().map(|&u| (u * 5 + 3) % 8).collect();
            assert_eq!(purity(&relabeled, &l).unwrap(), p);
            assert!((0.0..=1.0).contains(&p));
            let singletons: Vec<usize> = (0..n).collect();
            assert_eq!(purity(&singletons, &l).unwrap(), 1.0);
        }
    }

    #[test]
    fn assignment_validation() {
        assert!(ClusterAssignment::new(vec![0, 3], vec![1, 1], 3).is_err());
        assert!(ClusterAssignment::new(vec![0], vec![1, 1], 3).is_err());
        let a = ClusterAssignment::new(vec![0, 2], vec![1, 1], 3).unwrap();
        assert_eq!(a.purity().unwrap(), 1.0);
    }

    fn brute_te(d: &Tensor, lattice: &Lattice) -> f64 {
        let b = d.shape()[0];
        let mut bad = 0;
        for i in 0..b {
            let row = d.row(i);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &c| row[a].partial_cmp(&row[c]).unwrap().then(a.cmp(&c)));
            let ((r1, c1), (r2, c2)) = (lattice.coords(order[0]), lattice.coords(order[1]));
            if r1.abs_diff(r2).max(c1.abs_diff(c2)) > 1 {
                bad += 1;
            }
        }
        bad as f64 / b as f64
    }

    #[test]
    fn topographic_error_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let lattice = Lattice::new(rng.random_range(1..6), rng.random_range(2..6)).unwrap();
            let b = rng.random_range(1..20);
            // coarse values make ties common
            let d = Tensor::new(
                &[b, lattice.units()],
                (0..b * lattice.units())
                    .map(|_| rng.random_range(0..4) as f64)
                    .collect(),
            )
            .unwrap();
            assert_eq!(
                topographic_error_from_distances(&d, &lattice).unwrap(),
                brute_te(&d, &lattice)
            );
        }
    }

    #[test]
    fn topographic_error_examples() {
        let two = Lattice::new(2, 1).unwrap();
        let d = Tensor::from_rows(&[&[0.3, 0.1], &[0.9, 0.2]]);
        assert_eq!(topographic_error_from_distances(&d, &two).unwrap(), 0.0);
        let one = Lattice::new(1, 1).unwrap();
        assert!(matches!(
            topographic_error_from_distances(&Tensor::zeros(&[1, 1]), &one),
            Err(Error::Contract(_))
        ));
        let line = Lattice::new(1, 3).unwrap();
        let d = Tensor::from_rows(&[&[0.0, 5.0, 0.1], &[0.0, 0.1, 5.0]]);
        assert_eq!(topographic_error_from_distances(&d, &line).unwrap(), 0.5);

        let grid = SomGrid::new(3, 3, 4, Metric::Euclidean, 0).unwrap();
        let z = Tensor::new(&[1, 4], grid.prototype(4).to_vec()).unwrap();
        assert_eq!(topographic_error(&z, &grid).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_examples() {
        let onehot = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert_eq!(accuracy(&onehot, &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&onehot, &[1, 2, 0]).unwrap(), 0.0);
        let tied = Tensor::from_rows(&[&[2.0, 2.0, 1.0]]);
        assert_eq!(argmax_rows(&tied).unwrap(), vec![0]);
        assert!(matches!(accuracy(&onehot, &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn accuracy_invariant_under_positive_affine_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::new(&[50, 7], (0..350).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..7)).collect();
        let moved = Tensor::new(&[50, 7], logits.data().iter().map(|v| 2.5 * v - 4.0).collect()).unwrap();
        assert_eq!(accuracy(&logits, &labels).unwrap(), accuracy(&moved, &labels).unwrap());
    }

    #[test]
    fn random_logits_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let logits = Tensor::new(&[n, 10], (0..n * 10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let acc = accuracy(&logits, &labels).unwrap();
        assert!((acc - 0.10).abs() <= 0.01, "{acc}");
    }

    #[test]
    fn csv_rows() {
        let row = LogRow {
            step: 3,
            l_nn: 0.5,
            l_som: 1.25,
            l_total: 0.5,
            eval: Some(MetricsRecord {
                purity: Some(0.75),
                ..Default::default()
            }),
            temperature: 12.0,
            gamma: 0.0,
            lr: 0.01,
        };
        assert_eq!(row.to_csv(), "3,0.5,1.25,0.5,0.75,,,,12,0,0.01");
        assert_eq!(LOG_HEADER.split(',').count(), row.to_csv().split(',').count());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut log = MetricLog::create(&path).unwrap();
        log.append(&row).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{LOG_HEADER}\n{}\n", row.to_csv()));
    }
}
