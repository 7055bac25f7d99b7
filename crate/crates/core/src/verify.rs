//! Runtime oracle suites: each library routine is compared against an
//! independent slow computation (finite differences, exhaustive scans,
//! the sequential SOM rule, closed-form schedule values).

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VitSom};
use crate::ndgrad::check::check_gradients;
use crate::ndgrad::{Metric, Tape, Tensor, Var};
use crate::objective::GammaSchedule;
use crate::som::{classic_update, find_bmu, som_loss, Lattice, SomGrid, TemperatureSchedule};
use crate::trainer::cosine_lr;
use crate::vit::{Task, VitConfig};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;
pub const SCHEDULE_TOLERANCE: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Gradients,
    Bmu,
    Equivalence,
    Schedules,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Gradients, Suite::Bmu, Suite::Equivalence, Suite::Schedules];

    /// Suites selected by a `--suite` argument: a suite name, `som` for the
    /// map suites, or `all`.
    pub fn select(name: &str) -> Result<Vec<Suite>> {
        match name {
            "all" => Ok(Suite::ALL.to_vec()),
            "som" => Ok(vec![Suite::Bmu, Suite::Equivalence]),
            other => Ok(vec![other.parse()?]),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Suite::Gradients => "gradients",
            Suite::Bmu => "bmu",
            Suite::Equivalence => "equivalence",
            Suite::Schedules => "schedules",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(Suite::Gradients),
            "bmu" => Ok(Suite::Bmu),
            "equivalence" => Ok(Suite::Equivalence),
            "schedules" => Ok(Suite::Schedules),
            other => Err(Error::Config(format!(
                "unknown suite `{other}` (expected all, som, gradients, bmu, equivalence or schedules)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Multiplies every tolerance; 0 turns any nonzero deviation into a
    /// failure, which is how the failure path is exercised.
    pub tolerance_factor: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            tolerance_factor: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: usize,
    /// Largest deviation seen, in the suite's own units.
    pub worst: f64,
    pub tolerance: f64,
    /// Description of the first failing case, with its inputs.
    pub failure: Option<String>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

struct Tally {
    cases: usize,
    worst: f64,
    tolerance: f64,
    failure: Option<String>,
}

impl Tally {
    fn new(tolerance: f64) -> Self {
        Tally {
            cases: 0,
            worst: 0.0,
            tolerance,
            failure: None,
        }
    }

    /// Records one case; `describe` is only called for the first failure.
    fn record(&mut self, deviation: f64, describe: impl FnOnce() -> String) {
        self.cases += 1;
        self.worst = self.worst.max(deviation);
        if self.failure.is_none() && !(deviation <= self.tolerance) {
            self.failure = Some(describe());
        }
    }

    fn exact(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.record(if ok { 0.0 } else { f64::INFINITY }, describe);
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let tally = match suite {
        Suite::Gradients => gradients(opts)?,
        Suite::Bmu => bmu(opts)?,
        Suite::Equivalence => equivalence(opts)?,
        Suite::Schedules => schedules(opts)?,
    };
    Ok(SuiteReport {
        suite,
        cases: tally.cases,
        worst: tally.worst,
        tolerance: tally.tolerance,
        failure: tally.failure,
        elapsed: start.elapsed(),
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// `Σ out ⊙ r` for a fixed random `r`, turning any output into a scalar
/// whose gradient exercises every output coordinate.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(&mut rng, tape.shape(out), -1.0, 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Per-operation cases: name, input shapes, builder.
#[allow(clippy::vec_init_then_push)]
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    let mut v: Vec<(&'static str, Vec<Vec<usize>>, Builder)> = Vec::new();
    v.push((
        "matmul",
        vec![vec![3, 4], vec![4, 2]],
        Box::new(|t, x| t.matmul(x[0], x[1])),
    ));
    v.push((
        "batch_matmul",
        vec![vec![2, 3, 4], vec![2, 4, 3]],
        Box::new(|t, x| t.batch_matmul(x[0], x[1], false)),
    ));
    v.push((
        "batch_matmul_t",
        vec![vec![2, 3, 4], vec![2, 5, 4]],
        Box::new(|t, x| t.batch_matmul(x[0], x[1], true)),
    ));
    v.push(("add", vec![vec![3, 4], vec![3, 4]], Box::new(|t, x| t.add(x[0], x[1]))));
    v.push(("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|t, x| t.sub(x[0], x[1]))));
    v.push(("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t, x| t.mul(x[0], x[1]))));
    v.push((
        "add_broadcast",
        vec![vec![2, 3, 4], vec![3, 4]],
        Box::new(|t, x| t.add_broadcast(x[0], x[1])),
    ));
    v.push(("scale", vec![vec![5]], Box::new(|t, x| Ok(t.scale(x[0], -1.7)))));
    v.push(("sum", vec![vec![2, 3]], Box::new(|t, x| Ok(t.sum(x[0])))));
    v.push(("mean", vec![vec![2, 3]], Box::new(|t, x| Ok(t.mean(x[0])))));
    v.push(("gelu", vec![vec![4, 3]], Box::new(|t, x| Ok(t.gelu(x[0])))));
    v.push(("reshape", vec![vec![2, 6]], Box::new(|t, x| t.reshape(x[0], &[3, 4]))));
    v.push((
        "permute",
        vec![vec![2, 3, 4]],
        Box::new(|t, x| t.permute(x[0], &[2, 0, 1])),
    ));
    v.push((
        "concat",
        vec![vec![2, 1, 3], vec![2, 2, 3]],
        Box::new(|t, x| t.concat(&[x[0], x[1]], 1)),
    ));
    v.push(("slice", vec![vec![2, 5, 3]], Box::new(|t, x| t.slice(x[0], 1, 1, 3))));
    v.push(("expand", vec![vec![2, 3]], Box::new(|t, x| Ok(t.expand(x[0], 4)))));
    v.push(("softmax", vec![vec![3, 5]], Box::new(|t, x| t.softmax(x[0], 1))));
    v.push(("softmax_axis0", vec![vec![3, 5]], Box::new(|t, x| t.softmax(x[0], 0))));
    v.push((
        "layer_norm",
        vec![vec![4, 6], vec![6], vec![6]],
        Box::new(|t, x| t.layer_norm(x[0], x[1], x[2], 1e-6)),
    ));
    v.push((
        "cross_entropy",
        vec![vec![4, 5]],
        Box::new(|t, x| t.cross_entropy(x[0], &[0, 4, 2, 2])),
    ));
    v.push(("mse", vec![vec![3, 4], vec![3, 4]], Box::new(|t, x| t.mse(x[0], x[1]))));
    for (name, metric) in [
        ("pairwise_cosine", Metric::Cosine),
        ("pairwise_euclidean", Metric::Euclidean),
        ("pairwise_manhattan", Metric::Manhattan),
    ] {
        v.push((
            name,
            vec![vec![3, 5], vec![4, 5]],
            Box::new(move |t, x| t.pairwise_distance(x[0], x[1], metric)),
        ));
    }
    v
}

/// Miniature joint model: 8×8 images, embed 8, depth 1, 4×4 map.
pub fn miniature(task: Task) -> ModelConfig {
    ModelConfig {
        vit: VitConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            mlp_dim: 16,
            encoder_depth: 1,
            decoder_depth: 1,
            num_heads: 2,
            num_classes: (task == Task::Classification).then_some(3),
            task,
        },
        map_height: 4,
        map_width: 4,
        metric: Metric::Cosine,
    }
}

const OP_TRIALS: usize = 5;
const MODEL_TRIALS: usize = 4;

fn gradients(opts: &VerifyOptions) -> Result<Tally> {
    let mut tally = Tally::new(GRAD_TOLERANCE * opts.tolerance_factor);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for (name, shapes, build) in op_cases() {
        for trial in 0..OP_TRIALS {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, -2.0, 2.0)).collect();
            let seed = rng.random();
            let report = check_gradients(&inputs, FD_STEP, None, |t, x| {
                let out = build(t, x)?;
                if t.shape(out).is_empty() {
                    Ok(out)
                } else {
                    project(t, out, seed)
                }
            })?;
            tally.record(report.max_rel_err, || {
                format!(
                    "{name} trial {trial}: input {} coord {} analytic {} numeric {} (inputs {inputs:?})",
                    report.worst_input, report.worst_coord, report.analytic, report.numeric
                )
            });
        }
    }
    for task in [Task::Clustering, Task::Classification] {
        for trial in 0..MODEL_TRIALS {
            let report = full_objective_check(task, rng.random(), &mut rng)?;
            tally.record(report.max_rel_err, || {
                format!(
                    "L_total ({task}) trial {trial}: parameter #{} coord {} analytic {} numeric {}",
                    report.worst_input, report.worst_coord, report.analytic, report.numeric
                )
            });
        }
    }
    Ok(tally)
}

/// Finite-difference check of `L_total` with respect to every parameter
/// tensor of the miniature model (a spread of coordinates per tensor).
pub fn full_objective_check(task: Task, seed: u64, rng: &mut ChaCha8Rng) -> Result<crate::ndgrad::check::GradReport> {
    let model = VitSom::new(miniature(task), seed)?;
    let images = random(rng, &[3, 1, 8, 8], 0.0, 1.0);
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
    let t = rng.random_range(0.5..2.0);
    let gamma = rng.random_range(0.1..1.0);
    let inputs: Vec<Tensor> = model.store().iter().map(|p| p.tensor.clone()).collect();
    check_gradients(&inputs, FD_STEP, Some(12), |tape, vars| {
        let bound = crate::params::Bound::from_vars(vars.to_vec());
        let f = model.forward(tape, &bound, &images, Some(&labels), t, gamma)?;
        Ok(f.l_total)
    })
}

/// Exhaustive distance, computed coordinate by coordinate.
fn scan_distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        Metric::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        Metric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na.sqrt() * nb.sqrt())
            }
        }
    }
}

const BMU_BATCHES: usize = 1000;

fn bmu(opts: &VerifyOptions) -> Result<Tally> {
    let mut tally = Tally::new(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xb0);
    let metrics = [Metric::Cosine, Metric::Euclidean, Metric::Manhattan];
    for trial in 0..BMU_BATCHES {
        let metric = metrics[trial % 3];
        let (h, w) = (rng.random_range(1..6), rng.random_range(2..6));
        let m = h * w;
        let dim = rng.random_range(1..9);
        let b = rng.random_range(1..12);
        let mut protos = random(&mut rng, &[m, dim], -1.0, 1.0);
        // engineered ties: copy a prototype onto a higher index
        let src = rng.random_range(0..m - 1);
        let dst = rng.random_range(src + 1..m);
        let row = protos.row(src).to_vec();
        protos.data_mut()[dst * dim..(dst + 1) * dim].copy_from_slice(&row);
        let mut z = random(&mut rng, &[b, dim], -1.0, 1.0);
        // some samples sit exactly on the duplicated prototype
        if rng.random_bool(0.5) {
            z.data_mut()[..dim].copy_from_slice(&row);
        }
        let grid = SomGrid::from_prototypes(h, w, metric, protos)?;
        let got = find_bmu(&grid.distances(&z)?)?;
        let want: Vec<usize> = (0..b)
            .map(|i| {
                let d: Vec<f64> = (0..m)
                    .map(|j| scan_distance(metric, z.row(i), grid.prototype(j)))
                    .collect();
                (0..m).fold(0, |best, j| if d[j] < d[best] { j } else { best })
            })
            .collect();
        tally.exact(got == want, || {
            format!("batch {trial} ({metric}, {h}x{w}, dim {dim}): got {got:?}, exhaustive scan {want:?}")
        });
    }
    Ok(tally)
}

const EQUIVALENCE_TRIALS: usize = 1000;

/// One SGD step of size η on the batch loss (B = 1, squared Euclidean)
/// against the classic rule with α = 2η.
fn equivalence(opts: &VerifyOptions) -> Result<Tally> {
    let mut tally = Tally::new(EQUIVALENCE_TOLERANCE * opts.tolerance_factor);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xe9);
    for trial in 0..EQUIVALENCE_TRIALS {
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let dim = rng.random_range(1..10);
        let protos = random(&mut rng, &[h * w, dim], -1.0, 1.0);
        let z = random(&mut rng, &[1, dim], -1.0, 1.0);
        let t = rng.random_range(0.05..4.0);
        let eta = rng.random_range(0.001..0.3);

        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let pv = tape.var(protos.clone());
        let out = som_loss(&mut tape, &Lattice::new(h, w)?, Metric::Euclidean, zv, pv, t)?;
        tape.backward(out.loss)?;
        let grad = tape.grad(pv).expect("prototypes are a leaf");
        let sgd: Vec<f64> = protos.data().iter().zip(grad).map(|(p, g)| p - eta * g).collect();

        let mut grid = SomGrid::from_prototypes(h, w, Metric::Euclidean, protos)?;
        classic_update(&mut grid, z.row(0), 2.0 * eta, t)?;
        let dev = sgd
            .iter()
            .zip(grid.prototypes().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        tally.record(dev, || {
            format!(
                "trial {trial}: {h}x{w} map, dim {dim}, T {t}, eta {eta}, z {:?}: deviation {dev:e}",
                z.data()
            )
        });
    }
    Ok(tally)
}

fn schedules(opts: &VerifyOptions) -> Result<Tally> {
    let mut tally = Tally::new(SCHEDULE_TOLERANCE * opts.tolerance_factor);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5c);
    for trial in 0..100 {
        let side = rng.random_range(2..41);
        let k = rng.random_range(1..100_000u64);
        let temp = TemperatureSchedule::for_map(side, side, k)?;
        let t_max = side as f64 / 2.0;
        tally.record((temp.temperature(0) - t_max).abs(), || {
            format!("T(0) on {side}x{side}, K={k}")
        });
        tally.record((temp.temperature(k) - crate::som::T_MIN).abs(), || {
            format!("T(K) on {side}x{side}, K={k}: {}", temp.temperature(k))
        });
        let mid = (t_max * crate::som::T_MIN).sqrt();
        if k % 2 == 0 {
            tally.record((temp.temperature(k / 2) - mid).abs() / mid, || {
                format!("T(K/2) on {side}x{side}, K={k}: {} vs {mid}", temp.temperature(k / 2))
            });
        }

        let lr0 = rng.random_range(1e-4..0.1);
        let lr_min = lr0 * rng.random_range(0.0..0.5);
        let kk = 2 * rng.random_range(1..50_000u64);
        tally.record((cosine_lr(0, kk, lr0, lr_min) - lr0).abs(), || {
            format!("lr(0), lr0 {lr0}")
        });
        tally.record((cosine_lr(kk, kk, lr0, lr_min) - lr_min).abs(), || {
            format!("lr(K), K {kk}, lr_min {lr_min}")
        });
        tally.record(
            (cosine_lr(kk / 2, kk, lr0, lr_min) - (lr0 + lr_min) / 2.0).abs(),
            || format!("lr(K/2), K {kk}, lr0 {lr0}, lr_min {lr_min}"),
        );

        let g = rng.random_range(0.0..0.1);
        let warm = rng.random_range(0..10_000u64);
        let s = GammaSchedule::new(g, warm)?;
        tally.exact(s.gamma(0) == 0.0 || warm == 0, || {
            format!("gamma(0) = {} (trial {trial})", s.gamma(0))
        });
        tally.exact(s.gamma(warm) == g, || {
            format!("gamma(warmup={warm}) = {} != {g}", s.gamma(warm))
        });
    }
    Ok(tally)
}
