mod bench;
mod export;
mod run;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vit_som::data::{DatasetKind, Split};
use vit_som::metrics::MetricsRecord;
use vit_som::ndgrad::Metric;
use vit_som::trainer::{self, Checkpoint, RunPaths, Trainer};
use vit_som::verify::{self, Suite, VerifyOptions};
use vit_som::{Error, Result};

use run::{RunManifest, DATA_ROOT_ENV};

#[derive(Parser)]
#[command(name = "vitsom", version, about = "Train and inspect ViT-SOM models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RootArg {
    /// Dataset directory; overrides data.root from the config.
    #[arg(long, env = DATA_ROOT_ENV)]
    dataset_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the manifest, metric log and checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint; its config must match --config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        root: RootArg,
        /// Print the final metrics as one JSON line.
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a checkpoint on a test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the dataset the model was trained on.
        #[arg(long)]
        dataset: Option<DatasetKind>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Use only the first N samples.
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        root: RootArg,
        /// Print only a single JSON line.
        #[arg(long)]
        json: bool,
    },
    /// Write the prototypes as a raw dump and a tiled image.
    ExportPrototypes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check library routines against independent oracles.
    Verify {
        /// all, som, gradients, bmu, equivalence or schedules.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
        /// Run with zero tolerance so every inexact case fails.
        #[arg(long, hide = true)]
        inject_violation: bool,
    },
    /// Time batched against per-sample BMU search.
    BenchBmu {
        #[arg(long, default_value_t = 24)]
        height: usize,
        #[arg(long, default_value_t = 24)]
        width: usize,
        #[arg(long, default_value_t = 784)]
        dim: usize,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value = "cosine")]
        metric: Metric,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Train {
            config,
            out,
            checkpoint,
            seed,
            root,
            json,
        } => train(
            &config,
            &out,
            checkpoint.as_deref(),
            seed,
            root.dataset_root.as_deref(),
            json,
        ),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            samples,
            root,
            json,
        } => eval(
            &checkpoint,
            dataset,
            &split,
            samples,
            root.dataset_root.as_deref(),
            json,
        ),
        Command::ExportPrototypes { checkpoint, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let step = ck.step;
            let t = Trainer::from_checkpoint(ck)?;
            let files = export::export_prototypes(t.model(), step, &out)?;
            println!("raw:     {}", files.raw.display());
            println!("sidecar: {}", files.sidecar.display());
            println!("image:   {}", files.image.display());
            Ok(0)
        }
        Command::Verify {
            suite,
            seed,
            json,
            inject_violation,
        } => verify(&suite, seed, json, inject_violation),
        Command::BenchBmu {
            height,
            width,
            dim,
            batch,
            metric,
            repeats,
            seed,
            json,
        } => {
            let r = bench::run(height, width, dim, batch, metric, repeats, seed)?;
            if json {
                println!("{}", to_json(&r)?);
            } else {
                println!(
                    "map {}×{}, dim {}, batch {}, {} metric",
                    r.height, r.width, r.dim, r.batch, r.metric
                );
                println!(
                    "batched     {:>10.3} ms  {:>12.0} samples/s",
                    r.batched_secs * 1e3,
                    r.samples_per_sec_batched
                );
                println!(
                    "sequential  {:>10.3} ms  {:>12.0} samples/s",
                    r.sequential_secs * 1e3,
                    r.samples_per_sec_sequential
                );
                println!("speedup     {:>10.2}×", r.speedup);
                println!("mismatches  {:>10}", r.mismatches);
            }
            if r.mismatches > 0 {
                eprintln!(
                    "error: batched and sequential BMUs disagree on {} samples",
                    r.mismatches
                );
                return Ok(1);
            }
            Ok(0)
        }
    }
}

fn to_json(v: &impl Serialize) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Export(e.to_string()))
}

fn train(
    config: &Path,
    out: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
    root: Option<&Path>,
    json: bool,
) -> Result<u8> {
    let loaded = run::load_config(config)?;
    let mut cfg = loaded.config;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = RunManifest::start("train", out, Some((config, &loaded.sha256)))?;
    let result = train_in(cfg, out, resume, root, json);
    manifest.finish(result.as_ref().map_or_else(|e| e.exit_code(), |_| 0))?;
    result.map(|_| 0)
}

fn train_in(
    mut cfg: trainer::TrainConfig,
    out: &Path,
    resume: Option<&Path>,
    root: Option<&Path>,
    json: bool,
) -> Result<()> {
    let root = run::data_root(root, cfg.data.root.as_deref())?;
    cfg.data.root = Some(root.clone());
    let trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut stored = ck.config.clone();
            stored.data.root = cfg.data.root.clone();
            if stored != cfg {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different config",
                    path.display()
                )));
            }
            Trainer::from_checkpoint(ck)?
        }
        None => Trainer::new(cfg.clone())?,
    };
    let resolved = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    let resolved_path = out.join("config.toml");
    std::fs::write(&resolved_path, resolved).map_err(|e| run::io_err(&resolved_path, e))?;

    let d = &cfg.data;
    let train_set = run::load_split(d.dataset, &root, Split::Train, d.train_samples)?;
    let test_set = run::load_split(d.dataset, &root, Split::Test, d.test_samples)?;
    log::info!(
        "{} {}: {} train / {} test samples, {} parameters, {} steps",
        cfg.task,
        d.dataset,
        train_set.len(),
        test_set.len(),
        trainer.model().param_count(),
        cfg.optim.steps
    );
    let done = trainer::train(trainer, &train_set, &test_set, Some(&RunPaths::in_dir(out)))?;
    report(
        &done.final_metrics,
        json,
        &EvalSummary::new(&cfg, done.trainer.step_index(), Split::Test, test_set.len()),
    )
}

#[derive(Serialize)]
struct EvalSummary {
    task: String,
    dataset: String,
    split: String,
    step: u64,
    samples: usize,
}

impl EvalSummary {
    fn new(cfg: &trainer::TrainConfig, step: u64, split: Split, samples: usize) -> Self {
        EvalSummary {
            task: cfg.task.to_string(),
            dataset: cfg.data.dataset.to_string(),
            split: split.to_string(),
            step,
            samples,
        }
    }
}

#[derive(Serialize)]
struct EvalLine<'a> {
    #[serde(flatten)]
    summary: &'a EvalSummary,
    #[serde(flatten)]
    metrics: &'a MetricsRecord,
}

fn report(m: &MetricsRecord, json: bool, s: &EvalSummary) -> Result<()> {
    let line = to_json(&EvalLine { summary: s, metrics: m })?;
    let mut out = std::io::stdout().lock();
    let w = |e: std::io::Error| run::io_err(Path::new("<stdout>"), e);
    if !json {
        writeln!(
            out,
            "{} on {} {} ({} samples, step {})",
            s.task, s.dataset, s.split, s.samples, s.step
        )
        .map_err(w)?;
        let rows = [
            ("purity", m.purity),
            ("accuracy", m.accuracy),
            ("quantization_error", m.quantization_error),
            ("topographic_error", m.topographic_error),
        ];
        for (name, v) in rows {
            if let Some(v) = v {
                writeln!(out, "  {name:<20} {v:.6}").map_err(w)?;
            }
        }
    }
    writeln!(out, "{line}").map_err(w)
}

fn eval(
    ck_path: &Path,
    dataset: Option<DatasetKind>,
    split: &str,
    samples: Option<usize>,
    root: Option<&Path>,
    json: bool,
) -> Result<u8> {
    let split: Split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => {
            return Err(Error::Config(format!(
                "unknown split `{other}` (expected train or test)"
            )))
        }
    };
    let ck = Checkpoint::load(ck_path)?;
    let step = ck.step;
    let t = Trainer::from_checkpoint(ck)?;
    let mut cfg = t.config().clone();
    let kind = dataset.unwrap_or(cfg.data.dataset);
    let vit = &t.model().config().vit;
    let (c, s) = (kind.channels(), kind.image_size());
    if (c, s) != (vit.channels, vit.image_size) {
        return Err(Error::Config(format!(
            "the {} model takes {}×{}×{} images but {kind} has {c}×{s}×{s}",
            cfg.task, vit.channels, vit.image_size, vit.image_size
        )));
    }
    let root = run::data_root(root, cfg.data.root.as_deref())?;
    let ds = run::load_split(kind, &root, split, samples.or(cfg.data.test_samples))?;
    let m = t.evaluate(&ds)?;
    cfg.data.dataset = kind;
    report(&m, json, &EvalSummary::new(&cfg, step, split, ds.len()))?;
    Ok(0)
}

fn verify(suite: &str, seed: u64, json: bool, inject: bool) -> Result<u8> {
    let opts = VerifyOptions {
        seed,
        tolerance_factor: if inject { 0.0 } else { 1.0 },
    };
    let mut failed = false;
    for s in Suite::select(suite)? {
        let r = verify::run(s, &opts)?;
        failed |= !r.passed();
        if json {
            println!("{}", to_json(&r)?);
        } else {
            println!(
                "{} {:<12} cases={:<5} worst={:.3e} tolerance={:.0e} ({:.2}s)",
                if r.passed() { "PASS" } else { "FAIL" },
                r.suite,
                r.cases,
                r.worst,
                r.tolerance,
                r.elapsed.as_secs_f64()
            );
        }
        if let Some(f) = &r.failure {
            eprintln!("{s}: first failing case: {f}");
        }
    }
    Ok(if failed { 1 } else { 0 })
}
