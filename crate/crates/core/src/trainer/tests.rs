use std::path::PathBuf;

use super::*;
use crate::data::{DatasetKind, Split};

fn mnist(split: Split, n: usize) -> Dataset {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k");
    Dataset::load(DatasetKind::Mnist, &root, split)
        .unwrap()
        .take(n)
        .unwrap()
}

fn small(task: Task) -> TrainConfig {
    let mut c = TrainConfig::new(task, DatasetKind::Mnist);
    c.model = ModelOverrides {
        patch_size: Some(7),
        embed_dim: Some(8),
        mlp_dim: Some(16),
        encoder_depth: Some(1),
        decoder_depth: Some(1),
        num_heads: Some(2),
    };
    c.som.height = 4;
    c.som.width = 4;
    c.optim.steps = 6;
    c.optim.batch_size = 8;
    c.optim.lr = 0.003;
    c.eval.interval = 3;
    c
}

#[test]
fn config_validation() {
    assert!(small(Task::Clustering).validate().is_ok());
    let mut c = small(Task::Clustering);
    c.optim.lr_min = 1.0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = small(Task::Classification);
    c.model.num_heads = Some(3);
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let c = TrainConfig::new(Task::Clustering, DatasetKind::Mnist);
    assert_eq!(c.temperature().unwrap().t_max, 12.0);
    assert_eq!(c.gamma().unwrap().gamma_final, 0.005);
    assert_eq!(c.gamma().unwrap().warmup_steps, 100);
    assert_eq!(c.optim.lr, 0.01);
}

#[test]
fn first_step_has_zero_gamma_and_live_task_gradient() {
    let train = mnist(Split::Train, 32);
    let mut t = Trainer::new(small(Task::Clustering)).unwrap();
    let before = t.model().store().clone();
    let s = t.step(&train).unwrap();
    assert_eq!(s.gamma, 0.0);
    assert_eq!(s.l_total, s.l_nn);
    assert_eq!(s.temperature, 2.0);
    assert_eq!(s.lr, 0.003);
    let moved = t
        .model()
        .store()
        .iter()
        .zip(before.iter())
        .filter(|(a, b)| a.tensor != b.tensor)
        .count();
    // everything except the prototypes, which only the SOM term reaches
    assert_eq!(moved, before.len() - 1);
}

#[test]
fn training_is_deterministic() {
    let train = mnist(Split::Train, 40);
    let test = mnist(Split::Test, 20);
    for task in [Task::Clustering, Task::Classification] {
        let a = train_fn(small(task), &train, &test);
        let b = train_fn(small(task), &train, &test);
        assert_eq!(a.history, b.history);
        assert_eq!(
            a.trainer.checkpoint().to_bytes().unwrap(),
            b.trainer.checkpoint().to_bytes().unwrap()
        );
        assert_eq!(a.history.len(), 6);
        assert!(a.history[2].eval.is_some() && a.history[3].eval.is_none());
    }
}

fn train_fn(c: TrainConfig, train_set: &Dataset, test: &Dataset) -> TrainOutcome {
    super::train(Trainer::new(c).unwrap(), train_set, test, None).unwrap()
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let train = mnist(Split::Train, 24);
    let test = mnist(Split::Test, 10);
    let mut t = Trainer::new(small(Task::Classification)).unwrap();
    for _ in 0..2 {
        t.step(&train).unwrap();
    }
    let bytes = t.checkpoint().to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, t.checkpoint());
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let resumed = Trainer::from_checkpoint(back).unwrap();
    assert_eq!(resumed.evaluate(&test).unwrap(), t.evaluate(&test).unwrap());
}

#[test]
fn resuming_continues_the_same_trajectory() {
    let train = mnist(Split::Train, 24);
    let mut straight = Trainer::new(small(Task::Clustering)).unwrap();
    let mut logs = Vec::new();
    for _ in 0..6 {
        logs.push(straight.step(&train).unwrap());
    }
    let mut first = Trainer::new(small(Task::Clustering)).unwrap();
    for _ in 0..4 {
        first.step(&train).unwrap();
    }
    let bytes = first.checkpoint().to_bytes().unwrap();
    let mut second = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(second.step(&train).unwrap(), logs[4]);
    assert_eq!(second.step(&train).unwrap(), logs[5]);
    assert_eq!(second.checkpoint(), straight.checkpoint());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let t = Trainer::new(small(Task::Clustering)).unwrap();
    let bytes = t.checkpoint().to_bytes().unwrap();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        Checkpoint::from_bytes(b"not a checkpoint"),
        Err(Error::Checkpoint(_))
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn evaluation_is_pure_and_task_specific() {
    let test = mnist(Split::Test, 30);
    let t = Trainer::new(small(Task::Clustering)).unwrap();
    let before = t.model().store().clone();
    let a = t.evaluate(&test).unwrap();
    assert_eq!(a, t.evaluate(&test).unwrap());
    assert_eq!(t.model().store(), &before);
    assert!(a.purity.is_some() && a.accuracy.is_none());
    assert!(a.quantization_error.is_some() && a.topographic_error.is_some());

    let c = Trainer::new(small(Task::Classification)).unwrap();
    let r = c.evaluate(&test).unwrap();
    assert!(r.accuracy.is_some() && r.purity.is_none());

    let usps = Dataset::new(DatasetKind::Usps, Split::Test, Tensor::zeros(&[2, 1, 16, 16]), None).unwrap();
    assert!(matches!(t.evaluate(&usps), Err(Error::Contract(_))));
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::in_dir(dir.path());
    let train = mnist(Split::Train, 24);
    let test = mnist(Split::Test, 10);
    let mut c = small(Task::Clustering);
    c.optim.steps = 3;
    let done = super::train(Trainer::new(c).unwrap(), &train, &test, Some(&paths)).unwrap();
    let saved = std::fs::read(&paths.checkpoint).unwrap();

    let mut broken = done.trainer.clone();
    broken.config.optim.steps = 10;
    let id = broken.model().store().find("vit.patch_embed.w").unwrap();
    broken.model_mut().store_mut().tensor_mut(id).data_mut()[0] = f64::NAN;
    let err = super::train(
        broken,
        &train,
        &test,
        Some(&RunPaths {
            log: dir.path().join("broken.csv"),
            checkpoint: paths.checkpoint.clone(),
        }),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert_eq!(std::fs::read(&paths.checkpoint).unwrap(), saved);
}

#[test]
fn metric_log_has_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::in_dir(dir.path());
    let train = mnist(Split::Train, 24);
    let test = mnist(Split::Test, 10);
    super::train(
        Trainer::new(small(Task::Clustering)).unwrap(),
        &train,
        &test,
        Some(&paths),
    )
    .unwrap();
    let text = std::fs::read_to_string(&paths.log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], crate::metrics::LOG_HEADER);
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("0,"));
    assert!(Checkpoint::load(&paths.checkpoint).unwrap().step == 6);
}

#[test]
fn classic_som_runs_and_counts() {
    let train = mnist(Split::Train, 200);
    let test = mnist(Split::Test, 100);
    let cfg = ClassicSomConfig {
        height: 5,
        width: 5,
        epochs: 2,
        ..Default::default()
    };
    let mut som = ClassicSom::new(cfg.clone(), 784).unwrap();
    assert_eq!(som.param_count(), 25 * 784);
    som.fit(&train).unwrap();
    let a = som.evaluate(&test).unwrap();
    let mut again = ClassicSom::new(cfg, 784).unwrap();
    again.fit(&train).unwrap();
    assert_eq!(a, again.evaluate(&test).unwrap());
    assert!(a.purity.unwrap() > 0.3, "{a:?}");
    assert_eq!(
        ClassicSom::new(ClassicSomConfig::default(), 784).unwrap().param_count(),
        451_584
    );
}
