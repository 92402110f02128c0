mod common;

use capsnet::capsule::RoutingCapsuleConfig;
use capsnet::checkpoint::Checkpoint;
use capsnet::config::{Dataset, RunConfig};
use capsnet::data::{load_mnist, DatasetSplit};
use capsnet::model::{CapsNet, ModelConfig};
use capsnet::tensor::Tensor;
use capsnet::train::{evaluate, TrainConfig, TrainError, Trainer};

fn tiny(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::preset("mnist-desk").unwrap().with_seed(seed);
    cfg.conv_layers[0].filters = 16;
    cfg.primary.num_capsule_types = 4;
    cfg.decoder.hidden = vec![64, 128];
    cfg
}

fn synthetic(n: usize) -> (DatasetSplit, DatasetSplit, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    common::write_synthetic_mnist(dir.path(), n, 11);
    let (train, val) = load_mnist(dir.path()).unwrap();
    (train, val, dir)
}

fn train_config(epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (train, val, _d) = synthetic(20);
    let model = CapsNet::<f32>::build(tiny(1)).unwrap();
    let mut cfg = train_config(2, 8);
    cfg.adam.lr = 0.0;
    let mut t = Trainer::new(model.clone(), cfg).unwrap();
    let a = t.train_epoch(&train, &val).unwrap();
    let b = t.train_epoch(&train, &val).unwrap();
    assert_eq!(t.model.params(), model.params());
    assert_eq!(a.val_accuracy, b.val_accuracy);
}

#[test]
fn memorizes_fifty_examples() {
    let dir = common::mnist_dir();
    let (train, _d) = if dir.join("train-images-idx3-ubyte").exists() {
        (load_mnist(&dir).unwrap().0.head(50), None)
    } else {
        let (t, _, d) = synthetic(50);
        (t, Some(d))
    };
    let mut t = Trainer::new(CapsNet::<f32>::build(tiny(2)).unwrap(), train_config(1, 10)).unwrap();
    let mut acc = 0.0;
    for _ in 0..60 {
        acc = t.train_epoch(&train, &train).unwrap().val_accuracy;
        if acc == 1.0 {
            break;
        }
    }
    assert_eq!(acc, 1.0, "training accuracy after {} epochs", t.state.epoch);
}

#[test]
fn baseline_loss_falls_on_a_fixed_batch() {
    let model = CapsNet::<f32>::build(ModelConfig::cifar10_baseline().with_seed(3)).unwrap();
    let mut g = common::rng(3);
    let images = Tensor::<f32>::uniform([4, 3, 32, 32], 0.0, 1.0, &mut g);
    let labels = [0, 3, 7, 9];
    let mut t = Trainer::new(model, train_config(1, 4)).unwrap();
    let mut totals = Vec::new();
    for _ in 0..20 {
        let (losses, grads) = t.batch_gradients(&images, &labels).unwrap();
        totals.push(losses.2);
        t.state.adam.update(t.model.params_mut(), &grads);
    }
    let last = t.batch_gradients(&images, &labels).unwrap().0 .2;
    assert!(last < totals[0], "loss went from {} to {last}", totals[0]);
}

#[test]
fn every_parameter_receives_gradient() {
    let mut cfg = tiny(4).with_nota(true);
    cfg.stacked_capsule_layers = vec![RoutingCapsuleConfig {
        num_out_capsules: 6,
        out_dim: 8,
        routing_iterations: 3,
    }];
    let model = CapsNet::<f64>::build(cfg).unwrap();
    let mut g = common::rng(4);
    let images = Tensor::<f64>::uniform([6, 1, 28, 28], 0.0, 1.0, &mut g);
    let t = Trainer::new(model, train_config(1, 6)).unwrap();
    let (_, grads) = t.batch_gradients(&images, &[0, 1, 2, 3, 4, 5]).unwrap();
    for ((name, _), grad) in t.model.params().iter().zip(&grads) {
        assert!(grad.data().iter().any(|&x| x != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn same_seed_same_history() {
    let (train, val, _d) = synthetic(30);
    let run = || {
        let mut t = Trainer::new(CapsNet::<f32>::build(tiny(5)).unwrap(), train_config(2, 8)).unwrap();
        (0..2).map(|_| t.train_epoch(&train, &val).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let (train, val, _d) = synthetic(30);
    let cfg = train_config(3, 8);
    let mut straight = Trainer::new(CapsNet::<f32>::build(tiny(6)).unwrap(), cfg.clone()).unwrap();
    for _ in 0..3 {
        straight.train_epoch(&train, &val).unwrap();
    }

    let mut first = Trainer::new(CapsNet::<f32>::build(tiny(6)).unwrap(), cfg.clone()).unwrap();
    first.train_epoch(&train, &val).unwrap();
    let mut run = RunConfig {
        dataset: Dataset::Mnist,
        model: tiny(6),
        train: cfg.clone(),
        ..RunConfig::default()
    };
    run.sync_derived();
    let bytes = Checkpoint {
        run,
        model: first.model,
        state: first.state,
    }
    .to_bytes();
    let ckpt = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(ckpt.model, cfg, ckpt.state).unwrap();
    for _ in 0..2 {
        resumed.train_epoch(&train, &val).unwrap();
    }
    assert_eq!(resumed.state.history, straight.state.history);
    assert_eq!(resumed.model.params(), straight.model.params());
    assert_eq!(resumed.state.adam, straight.state.adam);
}

#[test]
fn nan_parameter_aborts_with_location() {
    let (train, val, _d) = synthetic(10);
    let mut model = CapsNet::<f32>::build(tiny(7)).unwrap();
    model.params_mut().next().unwrap().data_mut()[0] = f32::NAN;
    let mut t = Trainer::new(model, train_config(1, 4)).unwrap();
    match t.train_epoch(&train, &val) {
        Err(TrainError::NonFinite { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, 0)),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn evaluation_is_in_unit_interval_and_repeatable() {
    let (_, val, _d) = synthetic(25);
    let model = CapsNet::<f32>::build(tiny(8)).unwrap();
    let a = evaluate(&model, &val, 7, &Default::default()).unwrap();
    let b = evaluate(&model, &val, 25, &Default::default()).unwrap();
    assert!((0.0..=1.0).contains(&a));
    assert_eq!(a, b);
}
