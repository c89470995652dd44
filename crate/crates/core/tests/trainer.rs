use std::fs;
use std::path::Path;
use std::process::Command;

use relreason::checkpoint::Checkpoint;
use relreason::config::{Method, TrainConfig};
use relreason::nn::ParamSet;
use relreason::optim::{adam_step, Adam, Optimizer, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use relreason::tensor::Tensor;
use relreason::train::{evaluate, steps_per_epoch, train, EvalRequest, Model, METRICS_HEADER};
use relreason::Error;

#[test]
fn adam_first_step_moves_by_lr() {
    let (mut p, mut m, mut v) = (vec![1.0f32], vec![0.0], vec![0.0]);
    adam_step(&mut p, &[2.0], &mut m, &mut v, 1, 1e-3, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
    assert!((p[0] - 0.999).abs() < 1e-6, "{}", p[0]);
}

fn scalar_params(x: f32) -> ParamSet {
    let mut ps = ParamSet::new();
    ps.push("x", Tensor::scalar(x));
    ps
}

#[test]
fn adam_ignores_zero_gradients() {
    let mut ps = scalar_params(0.7);
    let mut adam = Adam::new(&ps, 0.1);
    for _ in 0..50 {
        adam.step(&mut ps, &[vec![0.0]]).unwrap();
    }
    assert_eq!(ps.tensors()[0].data(), &[0.7]);
}

#[test]
fn adam_solves_a_quadratic() {
    let mut ps = scalar_params(0.0);
    let mut adam = Adam::new(&ps, 0.1);
    for _ in 0..100 {
        let x = ps.tensors()[0].data()[0];
        adam.step(&mut ps, &[vec![2.0 * (x - 3.0)]]).unwrap();
    }
    let x = ps.tensors()[0].data()[0];
    assert!((x - 3.0).abs() < 0.5, "{x}");
}

#[test]
fn config_errors_name_the_field() {
    let field = |text: &str| match TrainConfig::parse(text) {
        Err(Error::Config { field, .. }) => field,
        other => panic!("expected a config error for {text:?}, got {other:?}"),
    };
    assert_eq!(field("bogus = 1"), "bogus");
    assert_eq!(field("k = many"), "k");
    assert_eq!(field("k = 2\nk = 3"), "k");
    assert_eq!(field("dataset = cifar10"), "cifar_files");
    assert_eq!(field("dataset = imagenet"), "dataset");
    assert!(TrainConfig::parse("method = relational\nk = 1").is_err());
    assert!(TrainConfig::parse("batch_size = 1").is_err());
}

#[test]
fn config_text_round_trips() {
    let text = "# desk run\nmethod = ablation_b\nk = 3\nsynth_n = 40\nsynth_size = 16\nepochs = 2 # short\n";
    let cfg = TrainConfig::parse(text).unwrap();
    assert_eq!(cfg.method, Method::AblationB);
    assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
}

fn tiny(method: Method, epochs: usize, out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::parse("synth_n = 60\nsynth_size = 16\nbatch_size = 8\nk = 2\nprobe_epochs = 5\nknn = 3")
        .unwrap();
    cfg.method = method;
    cfg.epochs = epochs;
    cfg.out_dir = out.to_path_buf();
    cfg
}

#[test]
fn zero_epochs_writes_header_and_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Relational, 0, dir.path());
    let outcome = train(&cfg).unwrap();
    assert_eq!(fs::read_to_string(&outcome.metrics).unwrap(), format!("{METRICS_HEADER}\n"));
    let init = Model::init(&cfg, 4).to_checkpoint(&cfg, 0);
    assert_eq!(fs::read(&outcome.checkpoint).unwrap(), init.to_bytes());
}

#[test]
fn metrics_are_reproducible_and_complete() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |dir: &Path| {
        let cfg = tiny(Method::Relational, 2, dir);
        fs::read(train(&cfg).unwrap().metrics).unwrap()
    };
    let first = run(a.path());
    assert_eq!(first, run(b.path()));
    let text = String::from_utf8(first).unwrap();
    // 60 images → 48 training images → 6 batches of 8.
    assert_eq!(steps_per_epoch(48, 8), 6);
    assert_eq!(text.lines().count(), 2 * 6 + 1);
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
}

#[test]
fn checkpoints_round_trip_bytewise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Relational, 1, dir.path());
    let outcome = train(&cfg).unwrap();
    let bytes = fs::read(&outcome.checkpoint).unwrap();
    let loaded = Checkpoint::load(&outcome.checkpoint).unwrap();
    let again = dir.path().join("again.ssrr");
    loaded.save(&again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), bytes);
    let model = Model::from_checkpoint(&cfg, &loaded).unwrap();
    assert_eq!(model.to_checkpoint(&cfg, 1).to_bytes(), bytes);
}

#[test]
fn evaluation_is_repeatable_and_normalised() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Relational, 1, dir.path());
    let ckpt = train(&cfg).unwrap().checkpoint;
    let req = EvalRequest {
        linear: true,
        knn: Some(3),
    };
    let first = evaluate(&cfg, &ckpt, req).unwrap();
    let eval_csv = fs::read(dir.path().join("eval.csv")).unwrap();
    let second = evaluate(&cfg, &ckpt, req).unwrap();
    assert_eq!(first, second);
    assert_eq!(fs::read(dir.path().join("eval.csv")).unwrap(), eval_csv);
    assert!(first.get("linear_top1").is_some() && first.get("knn_top3").is_some());
    let confusion = fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
    for line in confusion.lines().skip(1) {
        let sum: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9, "{line}");
    }
}

#[test]
fn every_method_trains_and_reloads() {
    for method in [
        Method::Rotation,
        Method::Supervised,
        Method::AblationA,
        Method::AblationB,
        Method::Random,
    ] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(method, 1, dir.path());
        let outcome = train(&cfg).unwrap();
        let expected_rows = if method == Method::Random { 0 } else { 6 };
        assert_eq!(outcome.rows.len(), expected_rows, "{}", method.name());
        let report = evaluate(&cfg, &outcome.checkpoint, EvalRequest { linear: true, knn: None }).unwrap();
        let acc = report.get("linear_top1").unwrap();
        assert!((0.0..=1.0).contains(&acc));
        if method == Method::Rotation {
            assert!(report.get("rotation_accuracy").is_some());
        }
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Method::Relational, 0, dir.path());
    let ckpt = train(&cfg).unwrap().checkpoint;
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
    bytes[0] = b'S';
    bytes[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_relreason")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg_path = d.join("run.cfg");
    fs::write(
        &cfg_path,
        format!(
            "synth_n = 40\nsynth_size = 16\nbatch_size = 8\nk = 2\nprobe_epochs = 2\nknn = 2\nout_dir = {}\n",
            d.join("out").display()
        ),
    )
    .unwrap();
    let bad_cfg = d.join("bad.cfg");
    fs::write(&bad_cfg, "learning_rate = 3\n").unwrap();
    let cfg = cfg_path.to_str().unwrap();

    assert_eq!(cli(&["train", "--config", cfg, "--epochs", "1", "--seed", "3"]).status.code(), Some(0));
    let ckpt = d.join("out").join("checkpoint.ssrr");
    assert!(ckpt.exists());
    let out = cli(&["evaluate", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--knn", "2", "--linear"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("knn_top2"));

    assert_eq!(cli(&["train", "--config", bad_cfg.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(cli(&["train", "--config", d.join("missing.cfg").to_str().unwrap()]).status.code(), Some(2));
    let junk = d.join("junk.ssrr");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(cli(&["evaluate", "--config", cfg, "--checkpoint", junk.to_str().unwrap()]).status.code(), Some(2));

    assert_eq!(cli(&["gradcheck", "--op", "sigmoid"]).status.code(), Some(0));
    assert_eq!(cli(&["gradcheck", "--op", "nope"]).status.code(), Some(1));

    let synth = d.join("synth");
    let out = cli(&["synth", "--n", "12", "--classes", "3", "--size", "16", "--seed", "1", "--out", synth.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let ds = relreason::dataio::load_idx(synth.join("images.idx"), synth.join("labels.idx")).unwrap();
    assert_eq!(ds, {
        let mut want = relreason::dataio::synth_shapes(12, 3, 16, 1).unwrap();
        want = relreason::dataio::ImageDataset::new(16, 16, 3, want.pixels().to_vec(), want.labels().map(<[usize]>::to_vec), None)
            .unwrap();
        want
    });
}
