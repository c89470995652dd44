//! The epoch loop, checkpointing, metrics logging and checkpoint evaluation.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Conv4Backbone, LinearProbe, REPR_DIM};
use crate::baselines::{rotation_accuracy, rotation_step, supervised_step, PairHead, ROTATIONS};
use crate::checkpoint::Checkpoint;
use crate::config::{DatasetSpec, Method, TrainConfig};
use crate::dataio::{load_cifar10, load_idx, synth_shapes, FloatImage, ImageDataset};
use crate::error::{Error, Result};
use crate::eval::{knn_retrieval, linear_eval_report, prediction_confusion, ProbeOptions};
use crate::optim::{milestone_lr, Adam, OptimizerPair, Sgd};
use crate::relational::{training_step, PairOptions, PairScorer, StepConfig};
use crate::seed::{mix_seed, stream};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,step,loss,pair_acc,lr,elapsed_s";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ssrr";

// stream tags
const INIT_BACKBONE: u64 = 1;
const INIT_HEAD: u64 = 2;
const SHUFFLE: u64 = 3;
const STEP: u64 = 4;
const REVEAL: u64 = 5;

/// Builds the dataset a config points at.
pub fn load_dataset(spec: &DatasetSpec) -> Result<ImageDataset> {
    match spec {
        DatasetSpec::Synth { n, classes, size, seed } => synth_shapes(*n, *classes, *size, *seed),
        DatasetSpec::Cifar10 { files } => load_cifar10(files),
        DatasetSpec::Idx { images, labels } => load_idx(images, labels),
    }
}

/// Train and test halves of the configured dataset.
pub fn load_split(cfg: &TrainConfig) -> Result<(ImageDataset, ImageDataset)> {
    Ok(load_dataset(&cfg.dataset)?.split_train_test(cfg.split_seed))
}

/// Mini-batches of one epoch: a seeded permutation cut into chunks of `m`.
///
/// Every instance appears exactly once. A trailing remainder of at least two
/// forms its own batch; a remainder of one is merged with the last full batch,
/// which is then split in two halves (or kept whole when `m = 2`), so no batch
/// ever holds a single image.
pub fn epoch_batches(n: usize, m: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(&[seed, SHUFFLE, epoch as u64]));
    let mut sizes = vec![m; n / m];
    match n % m {
        0 => {}
        1 if sizes.is_empty() => {}
        1 if m >= 3 => {
            sizes.pop();
            sizes.extend([(m + 2) / 2, (m + 1) / 2]);
        }
        1 => *sizes.last_mut().expect("non-empty") += 1,
        r => sizes.push(r),
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        out.push(order[start..start + s].to_vec());
        start += s;
    }
    out
}

/// Number of optimisation steps per epoch, see [`epoch_batches`].
pub fn steps_per_epoch(n: usize, m: usize) -> usize {
    epoch_batches(n, m, 0, 0).len()
}

/// State of a model under training.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Pair {
        backbone: Conv4Backbone,
        head: PairHead,
        optim: OptimizerPair<Adam>,
    },
    Rotation {
        backbone: Conv4Backbone,
        classifier: LinearProbe,
        optim: OptimizerPair<Adam>,
    },
    Supervised {
        backbone: Conv4Backbone,
        classifier: LinearProbe,
        optim: OptimizerPair<Sgd>,
    },
    Random {
        backbone: Conv4Backbone,
    },
}

impl Model {
    /// Freshly initialised model for `cfg`; `classes` sizes the supervised
    /// classifier.
    pub fn init(cfg: &TrainConfig, classes: usize) -> Self {
        let backbone = Conv4Backbone::new(mix_seed(&[cfg.seed, INIT_BACKBONE]));
        let mut rng = stream(&[cfg.seed, INIT_HEAD]);
        match cfg.method {
            Method::Relational | Method::AblationA | Method::AblationB => {
                let kind = cfg.method.pair_head().expect("pair method");
                let head = PairHead::new(kind, cfg.aggregation, &mut rng);
                let optim = OptimizerPair::adam(&backbone.params, head.params(), cfg.lr_backbone, cfg.lr_head);
                Model::Pair { backbone, head, optim }
            }
            Method::Rotation => {
                let classifier = LinearProbe::new(REPR_DIM, ROTATIONS);
                let optim = OptimizerPair::adam(&backbone.params, &classifier.params, cfg.lr_backbone, cfg.lr_head);
                Model::Rotation {
                    backbone,
                    classifier,
                    optim,
                }
            }
            Method::Supervised => {
                let classifier = LinearProbe::new(REPR_DIM, classes);
                let optim = OptimizerPair::sgd(&backbone.params, &classifier.params, cfg.lr_supervised, cfg.momentum);
                Model::Supervised {
                    backbone,
                    classifier,
                    optim,
                }
            }
            Method::Random => Model::Random { backbone },
        }
    }

    pub fn backbone(&self) -> &Conv4Backbone {
        match self {
            Model::Pair { backbone, .. }
            | Model::Rotation { backbone, .. }
            | Model::Supervised { backbone, .. }
            | Model::Random { backbone } => backbone,
        }
    }

    /// Every parameter, running statistic and optimizer buffer by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let bb = self.backbone();
        let mut out: Vec<(String, Tensor<f32>)> = named("backbone.", bb.params.names(), bb.params.tensors());
        out.extend(bb.buffers("backbone."));
        match self {
            Model::Pair { head, optim, .. } => {
                out.extend(named("head.", head.params().names(), head.params().tensors()));
                out.extend(head.buffers("head."));
                out.extend(optim.state());
            }
            Model::Rotation { classifier, optim, .. } => {
                out.extend(named("classifier.", classifier.params.names(), classifier.params.tensors()));
                out.extend(optim.state());
            }
            Model::Supervised { classifier, optim, .. } => {
                out.extend(named("classifier.", classifier.params.names(), classifier.params.tensors()));
                out.extend(optim.state());
            }
            Model::Random { .. } => {}
        }
        out
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig, epoch: usize) -> Checkpoint {
        let mut tensors = self.named_tensors();
        tensors.push(("train.epoch".into(), Tensor::scalar(epoch as f32)));
        Checkpoint::new(tensors, cfg.to_text())
    }

    /// Rebuilds the model described by `cfg` from checkpoint contents.
    pub fn from_checkpoint(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let classes = ckpt
            .get("classifier.bias")
            .map_or(ROTATIONS, |t| t.numel());
        let mut model = Model::init(cfg, classes);
        let named = &ckpt.tensors;
        match &mut model {
            Model::Pair {
                backbone, head, optim, ..
            } => {
                load_backbone(backbone, named)?;
                head.params_mut().assign(named, "head.")?;
                head.load_buffers(named, "head.")?;
                optim.load_state(named)?;
            }
            Model::Rotation {
                backbone,
                classifier,
                optim,
            } => {
                load_backbone(backbone, named)?;
                classifier.params.assign(named, "classifier.")?;
                optim.load_state(named)?;
            }
            Model::Supervised {
                backbone,
                classifier,
                optim,
            } => {
                load_backbone(backbone, named)?;
                classifier.params.assign(named, "classifier.")?;
                optim.load_state(named)?;
            }
            Model::Random { backbone } => load_backbone(backbone, named)?,
        }
        Ok(model)
    }

    /// One optimisation step on the images `batch` of `data`.
    fn step(&mut self, cfg: &TrainConfig, data: &TrainData, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<Option<(f32, Option<f64>)>> {
        let images: Vec<FloatImage> = batch.iter().map(|&i| data.set.rgb_float_image(i)).collect();
        let policy = cfg.augment_policy();
        Ok(Some(match self {
            Model::Pair {
                backbone, head, optim, ..
            } => {
                let labels = data.revealed.as_ref().map(|r| batch.iter().map(|&i| r[i]).collect());
                let step_cfg = StepConfig {
                    k: cfg.k,
                    gamma: cfg.gamma,
                    policy,
                    pair_options: PairOptions {
                        labels,
                        cross_positive_fraction: if data.revealed.is_some() { cfg.label_fraction } else { 0.0 },
                        avoid_label_collisions: cfg.avoid_label_collisions,
                    },
                };
                let out = training_step(&images, backbone, head, optim, &step_cfg, rng)?;
                (out.loss, Some(out.pair_acc))
            }
            Model::Rotation {
                backbone,
                classifier,
                optim,
            } => (rotation_step(&images, backbone, classifier, optim, &policy, rng)?, None),
            Model::Supervised {
                backbone,
                classifier,
                optim,
            } => {
                let labels: Option<Vec<usize>> = data.set.labels().map(|l| batch.iter().map(|&i| l[i]).collect());
                let loss = supervised_step(&images, labels.as_deref(), backbone, classifier, optim, &policy, rng)?;
                (loss, None)
            }
            Model::Random { .. } => return Ok(None),
        }))
    }

    fn begin_epoch(&mut self, cfg: &TrainConfig, epoch: usize) -> f32 {
        match self {
            Model::Supervised { optim, .. } => {
                let lr = milestone_lr(cfg.lr_supervised, epoch, cfg.epochs);
                optim.set_lr(lr, lr);
                lr
            }
            _ => cfg.lr_backbone,
        }
    }
}

fn named(prefix: &str, names: &[String], tensors: &[Tensor<f32>]) -> Vec<(String, Tensor<f32>)> {
    names
        .iter()
        .zip(tensors)
        .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
        .collect()
}

fn load_backbone(bb: &mut Conv4Backbone, named: &[(String, Tensor<f32>)]) -> Result<()> {
    bb.params.assign(named, "backbone.")?;
    bb.load_buffers(named, "backbone.")
}

struct TrainData<'a> {
    set: &'a ImageDataset,
    /// Labels visible to pair construction (semi-supervised runs).
    revealed: Option<Vec<Option<usize>>>,
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    /// 1-based epoch.
    pub epoch: usize,
    /// 1-based global step.
    pub step: usize,
    pub loss: f32,
    pub pair_acc: Option<f64>,
    pub lr: f32,
    pub elapsed_s: Option<f64>,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.loss,
            opt(self.pair_acc),
            self.lr,
            opt(self.elapsed_s)
        )
    }
}

/// Progress callbacks of [`fit`].
pub enum FitEvent<'a> {
    Step(&'a MetricRow),
    /// After each completed epoch (1-based).
    EpochEnd(usize, &'a Model),
}

/// Trains the configured method on `train` from a fresh initialisation.
pub fn fit(
    cfg: &TrainConfig,
    train: &ImageDataset,
    mut observe: impl FnMut(FitEvent<'_>) -> Result<()>,
) -> Result<Model> {
    cfg.validate()?;
    let classes = train.num_classes().unwrap_or(0);
    if cfg.method == Method::Supervised && train.labels().is_none() {
        return Err(Error::invalid("supervised training needs a labelled dataset"));
    }
    if train.len() < 2 {
        return Err(Error::invalid(format!("cannot train on {} images", train.len())));
    }
    let revealed = match (cfg.method.pair_head(), train.labels()) {
        (Some(_), Some(labels)) if cfg.label_fraction > 0.0 => {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut stream(&[cfg.seed, REVEAL]));
            let keep = (cfg.label_fraction * train.len() as f64).round() as usize;
            let mut r = vec![None; train.len()];
            for &i in &order[..keep] {
                r[i] = Some(labels[i]);
            }
            Some(r)
        }
        _ => None,
    };
    let data = TrainData { set: train, revealed };
    let mut model = Model::init(cfg, classes);
    let start = Instant::now();
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let lr = model.begin_epoch(cfg, epoch);
        if !matches!(model, Model::Random { .. }) {
            for (b, batch) in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STEP, epoch as u64, b as u64]));
                let Some((loss, pair_acc)) = model.step(cfg, &data, batch, &mut rng)? else {
                    break;
                };
                global += 1;
                let row = MetricRow {
                    epoch: epoch + 1,
                    step: global,
                    loss,
                    pair_acc,
                    lr,
                    elapsed_s: cfg.log_elapsed.then(|| start.elapsed().as_secs_f64()),
                };
                observe(FitEvent::Step(&row))?;
            }
        }
        observe(FitEvent::EpochEnd(epoch + 1, &model))?;
    }
    Ok(model)
}

/// Files produced by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub rows: Vec<MetricRow>,
}

/// Runs [`fit`] on the training split and writes `metrics.csv`, periodic
/// `checkpoint_epochNNNN.ssrr` files and the final `checkpoint.ssrr` into the
/// output directory.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_set, _) = load_split(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let metrics = cfg.out_dir.join("metrics.csv");
    let mut out = BufWriter::new(fs::File::create(&metrics)?);
    writeln!(out, "{METRICS_HEADER}")?;
    let mut rows = Vec::new();
    let model = fit(cfg, &train_set, |event| {
        match event {
            FitEvent::Step(row) => {
                writeln!(out, "{}", row.to_csv())?;
                rows.push(row.clone());
            }
            FitEvent::EpochEnd(epoch, model) => {
                out.flush()?;
                if epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs {
                    let path = cfg.out_dir.join(format!("checkpoint_epoch{epoch:04}.ssrr"));
                    model.to_checkpoint(cfg, epoch).save(path)?;
                }
            }
        }
        Ok(())
    })?;
    out.flush()?;
    let checkpoint = cfg.out_dir.join(FINAL_CHECKPOINT);
    model.to_checkpoint(cfg, cfg.epochs).save(&checkpoint)?;
    Ok(TrainOutcome {
        model,
        metrics,
        checkpoint,
        rows,
    })
}

/// What [`evaluate`] should compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalRequest {
    pub linear: bool,
    pub knn: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(metric, value)` rows as written to `eval.csv`.
    pub metrics: Vec<(String, f64)>,
    pub confusion: Vec<Vec<f64>>,
    pub class_names: Vec<String>,
}

impl EvalReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|(m, _)| m == metric).map(|&(_, v)| v)
    }

    pub fn eval_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (m, v) in &self.metrics {
            let _ = writeln!(s, "{m},{v}");
        }
        s
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("class");
        for name in &self.class_names {
            let _ = write!(s, ",{name}");
        }
        s.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Probe settings of a config.
pub fn probe_options(cfg: &TrainConfig) -> ProbeOptions {
    ProbeOptions {
        epochs: cfg.probe_epochs,
        lr: cfg.probe_lr,
        momentum: cfg.momentum,
        batch_size: cfg.probe_batch,
        seed: cfg.seed,
        ..ProbeOptions::default()
    }
}

/// Evaluates a trained model on the configured split.
///
/// The linear probe is fit on the training half and scored on the test half.
/// Retrieval queries every test image against the rest of the test half. The
/// confusion matrix comes from retrieval when it runs, otherwise from the
/// probe's predictions.
pub fn evaluate_model(cfg: &TrainConfig, model: &Model, request: EvalRequest) -> Result<EvalReport> {
    let (train_set, test_set) = load_split(cfg)?;
    let classes = test_set
        .num_classes()
        .ok_or_else(|| Error::invalid("evaluation needs a labelled dataset"))?;
    let test_labels = test_set.labels().expect("labelled").to_vec();
    let class_names: Vec<String> = match test_set.class_names() {
        Some(n) => n.to_vec(),
        None => (0..classes).map(|c| c.to_string()).collect(),
    };
    let backbone = model.backbone();
    let mut metrics = Vec::new();
    let mut confusion = None;
    if request.linear {
        let report = linear_eval_report(backbone, &train_set, &test_set, &probe_options(cfg))?;
        metrics.push(("linear_top1".to_string(), report.accuracy));
        confusion = Some(prediction_confusion(&test_labels, &report.predictions, classes));
    }
    if let Some(k) = request.knn {
        let reps = backbone.embed(&test_set.to_tensor()?, 250)?;
        let own: Vec<usize> = (0..test_set.len()).collect();
        let r = knn_retrieval(&reps, &test_labels, &reps, &test_labels, k, Some(&own))?;
        metrics.push((format!("knn_top{k}"), r.accuracy));
        let mut c = r.confusion;
        c.resize(classes, vec![0.0; classes]);
        confusion = Some(c);
    }
    if let Model::Rotation { classifier, .. } = model {
        let images: Vec<FloatImage> = (0..test_set.len()).map(|i| test_set.rgb_float_image(i)).collect();
        metrics.push((
            "rotation_accuracy".to_string(),
            rotation_accuracy(backbone, classifier, &images)?,
        ));
    }
    Ok(EvalReport {
        metrics,
        confusion: confusion.unwrap_or_default(),
        class_names,
    })
}

/// Loads `checkpoint`, evaluates it and writes `eval.csv` and `confusion.csv`
/// into the config's output directory.
pub fn evaluate(cfg: &TrainConfig, checkpoint: &Path, request: EvalRequest) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = Model::from_checkpoint(cfg, &ckpt)?;
    let report = evaluate_model(cfg, &model, request)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("eval.csv"), report.eval_csv())?;
    fs::write(cfg.out_dir.join("confusion.csv"), report.confusion_csv())?;
    Ok(report)
}
