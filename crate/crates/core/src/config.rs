//! Run configuration: flat UTF-8 `key = value` lines, `#` starts a comment.
//!
//! ```text
//! method = relational      # relational | rotation | supervised | ablation_a | ablation_b | random
//! dataset = synth          # synth | cifar10 | idx
//! synth_n = 2500
//! batch_size = 32
//! k = 8
//! epochs = 30
//! ```
//!
//! Every key is optional; see [`TrainConfig::default`] for the defaults and
//! [`TrainConfig::to_text`] for the full schema.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentPolicy;
use crate::baselines::AblationHeadKind;
use crate::error::{Error, Result};
use crate::relational::AggregationMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Relational,
    Rotation,
    Supervised,
    /// Dot-product pair head.
    AblationA,
    /// Encoder + dot-product pair head.
    AblationB,
    /// Untrained backbone.
    Random,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Relational,
        Method::Rotation,
        Method::Supervised,
        Method::AblationA,
        Method::AblationB,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Relational => "relational",
            Method::Rotation => "rotation",
            Method::Supervised => "supervised",
            Method::AblationA => "ablation_a",
            Method::AblationB => "ablation_b",
            Method::Random => "random",
        }
    }

    /// Pair head used by the pair-based methods.
    pub fn pair_head(self) -> Option<AblationHeadKind> {
        match self {
            Method::Relational => Some(AblationHeadKind::RelationModule),
            Method::AblationA => Some(AblationHeadKind::DotProduct),
            Method::AblationB => Some(AblationHeadKind::EncoderDotProduct),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Synth {
        n: usize,
        classes: usize,
        size: usize,
        seed: u64,
    },
    Cifar10 {
        files: Vec<PathBuf>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

/// Named augmentation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentPreset {
    /// Flip, crop-resize, grayscale and colour jitter at their usual strengths.
    Full,
    /// Flip and a mild crop only.
    FlipCrop,
    Identity,
}

impl AugmentPreset {
    pub fn name(self) -> &'static str {
        match self {
            AugmentPreset::Full => "full",
            AugmentPreset::FlipCrop => "flip_crop",
            AugmentPreset::Identity => "identity",
        }
    }

    pub fn policy(self) -> AugmentPolicy {
        match self {
            AugmentPreset::Full => AugmentPolicy::default(),
            AugmentPreset::FlipCrop => AugmentPolicy::flip_crop(),
            AugmentPreset::Identity => AugmentPolicy::identity(),
        }
    }
}

impl FromStr for AugmentPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [AugmentPreset::Full, AugmentPreset::FlipCrop, AugmentPreset::Identity]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("augment", format!("unknown preset `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub dataset: DatasetSpec,
    /// Seed of the 80/20 train/test split.
    pub split_seed: u64,
    /// Mini-batch size `M`.
    pub batch_size: usize,
    /// Augmentations per image `K`.
    pub k: usize,
    pub gamma: f32,
    /// Backbone learning rate α.
    pub lr_backbone: f32,
    /// Head learning rate β.
    pub lr_head: f32,
    /// Initial SGD learning rate of the supervised baseline.
    pub lr_supervised: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub seed: u64,
    pub aggregation: AggregationMode,
    /// Share of training labels revealed to pair construction.
    pub label_fraction: f64,
    pub avoid_label_collisions: bool,
    /// `None` picks the method's default preset.
    pub augment: Option<AugmentPreset>,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    /// Fill the `elapsed_s` metrics column (makes the file timing-dependent).
    pub log_elapsed: bool,
    pub probe_epochs: usize,
    pub probe_lr: f32,
    pub probe_batch: usize,
    pub knn: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Relational,
            dataset: DatasetSpec::Synth {
                n: 2500,
                classes: 4,
                size: 32,
                seed: 0,
            },
            split_seed: 0,
            batch_size: 64,
            k: 4,
            gamma: 2.0,
            lr_backbone: 1e-3,
            lr_head: 1e-3,
            lr_supervised: 0.1,
            momentum: 0.9,
            epochs: 200,
            seed: 0,
            aggregation: AggregationMode::Cat,
            label_fraction: 0.0,
            avoid_label_collisions: false,
            augment: None,
            out_dir: PathBuf::from("runs"),
            checkpoint_every: 10,
            log_elapsed: false,
            probe_epochs: 100,
            probe_lr: 0.1,
            probe_batch: 128,
            knn: 10,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        let mut dataset: Option<String> = None;
        let mut synth: [Option<String>; 4] = Default::default();
        let mut cifar: Option<String> = None;
        let mut idx: [Option<String>; 2] = Default::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "expected `key = value`"))?;
            if seen.iter().any(|s| s == key) {
                return Err(Error::config(key, "given more than once"));
            }
            seen.push(key.to_string());
            match key {
                "method" => cfg.method = value.parse()?,
                "dataset" => dataset = Some(value.to_string()),
                "synth_n" => synth[0] = Some(value.to_string()),
                "synth_classes" => synth[1] = Some(value.to_string()),
                "synth_size" => synth[2] = Some(value.to_string()),
                "synth_seed" => synth[3] = Some(value.to_string()),
                "cifar_files" => cifar = Some(value.to_string()),
                "idx_images" => idx[0] = Some(value.to_string()),
                "idx_labels" => idx[1] = Some(value.to_string()),
                "split_seed" => cfg.split_seed = parse_value(key, value)?,
                "batch_size" => cfg.batch_size = parse_value(key, value)?,
                "k" => cfg.k = parse_value(key, value)?,
                "gamma" => cfg.gamma = parse_value(key, value)?,
                "lr_backbone" => cfg.lr_backbone = parse_value(key, value)?,
                "lr_head" => cfg.lr_head = parse_value(key, value)?,
                "lr_supervised" => cfg.lr_supervised = parse_value(key, value)?,
                "momentum" => cfg.momentum = parse_value(key, value)?,
                "epochs" => cfg.epochs = parse_value(key, value)?,
                "seed" => cfg.seed = parse_value(key, value)?,
                "aggregation" => {
                    cfg.aggregation = value.parse().map_err(|e: Error| Error::config(key, e.to_string()))?
                }
                "label_fraction" => cfg.label_fraction = parse_value(key, value)?,
                "avoid_label_collisions" => cfg.avoid_label_collisions = parse_value(key, value)?,
                "augment" => cfg.augment = if value == "auto" { None } else { Some(value.parse()?) },
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "checkpoint_every" => cfg.checkpoint_every = parse_value(key, value)?,
                "log_elapsed" => cfg.log_elapsed = parse_value(key, value)?,
                "probe_epochs" => cfg.probe_epochs = parse_value(key, value)?,
                "probe_lr" => cfg.probe_lr = parse_value(key, value)?,
                "probe_batch" => cfg.probe_batch = parse_value(key, value)?,
                "knn" => cfg.knn = parse_value(key, value)?,
                _ => return Err(Error::config(key, "unknown key")),
            }
        }

        cfg.dataset = match dataset.as_deref().unwrap_or("synth") {
            "synth" => {
                let DatasetSpec::Synth {
                    mut n,
                    mut classes,
                    mut size,
                    mut seed,
                } = cfg.dataset
                else {
                    unreachable!("default dataset is synthetic")
                };
                let keys = ["synth_n", "synth_classes", "synth_size", "synth_seed"];
                if let Some(v) = &synth[0] {
                    n = parse_value(keys[0], v)?;
                }
                if let Some(v) = &synth[1] {
                    classes = parse_value(keys[1], v)?;
                }
                if let Some(v) = &synth[2] {
                    size = parse_value(keys[2], v)?;
                }
                if let Some(v) = &synth[3] {
                    seed = parse_value(keys[3], v)?;
                }
                DatasetSpec::Synth { n, classes, size, seed }
            }
            "cifar10" => {
                let files = cifar.ok_or_else(|| Error::config("cifar_files", "required for dataset = cifar10"))?;
                DatasetSpec::Cifar10 {
                    files: files
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(PathBuf::from)
                        .collect(),
                }
            }
            "idx" => {
                let [images, labels] = idx;
                DatasetSpec::Idx {
                    images: images
                        .map(PathBuf::from)
                        .ok_or_else(|| Error::config("idx_images", "required for dataset = idx"))?,
                    labels: labels
                        .map(PathBuf::from)
                        .ok_or_else(|| Error::config("idx_labels", "required for dataset = idx"))?,
                }
            }
            other => return Err(Error::config("dataset", format!("unknown dataset `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = self.method.pair_head().is_some();
        if pairs && self.k < 2 {
            return Err(Error::config("k", format!("pair-based methods need k >= 2, got {}", self.k)));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma", format!("must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return Err(Error::config("label_fraction", "must lie in [0, 1]"));
        }
        for (key, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_head", self.lr_head),
            ("lr_supervised", self.lr_supervised),
            ("probe_lr", self.probe_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be positive"));
        }
        if self.probe_batch == 0 {
            return Err(Error::config("probe_batch", "must be positive"));
        }
        if self.knn == 0 {
            return Err(Error::config("knn", "must be positive"));
        }
        match &self.dataset {
            DatasetSpec::Synth { n, classes, size, .. } => {
                if !(2..=8).contains(classes) {
                    return Err(Error::config("synth_classes", "must lie in 2..=8"));
                }
                if *size < 16 {
                    return Err(Error::config("synth_size", "must be at least 16"));
                }
                if *n < 5 {
                    return Err(Error::config("synth_n", "must be at least 5"));
                }
            }
            DatasetSpec::Cifar10 { files } if files.is_empty() => {
                return Err(Error::config("cifar_files", "no files listed"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Augmentation used by the configured method.
    pub fn augment_policy(&self) -> AugmentPolicy {
        let preset = self.augment.unwrap_or(match self.method {
            Method::Supervised | Method::Rotation => AugmentPreset::FlipCrop,
            _ => AugmentPreset::Full,
        });
        preset.policy()
    }

    /// Canonical text form; [`TrainConfig::parse`] of the result yields an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut lines = vec![format!("method = {}", self.method)];
        match &self.dataset {
            DatasetSpec::Synth { n, classes, size, seed } => {
                lines.push("dataset = synth".into());
                lines.push(format!("synth_n = {n}"));
                lines.push(format!("synth_classes = {classes}"));
                lines.push(format!("synth_size = {size}"));
                lines.push(format!("synth_seed = {seed}"));
            }
            DatasetSpec::Cifar10 { files } => {
                lines.push("dataset = cifar10".into());
                let names: Vec<String> = files.iter().map(|f| f.display().to_string()).collect();
                lines.push(format!("cifar_files = {}", names.join(",")));
            }
            DatasetSpec::Idx { images, labels } => {
                lines.push("dataset = idx".into());
                lines.push(format!("idx_images = {}", images.display()));
                lines.push(format!("idx_labels = {}", labels.display()));
            }
        }
        lines.extend([
            format!("split_seed = {}", self.split_seed),
            format!("batch_size = {}", self.batch_size),
            format!("k = {}", self.k),
            format!("gamma = {}", self.gamma),
            format!("lr_backbone = {}", self.lr_backbone),
            format!("lr_head = {}", self.lr_head),
            format!("lr_supervised = {}", self.lr_supervised),
            format!("momentum = {}", self.momentum),
            format!("epochs = {}", self.epochs),
            format!("seed = {}", self.seed),
            format!("aggregation = {}", self.aggregation),
            format!("label_fraction = {}", self.label_fraction),
            format!("avoid_label_collisions = {}", self.avoid_label_collisions),
            format!("augment = {}", self.augment.map_or("auto", AugmentPreset::name)),
            format!("out_dir = {}", self.out_dir.display()),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("log_elapsed = {}", self.log_elapsed),
            format!("probe_epochs = {}", self.probe_epochs),
            format!("probe_lr = {}", self.probe_lr),
            format!("probe_batch = {}", self.probe_batch),
            format!("knn = {}", self.knn),
        ]);
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = TrainConfig::parse(
            "# desk run\nmethod = rotation\nbatch_size = 16 # small\nk=3\nsynth_n = 100\naggregation = sum\n",
        )
        .unwrap();
        assert_eq!(cfg.method, Method::Rotation);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.aggregation, AggregationMode::Sum);
        assert!(matches!(cfg.dataset, DatasetSpec::Synth { n: 100, .. }));
    }

    #[test]
    fn errors_name_the_field() {
        let field = |text: &str| match TrainConfig::parse(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(field("k = 1"), "k");
        assert_eq!(field("gamma = -1"), "gamma");
        assert_eq!(field("label_fraction = 1.5"), "label_fraction");
        assert_eq!(field("batch_size = many"), "batch_size");
        assert_eq!(field("colour = red"), "colour");
        assert_eq!(field("method = magic"), "method");
        assert_eq!(field("dataset = cifar10"), "cifar_files");
        assert_eq!(field("k = 2\nk = 3"), "k");
    }

    #[test]
    fn text_form_round_trips() {
        let mut cfg = TrainConfig::parse("method = ablation_b\nlr_head = 0.0005\nlabel_fraction = 0.25").unwrap();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        cfg.dataset = DatasetSpec::Idx {
            images: "a.idx".into(),
            labels: "b.idx".into(),
        };
        cfg.augment = Some(AugmentPreset::Identity);
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
