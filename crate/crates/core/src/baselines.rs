//! Comparison methods sharing the Conv-4 backbone: dot-product pair heads,
//! rotation prediction, supervised training and the untrained backbone.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_batch, AugmentPolicy};
use crate::backbone::{Conv4Backbone, LinearProbe, REPR_DIM};
use crate::dataio::{to_nchw, FloatImage, ImageDataset};
use crate::error::{Error, Result};
use crate::eval::{linear_eval, ProbeOptions};
use crate::nn::{Mlp, Mode, ParamSet};
use crate::optim::{Optimizer, OptimizerPair};
use crate::relational::{AggregationMode, PairPlan, PairScorer, RelationHead, HEAD_HIDDEN};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Number of rotation classes (0°, 90°, 180°, 270°).
pub const ROTATIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationHeadKind {
    /// `sigmoid(<z_i, z_j>)`, no trainable parameters.
    DotProduct,
    /// `sigmoid(<g(z_i), g(z_j)>)` with a learnable MLP `g`.
    EncoderDotProduct,
    RelationModule,
}

impl AblationHeadKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationHeadKind::DotProduct => "dot_product",
            AblationHeadKind::EncoderDotProduct => "encoder_dot_product",
            AblationHeadKind::RelationModule => "relation_module",
        }
    }
}

impl fmt::Display for AblationHeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationHeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AblationHeadKind::DotProduct,
            AblationHeadKind::EncoderDotProduct,
            AblationHeadKind::RelationModule,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown head kind `{s}`")))
    }
}

/// Row-wise `sigmoid(<a_p, b_p>)` for `[P, d]` operands, shape `[P, 1]`.
fn dot_scores<T: Real>(tape: &mut Tape<T>, z: Var, plan: &PairPlan) -> Result<Var> {
    let left = tape.gather_rows(z, &plan.left_rows)?;
    let right = tape.gather_rows(z, &plan.right_rows)?;
    let prod = tape.mul(left, right)?;
    let dots = tape.sum_rows(prod)?;
    Ok(tape.sigmoid(dots))
}

/// Ablation (a): unnormalised dot product of the two representations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DotProductHead {
    params: ParamSet,
}

impl DotProductHead {
    pub fn new() -> Self {
        Self::default()
    }
}

impl PairScorer for DotProductHead {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn score<T: Real>(&mut self, tape: &mut Tape<T>, _p: &[Var], z: Var, plan: &PairPlan, _mode: Mode) -> Result<Var> {
        dot_scores(tape, z, plan)
    }
}

/// Ablation (b): both representations pass through a shared MLP
/// (64 → 256 → 64, batch norm and leaky-ReLU) before the dot product.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderDotHead {
    pub mlp: Mlp,
}

impl EncoderDotHead {
    pub fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(d, HEAD_HIDDEN, d, rng),
        }
    }
}

impl PairScorer for EncoderDotHead {
    fn params(&self) -> &ParamSet {
        &self.mlp.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.mlp.params
    }

    fn score<T: Real>(&mut self, tape: &mut Tape<T>, p: &[Var], z: Var, plan: &PairPlan, mode: Mode) -> Result<Var> {
        // every row is encoded once, then pairs are gathered
        let g = self.mlp.forward(tape, p, z, mode)?;
        dot_scores(tape, g, plan)
    }
}

/// Any of the three pair heads, so training code can switch at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum PairHead {
    Relation(RelationHead),
    Dot(DotProductHead),
    EncoderDot(EncoderDotHead),
}

impl PairHead {
    pub fn new<R: Rng + ?Sized>(kind: AblationHeadKind, aggregation: AggregationMode, rng: &mut R) -> Self {
        match kind {
            AblationHeadKind::RelationModule => PairHead::Relation(RelationHead::new(REPR_DIM, aggregation, rng)),
            AblationHeadKind::DotProduct => PairHead::Dot(DotProductHead::new()),
            AblationHeadKind::EncoderDotProduct => PairHead::EncoderDot(EncoderDotHead::new(REPR_DIM, rng)),
        }
    }

    pub fn kind(&self) -> AblationHeadKind {
        match self {
            PairHead::Relation(_) => AblationHeadKind::RelationModule,
            PairHead::Dot(_) => AblationHeadKind::DotProduct,
            PairHead::EncoderDot(_) => AblationHeadKind::EncoderDotProduct,
        }
    }

    /// Batch-norm running statistics of the head, if it has any.
    pub fn buffers(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        match self {
            PairHead::Relation(h) => h.mlp.buffers(prefix),
            PairHead::EncoderDot(h) => h.mlp.buffers(prefix),
            PairHead::Dot(_) => Vec::new(),
        }
    }

    pub fn load_buffers(&mut self, named: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
        match self {
            PairHead::Relation(h) => h.mlp.load_buffers(named, prefix),
            PairHead::EncoderDot(h) => h.mlp.load_buffers(named, prefix),
            PairHead::Dot(_) => Ok(()),
        }
    }
}

impl PairScorer for PairHead {
    fn params(&self) -> &ParamSet {
        match self {
            PairHead::Relation(h) => h.params(),
            PairHead::Dot(h) => h.params(),
            PairHead::EncoderDot(h) => h.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            PairHead::Relation(h) => h.params_mut(),
            PairHead::Dot(h) => h.params_mut(),
            PairHead::EncoderDot(h) => h.params_mut(),
        }
    }

    fn score<T: Real>(&mut self, tape: &mut Tape<T>, p: &[Var], z: Var, plan: &PairPlan, mode: Mode) -> Result<Var> {
        match self {
            PairHead::Relation(h) => h.score(tape, p, z, plan, mode),
            PairHead::Dot(h) => h.score(tape, p, z, plan, mode),
            PairHead::EncoderDot(h) => h.score(tape, p, z, plan, mode),
        }
    }
}

/// Inference-mode score of a single pair `(z_i, z_j)`.
pub fn ablation_score(zi: &[f32], zj: &[f32], head: &PairHead) -> Result<f32> {
    if zi.len() != zj.len() {
        return Err(Error::shape("ablation_score", format!("widths {} and {}", zi.len(), zj.len())));
    }
    let mut head = head.clone();
    let mut tape = Tape::<f32>::new();
    let p: Vec<Var> = head.params().tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let mut rows = zi.to_vec();
    rows.extend_from_slice(zj);
    let z = tape.constant(Tensor::new(&[2, zi.len()], rows)?);
    let plan = PairPlan {
        m: 1,
        k: 2,
        left_rows: vec![0],
        right_rows: vec![1],
        targets: vec![1.0],
        provenance: Vec::new(),
    };
    let y = head.score(&mut tape, &p, z, &plan, Mode::Eval)?;
    Ok(tape.value(y).data()[0])
}

/// Rotates an image 90° counter-clockwise: `out[y][x] = in[x][W−1−y]`, so
/// `[[a, b], [c, d]]` becomes `[[b, d], [a, c]]`.
pub fn rotate90(img: &FloatImage) -> Result<FloatImage> {
    let (h, w, c) = (img.height, img.width, img.channels);
    if h != w {
        return Err(Error::shape("rotate90", format!("non-square image {h}×{w}")));
    }
    let mut out = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (x * w + (w - 1 - y)) * c;
            out[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&img.data[src..src + c]);
        }
    }
    FloatImage::new(h, w, c, out)
}

/// Each image at 0°, 90°, 180° and 270° (counter-clockwise), labelled 0..3,
/// image-major.
pub fn rotate_and_label(batch: &[FloatImage]) -> Result<(Vec<FloatImage>, Vec<usize>)> {
    let mut images = Vec::with_capacity(batch.len() * ROTATIONS);
    let mut labels = Vec::with_capacity(batch.len() * ROTATIONS);
    for img in batch {
        let mut cur = img.clone();
        for r in 0..ROTATIONS {
            if r > 0 {
                cur = rotate90(&cur)?;
            }
            images.push(cur.clone());
            labels.push(r);
        }
    }
    Ok((images, labels))
}

/// Cross-entropy step of backbone + linear classifier on `images`.
fn classifier_step<O: Optimizer>(
    images: &[FloatImage],
    labels: &[usize],
    backbone: &mut Conv4Backbone,
    classifier: &mut LinearProbe,
    optim: &mut OptimizerPair<O>,
) -> Result<f32> {
    let x = to_nchw(images)?;
    let mut tape = Tape::<f32>::new();
    let pb = backbone.params.load(&mut tape);
    let pc = classifier.params.load(&mut tape);
    let x = tape.constant(x);
    let z = backbone.forward(&mut tape, &pb, x, Mode::Train)?;
    let logits = classifier.forward(&mut tape, &pc, z)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    tape.backward(loss)?;
    let gb = backbone.params.grads(&tape, &pb);
    let gc = classifier.params.grads(&tape, &pc);
    optim.backbone.step(&mut backbone.params, &gb)?;
    optim.head.step(&mut classifier.params, &gc)?;
    Ok(tape.value(loss).data()[0])
}

/// Rotation-prediction step: each image is augmented once, then expanded to
/// its four rotations.
pub fn rotation_step<O: Optimizer>(
    batch: &[FloatImage],
    backbone: &mut Conv4Backbone,
    classifier: &mut LinearProbe,
    optim: &mut OptimizerPair<O>,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    if classifier.classes() != ROTATIONS {
        return Err(Error::invalid(format!(
            "rotation classifier has {} outputs, expected {ROTATIONS}",
            classifier.classes()
        )));
    }
    let view = augment_batch(batch, policy, 1, rng)?.remove(0);
    let (images, labels) = rotate_and_label(&view)?;
    classifier_step(&images, &labels, backbone, classifier, optim)
}

/// Fraction of rotated copies of `images` whose rotation is predicted
/// correctly, in inference mode.
pub fn rotation_accuracy(backbone: &Conv4Backbone, classifier: &LinearProbe, images: &[FloatImage]) -> Result<f64> {
    let (rotated, labels) = rotate_and_label(images)?;
    let z = backbone.embed(&to_nchw(&rotated)?, 256)?;
    let hits = classifier
        .predict(&z)
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Supervised step on labelled images with one augmented view each.
pub fn supervised_step<O: Optimizer>(
    batch: &[FloatImage],
    labels: Option<&[usize]>,
    backbone: &mut Conv4Backbone,
    classifier: &mut LinearProbe,
    optim: &mut OptimizerPair<O>,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    let labels = labels.ok_or_else(|| Error::invalid("supervised training needs labels"))?;
    if labels.len() != batch.len() {
        return Err(Error::invalid(format!("{} labels for {} images", labels.len(), batch.len())));
    }
    let view = augment_batch(batch, policy, 1, rng)?.remove(0);
    classifier_step(&view, labels, backbone, classifier, optim)
}

/// Linear-evaluation accuracy of a freshly initialised, untrained backbone.
pub fn random_weights_probe(
    seed: u64,
    train: &ImageDataset,
    test: &ImageDataset,
    options: &ProbeOptions,
) -> Result<f64> {
    linear_eval(&Conv4Backbone::new(seed), train, test, options)
}
