//! Relational reasoning as a pretext task.
//!
//! A mini-batch of `M` images is augmented `K` times and encoded by the
//! backbone. For every ordered pair of views `i < j`, each representation of
//! view `i` is paired with the same instance in view `j` (target 1) and with a
//! different, randomly drawn instance in view `j` (target 0). The pairs are
//! aggregated, scored by the relation head, and trained with a focal binary
//! cross-entropy. With no labels this yields exactly `M·(K² − K)` pairs, half
//! of them positive.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_batch, AugmentPolicy};
use crate::backbone::{Conv4Backbone, REPR_DIM};
use crate::dataio::{to_nchw, FloatImage};
use crate::error::{Error, Result};
use crate::nn::{Mlp, Mode, ParamSet};
use crate::optim::{Optimizer, OptimizerPair};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Hidden width of the relation head.
pub const HEAD_HIDDEN: usize = 256;

/// How two representations are combined before scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggregationMode {
    Sum,
    Mean,
    Max,
    /// `(z_i, z_j)` in argument order; not commutative.
    Cat,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 4] = [
        AggregationMode::Sum,
        AggregationMode::Mean,
        AggregationMode::Max,
        AggregationMode::Cat,
    ];

    pub fn output_width(self, d: usize) -> usize {
        match self {
            AggregationMode::Cat => 2 * d,
            _ => d,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AggregationMode::Sum => "sum",
            AggregationMode::Mean => "mean",
            AggregationMode::Max => "max",
            AggregationMode::Cat => "cat",
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggregationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown aggregation `{s}` (sum, mean, max, cat)")))
    }
}

/// Aggregates two equal-width vectors.
pub fn aggregate(zi: &[f32], zj: &[f32], mode: AggregationMode) -> Result<Vec<f32>> {
    if zi.len() != zj.len() {
        return Err(Error::shape("aggregate", format!("widths {} and {}", zi.len(), zj.len())));
    }
    let pairs = zi.iter().zip(zj);
    Ok(match mode {
        AggregationMode::Sum => pairs.map(|(a, b)| a + b).collect(),
        AggregationMode::Mean => pairs.map(|(a, b)| (a + b) * 0.5).collect(),
        AggregationMode::Max => pairs.map(|(a, b)| a.max(*b)).collect(),
        AggregationMode::Cat => zi.iter().chain(zj).copied().collect(),
    })
}

/// Row-wise aggregation of two `[P, d]` matrices on the tape.
pub fn aggregate_on_tape<T: Real>(tape: &mut Tape<T>, left: Var, right: Var, mode: AggregationMode) -> Result<Var> {
    match mode {
        AggregationMode::Sum => tape.add(left, right),
        AggregationMode::Mean => {
            let s = tape.add(left, right)?;
            Ok(tape.scale(s, T::lit(0.5)))
        }
        AggregationMode::Max => tape.maximum(left, right),
        AggregationMode::Cat => {
            if tape.shape(left) != tape.shape(right) {
                return Err(Error::shape(
                    "aggregate",
                    format!("{:?} and {:?}", tape.shape(left), tape.shape(right)),
                ));
            }
            tape.concat(&[left, right])
        }
    }
}

/// Draws, for each position `m`, a partner index uniformly from all other
/// positions. Partners may repeat across positions; no position maps to itself.
pub fn derangement_shuffle<R: Rng + ?Sized>(m_count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m_count < 2 {
        return Err(Error::invalid(format!("derangement_shuffle needs at least 2 items, got {m_count}")));
    }
    Ok((0..m_count)
        .map(|m| {
            let r = rng.gen_range(0..m_count - 1);
            if r >= m {
                r + 1
            } else {
                r
            }
        })
        .collect())
}

/// Where a pair came from: views `i < j` and instances `n` (in view `i`) and
/// `n_prime` (in view `j`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairProvenance {
    pub view_i: usize,
    pub view_j: usize,
    pub n: usize,
    pub n_prime: usize,
}

/// Label-aware pairing options.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairOptions {
    /// Per-instance class when known.
    pub labels: Option<Vec<Option<usize>>>,
    /// Share of positive slots (of all positives) to fill with distinct
    /// same-class instances, limited by how many slots are eligible.
    pub cross_positive_fraction: f64,
    /// Keep negatives from pairing two instances known to share a class.
    pub avoid_label_collisions: bool,
}

/// Pair indices and targets for one mini-batch, independent of the
/// representation values. Rows index the view-major stack of all `K·M`
/// representations: row `k·M + n` is instance `n` in view `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairPlan {
    pub m: usize,
    pub k: usize,
    pub left_rows: Vec<usize>,
    pub right_rows: Vec<usize>,
    pub targets: Vec<f32>,
    pub provenance: Vec<PairProvenance>,
}

impl PairPlan {
    pub fn build<R: Rng + ?Sized>(m: usize, k: usize, options: &PairOptions, rng: &mut R) -> Result<Self> {
        if k < 2 || m < 2 {
            return Err(Error::invalid(format!("pairing needs K >= 2 and M >= 2, got K={k}, M={m}")));
        }
        let labels = options.labels.as_deref();
        if let Some(l) = labels {
            if l.len() != m {
                return Err(Error::invalid(format!("{} labels for a batch of {m}", l.len())));
            }
        }
        if !(0.0..=1.0).contains(&options.cross_positive_fraction) {
            return Err(Error::invalid("cross_positive_fraction must lie in [0, 1]"));
        }
        let p = m * (k * k - k);
        let mut plan = Self {
            m,
            k,
            left_rows: Vec::with_capacity(p),
            right_rows: Vec::with_capacity(p),
            targets: Vec::with_capacity(p),
            provenance: Vec::with_capacity(p),
        };
        let same_class = |a: usize, b: usize| match labels {
            Some(l) => matches!((l[a], l[b]), (Some(x), Some(y)) if x == y),
            None => false,
        };
        for i in 0..k - 1 {
            for j in i + 1..k {
                for n in 0..m {
                    plan.push(i, j, n, n, 1.0);
                }
                let mut partner = derangement_shuffle(m, rng)?;
                if options.avoid_label_collisions && labels.is_some() {
                    for (n, slot) in partner.iter_mut().enumerate() {
                        if !same_class(n, *slot) {
                            continue;
                        }
                        let allowed: Vec<usize> = (0..m).filter(|&c| c != n && !same_class(n, c)).collect();
                        if !allowed.is_empty() {
                            *slot = allowed[rng.gen_range(0..allowed.len())];
                        }
                    }
                }
                for (n, &np) in partner.iter().enumerate() {
                    plan.push(i, j, n, np, 0.0);
                }
            }
        }
        if let Some(l) = labels {
            plan.substitute_positives(l, options.cross_positive_fraction, rng);
        }
        Ok(plan)
    }

    fn push(&mut self, i: usize, j: usize, n: usize, n_prime: usize, t: f32) {
        self.left_rows.push(i * self.m + n);
        self.right_rows.push(j * self.m + n_prime);
        self.targets.push(t);
        self.provenance.push(PairProvenance {
            view_i: i,
            view_j: j,
            n,
            n_prime,
        });
    }

    /// Replaces a random subset of same-instance positives with pairs of
    /// distinct labelled instances of the same class.
    fn substitute_positives<R: Rng + ?Sized>(&mut self, labels: &[Option<usize>], fraction: f64, rng: &mut R) {
        let mates: Vec<Vec<usize>> = (0..self.m)
            .map(|n| match labels[n] {
                Some(c) => (0..self.m).filter(|&o| o != n && labels[o] == Some(c)).collect(),
                None => Vec::new(),
            })
            .collect();
        let eligible: Vec<usize> = (0..self.len())
            .filter(|&p| self.targets[p] == 1.0 && !mates[self.provenance[p].n].is_empty())
            .collect();
        let positives = self.len() / 2;
        let want = ((fraction * positives as f64).round() as usize).min(eligible.len());
        if want == 0 {
            return;
        }
        let mut chosen: Vec<usize> = sample(rng, eligible.len(), want).into_iter().map(|i| eligible[i]).collect();
        chosen.sort_unstable();
        for p in chosen {
            let prov = &mut self.provenance[p];
            let options = &mates[prov.n];
            let np = options[rng.gen_range(0..options.len())];
            prov.n_prime = np;
            self.right_rows[p] = prov.view_j * self.m + np;
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Aggregated pairs with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    /// `[P, d']`.
    pub features: Tensor<f32>,
    pub targets: Vec<f32>,
    pub provenance: Vec<PairProvenance>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Builds the aggregated pair set from `K` view batches of `[M, d]`
/// representations.
pub fn build_pairs<R: Rng + ?Sized>(
    views: &[Tensor<f32>],
    mode: AggregationMode,
    options: &PairOptions,
    rng: &mut R,
) -> Result<PairSet> {
    let first = views.first().ok_or_else(|| Error::invalid("build_pairs needs at least two views"))?;
    let (m, d) = match *first.shape() {
        [m, d] => (m, d),
        ref s => return Err(Error::shape("build_pairs", format!("expected [M, d], got {s:?}"))),
    };
    if let Some(bad) = views.iter().find(|v| v.shape() != first.shape()) {
        return Err(Error::shape("build_pairs", format!("{:?} and {:?}", first.shape(), bad.shape())));
    }
    let plan = PairPlan::build(m, views.len(), options, rng)?;
    let row = |r: usize| views[r / m].row(r % m);
    let mut data = Vec::with_capacity(plan.len() * mode.output_width(d));
    for (&l, &r) in plan.left_rows.iter().zip(&plan.right_rows) {
        data.extend(aggregate(row(l), row(r), mode)?);
    }
    Ok(PairSet {
        features: Tensor::new(&[plan.len(), mode.output_width(d)], data)?,
        targets: plan.targets,
        provenance: plan.provenance,
    })
}

/// Scores pairs of representations drawn from a stacked `[K·M, d]` matrix.
pub trait PairScorer {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Relation scores in `[0, 1]`, shape `[P, 1]`.
    fn score<T: Real>(&mut self, tape: &mut Tape<T>, p: &[Var], z: Var, plan: &PairPlan, mode: Mode) -> Result<Var>;
}

/// MLP relation module: aggregate → linear(d'→256) → batch norm →
/// leaky-ReLU → linear(256→1) → sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationHead {
    pub mlp: Mlp,
    pub aggregation: AggregationMode,
}

impl RelationHead {
    /// Head for `d`-wide representations. Fan-in uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(d: usize, aggregation: AggregationMode, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(aggregation.output_width(d), HEAD_HIDDEN, 1, rng),
            aggregation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.mlp.input_width()
    }

    /// Scores already-aggregated `[P, d']` features.
    pub fn forward<T: Real>(&mut self, tape: &mut Tape<T>, p: &[Var], features: Var, mode: Mode) -> Result<Var> {
        let logits = self.mlp.forward(tape, p, features, mode)?;
        Ok(tape.sigmoid(logits))
    }
}

impl PairScorer for RelationHead {
    fn params(&self) -> &ParamSet {
        &self.mlp.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.mlp.params
    }

    fn score<T: Real>(&mut self, tape: &mut Tape<T>, p: &[Var], z: Var, plan: &PairPlan, mode: Mode) -> Result<Var> {
        let left = tape.gather_rows(z, &plan.left_rows)?;
        let right = tape.gather_rows(z, &plan.right_rows)?;
        let features = aggregate_on_tape(tape, left, right, self.aggregation)?;
        self.forward(tape, p, features, mode)
    }
}

/// Relation scores of an aggregated pair set.
pub fn relation_score(pairs: &PairSet, head: &mut RelationHead, mode: Mode) -> Result<Vec<f32>> {
    let width = pairs.features.shape()[1];
    if width != head.input_width() {
        return Err(Error::shape(
            "relation_score",
            format!("features of width {width} for a head expecting {}", head.input_width()),
        ));
    }
    let mut tape = Tape::<f32>::new();
    let p: Vec<Var> = head.mlp.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let x = tape.constant(pairs.features.clone());
    let y = head.forward(&mut tape, &p, x, mode)?;
    Ok(tape.value(y).data().to_vec())
}

/// Focal binary cross-entropy, averaged over pairs:
/// `(1/P)·Σ −w·[t·ln y + (1−t)·ln(1−y)]` with `w = ½·[(1−t)·y + t·(1−y)]^γ`.
/// Scores are clamped to `[1e-7, 1 − 1e-7]`.
pub fn focal_bce(y: &[f64], t: &[f64], gamma: f64) -> Result<f64> {
    if gamma < 0.0 || gamma.is_nan() {
        return Err(Error::invalid(format!("focal_bce: gamma must be >= 0, got {gamma}")));
    }
    if y.len() != t.len() || y.is_empty() {
        return Err(Error::shape("focal_bce", format!("{} scores and {} targets", y.len(), t.len())));
    }
    let total: f64 = y
        .iter()
        .zip(t)
        .map(|(&yi, &ti)| crate::tensor::focal_term(yi, ti, gamma).0)
        .sum();
    Ok(total / y.len() as f64)
}

/// Fraction of pairs where the rounded score equals the target.
pub fn pair_accuracy(y: &[f32], t: &[f32]) -> f64 {
    let hits = y
        .iter()
        .zip(t)
        .filter(|(&yi, &ti)| (if yi >= 0.5 { 1.0 } else { 0.0 }) == ti)
        .count();
    hits as f64 / y.len().max(1) as f64
}

/// Per-step settings of pair-based training.
#[derive(Clone, Debug)]
pub struct StepConfig {
    pub k: usize,
    pub gamma: f32,
    pub policy: AugmentPolicy,
    pub pair_options: PairOptions,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f32,
    pub pair_acc: f64,
}

/// One optimisation step: augment `K` times, encode, pair, score, focal BCE,
/// backward, then update the backbone and the head.
pub fn training_step<S: PairScorer, O: Optimizer>(
    batch: &[FloatImage],
    backbone: &mut Conv4Backbone,
    scorer: &mut S,
    optim: &mut OptimizerPair<O>,
    cfg: &StepConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let m = batch.len();
    let views = augment_batch(batch, &cfg.policy, cfg.k, rng)?;
    let stacked: Vec<FloatImage> = views.into_iter().flatten().collect();
    let x = to_nchw(&stacked)?;

    let mut tape = Tape::<f32>::new();
    let pb = backbone.params.load(&mut tape);
    let ph = scorer.params().load(&mut tape);
    let x = tape.constant(x);
    let z = backbone.forward(&mut tape, &pb, x, Mode::Train)?;
    debug_assert_eq!(tape.shape(z), &[cfg.k * m, REPR_DIM]);
    let plan = PairPlan::build(m, cfg.k, &cfg.pair_options, rng)?;
    let y = scorer.score(&mut tape, &ph, z, &plan, Mode::Train)?;
    let loss = tape.focal_bce(y, &plan.targets, cfg.gamma)?;
    tape.backward(loss)?;

    let gb = backbone.params.grads(&tape, &pb);
    let gh = scorer.params().grads(&tape, &ph);
    optim.backbone.step(&mut backbone.params, &gb)?;
    optim.head.step(scorer.params_mut(), &gh)?;
    Ok(StepOutcome {
        loss: tape.value(loss).data()[0],
        pair_acc: pair_accuracy(tape.value(y).data(), &plan.targets),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn aggregation_definitions() {
        let (a, b) = ([1.0, 2.0], [3.0, 4.0]);
        assert_eq!(aggregate(&a, &b, AggregationMode::Sum).unwrap(), vec![4.0, 6.0]);
        assert_eq!(aggregate(&a, &b, AggregationMode::Mean).unwrap(), vec![2.0, 3.0]);
        assert_eq!(aggregate(&a, &b, AggregationMode::Max).unwrap(), vec![3.0, 4.0]);
        assert_eq!(aggregate(&a, &b, AggregationMode::Cat).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(aggregate(&a, &[1.0], AggregationMode::Sum).is_err());
    }

    #[test]
    fn shuffle_with_two_items_swaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(derangement_shuffle(2, &mut rng).unwrap(), vec![1, 0]);
        }
        assert!(derangement_shuffle(1, &mut rng).is_err());
    }

    #[test]
    fn pair_counts_from_the_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opts = PairOptions::default();
        assert_eq!(PairPlan::build(64, 32, &opts, &mut rng).unwrap().len(), 63_488);
        assert_eq!(PairPlan::build(64, 16, &opts, &mut rng).unwrap().len(), 15_360);
        let small = PairPlan::build(10, 2, &opts, &mut rng).unwrap();
        assert_eq!(small.len(), 20);
        assert_eq!(small.targets.iter().filter(|&&t| t == 1.0).count(), 10);
    }

    #[test]
    fn focal_bce_substitutions() {
        let ln2 = std::f64::consts::LN_2;
        assert!((focal_bce(&[0.5], &[1.0], 0.0).unwrap() - 0.5 * ln2).abs() < 1e-12);
        assert!((focal_bce(&[0.5], &[1.0], 2.0).unwrap() - 0.125 * ln2).abs() < 1e-12);
        assert!(focal_bce(&[1.0, 0.0], &[1.0, 0.0], 2.0).unwrap() < 1e-9);
        assert!(focal_bce(&[0.5], &[1.0], -1.0).is_err());
    }

    #[test]
    fn zero_input_head_scores_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = RelationHead::new(4, AggregationMode::Cat, &mut rng);
        let pairs = PairSet {
            features: Tensor::zeros(&[3, 8]),
            targets: vec![0.0; 3],
            provenance: Vec::new(),
        };
        for mode in [Mode::Train, Mode::Eval] {
            assert!(relation_score(&pairs, &mut head, mode).unwrap().iter().all(|&y| y == 0.5));
        }
        let wrong = PairSet {
            features: Tensor::zeros(&[3, 4]),
            ..pairs
        };
        assert!(relation_score(&wrong, &mut head, Mode::Eval).is_err());
    }

    #[test]
    fn semi_supervised_positives_keep_the_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<Option<usize>> = (0..8).map(|n| if n < 6 { Some(n % 2) } else { None }).collect();
        let opts = PairOptions {
            labels: Some(labels.clone()),
            cross_positive_fraction: 0.5,
            avoid_label_collisions: true,
        };
        let plan = PairPlan::build(8, 4, &opts, &mut rng).unwrap();
        assert_eq!(plan.len(), 8 * 12);
        let positives: Vec<_> = plan.provenance.iter().zip(&plan.targets).filter(|(_, &t)| t == 1.0).collect();
        assert_eq!(positives.len(), plan.len() / 2);
        let crossed = positives.iter().filter(|(p, _)| p.n != p.n_prime).count();
        // 6 of 8 instances are labelled, so 36 of 48 positive slots are eligible
        assert_eq!(crossed, 24);
        for (p, _) in &positives {
            if p.n != p.n_prime {
                assert_eq!(labels[p.n], labels[p.n_prime]);
            }
        }
        for (p, &t) in plan.provenance.iter().zip(&plan.targets) {
            if t == 0.0 {
                assert_ne!(p.n, p.n_prime);
                if let (Some(a), Some(b)) = (labels[p.n], labels[p.n_prime]) {
                    assert_ne!(a, b);
                }
            }
        }
    }
}
