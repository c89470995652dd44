//! Downstream evaluation of frozen representations: linear probing and
//! nearest-neighbour retrieval.

use rand::seq::SliceRandom;

use crate::backbone::{Conv4Backbone, LinearProbe};
use crate::dataio::ImageDataset;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::optim::{milestone_lr, Optimizer, Sgd};
use crate::seed::stream;
use crate::tensor::{Tape, Tensor};

/// Linear-probe training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    /// Seed of the per-epoch shuffling stream.
    pub seed: u64,
    /// Images per backbone call when extracting features.
    pub embed_chunk: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 128,
            seed: 0,
            embed_chunk: 250,
        }
    }
}

/// Per-feature mean and inverse standard deviation of a training set.
fn standardizer(features: &Tensor<f32>) -> (Vec<f32>, Vec<f32>) {
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(features.row(i)) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; d];
    for i in 0..n {
        for ((s, &v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (f64::from(v) - m).powi(2);
        }
    }
    let inv: Vec<f32> = var
        .iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 1e-8 {
                (1.0 / sd) as f32
            } else {
                0.0
            }
        })
        .collect();
    (mean.into_iter().map(|m| m as f32).collect(), inv)
}

/// Trains a softmax classifier on fixed `[N, d]` features with momentum SGD
/// and the ÷10-at-50%/75% schedule.
///
/// Features are standardised per dimension during training and the affine
/// map is folded back into the weights, so the returned probe applies to the
/// raw features.
pub fn train_probe(
    features: &Tensor<f32>,
    labels: &[usize],
    classes: usize,
    options: &ProbeOptions,
) -> Result<LinearProbe> {
    let (n, d) = match *features.shape() {
        [n, d] => (n, d),
        ref s => return Err(Error::shape("train_probe", format!("expected [N, d], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} feature rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} outside {classes} classes")));
    }
    if options.batch_size == 0 {
        return Err(Error::invalid("probe batch size must be positive"));
    }
    let (mean, inv) = standardizer(features);
    let mut scaled = features.clone();
    for row in scaled.data_mut().chunks_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(&mean).zip(&inv) {
            *v = (*v - m) * s;
        }
    }

    let mut probe = LinearProbe::new(d, classes);
    let mut opt = Sgd::new(&probe.params, options.lr, options.momentum);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..options.epochs {
        opt.set_lr(milestone_lr(options.lr, epoch, options.epochs));
        order.shuffle(&mut stream(&[options.seed, epoch as u64]));
        for batch in order.chunks(options.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * d);
            for &i in batch {
                x.extend_from_slice(scaled.row(i));
            }
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::<f32>::new();
            let p = probe.params.load(&mut tape);
            let xv = tape.constant(Tensor::new(&[batch.len(), d], x)?);
            let logits = probe.forward(&mut tape, &p, xv)?;
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            tape.backward(loss)?;
            let g = probe.params.grads(&tape, &p);
            opt.step(&mut probe.params, &g)?;
        }
    }

    // w' = diag(inv)·w, b' = b − Σ_j mean_j·w'_j
    let mut params = ParamSet::new();
    let mut w = probe.params.tensors()[0].clone();
    let mut b = probe.params.tensors()[1].clone();
    for j in 0..d {
        for c in 0..classes {
            let v = &mut w.data_mut()[j * classes + c];
            *v *= inv[j];
            b.data_mut()[c] -= mean[j] * *v;
        }
    }
    params.push("weight", w);
    params.push("bias", b);
    probe.params = params;
    Ok(probe)
}

/// Fraction of rows whose arg-max class equals the label.
pub fn probe_accuracy(probe: &LinearProbe, features: &Tensor<f32>, labels: &[usize]) -> f64 {
    let hits = probe
        .predict(features)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

fn labelled<'a>(ds: &'a ImageDataset, what: &str) -> Result<(&'a [usize], usize)> {
    match (ds.labels(), ds.num_classes()) {
        (Some(l), Some(c)) => Ok((l, c)),
        _ => Err(Error::invalid(format!("linear evaluation needs a labelled {what} set"))),
    }
}

/// Outcome of [`linear_eval_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub probe: LinearProbe,
}

/// Trains a linear probe on frozen inference-mode representations of `train`
/// and scores it on `test`. The backbone is checked to be bit-for-bit
/// unchanged afterwards.
pub fn linear_eval_report(
    backbone: &Conv4Backbone,
    train: &ImageDataset,
    test: &ImageDataset,
    options: &ProbeOptions,
) -> Result<ProbeReport> {
    let (train_labels, classes) = labelled(train, "training")?;
    let (test_labels, test_classes) = labelled(test, "test")?;
    if classes != test_classes {
        return Err(Error::invalid(format!(
            "training set has {classes} classes, test set {test_classes}"
        )));
    }
    let before = backbone.params.checksum();
    let f_train = backbone.embed(&train.to_tensor()?, options.embed_chunk)?;
    let f_test = backbone.embed(&test.to_tensor()?, options.embed_chunk)?;
    let probe = train_probe(&f_train, train_labels, classes, options)?;
    assert_eq!(before, backbone.params.checksum(), "linear evaluation modified the backbone");
    let predictions = probe.predict(&f_test);
    Ok(ProbeReport {
        accuracy: probe_accuracy(&probe, &f_test, test_labels),
        predictions,
        probe,
    })
}

/// Top-1 test accuracy of a linear probe on frozen representations.
pub fn linear_eval(
    backbone: &Conv4Backbone,
    train: &ImageDataset,
    test: &ImageDataset,
    options: &ProbeOptions,
) -> Result<f64> {
    linear_eval_report(backbone, train, test, options).map(|r| r.accuracy)
}

/// Result of a nearest-neighbour retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    /// Gallery indices per query, nearest first.
    pub neighbors: Vec<Vec<usize>>,
    /// Euclidean distances matching `neighbors`.
    pub distances: Vec<Vec<f64>>,
    /// Mean over queries of the fraction of retrieved items sharing the
    /// query's class.
    pub accuracy: f64,
    /// Row `q`, column `c`: share of class-`q` retrievals landing in class
    /// `c`. Rows of classes without queries are zero.
    pub confusion: Vec<Vec<f64>>,
}

/// The `k` gallery rows closest to each query by Euclidean distance, ties
/// broken by ascending gallery index.
///
/// `self_index[q]`, when given, is the gallery position of query `q`; that
/// entry is skipped so a query never retrieves itself.
pub fn knn_retrieval(
    queries: &Tensor<f32>,
    query_labels: &[usize],
    gallery: &Tensor<f32>,
    gallery_labels: &[usize],
    k: usize,
    self_index: Option<&[usize]>,
) -> Result<Retrieval> {
    let (q, d) = match *queries.shape() {
        [q, d] => (q, d),
        ref s => return Err(Error::shape("knn_retrieval", format!("queries {s:?}"))),
    };
    let g = gallery.shape()[0];
    if gallery.rank() != 2 || gallery.shape()[1] != d {
        return Err(Error::shape(
            "knn_retrieval",
            format!("queries {:?} and gallery {:?}", queries.shape(), gallery.shape()),
        ));
    }
    if query_labels.len() != q || gallery_labels.len() != g {
        return Err(Error::invalid("one label per query and gallery row is required"));
    }
    if let Some(s) = self_index {
        if s.len() != q || s.iter().any(|&i| i >= g) {
            return Err(Error::invalid("self_index must map every query into the gallery"));
        }
    }
    let available = g - usize::from(self_index.is_some());
    if k == 0 || k > available {
        return Err(Error::invalid(format!("k = {k} with {available} gallery items available")));
    }
    let classes = query_labels.iter().chain(gallery_labels).max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; classes]; classes];
    let mut neighbors = Vec::with_capacity(q);
    let mut distances = Vec::with_capacity(q);
    let mut acc = 0.0;
    for qi in 0..q {
        let qrow = queries.row(qi);
        let skip = self_index.map(|s| s[qi]);
        let mut ranked: Vec<(f64, usize)> = (0..g)
            .filter(|&gi| Some(gi) != skip)
            .map(|gi| {
                let d2: f64 = qrow
                    .iter()
                    .zip(gallery.row(gi))
                    .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                    .sum();
                (d2, gi)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranked.truncate(k);
        let ql = query_labels[qi];
        let same = ranked.iter().filter(|&&(_, gi)| gallery_labels[gi] == ql).count();
        acc += same as f64 / k as f64;
        for &(_, gi) in &ranked {
            counts[ql][gallery_labels[gi]] += 1;
        }
        distances.push(ranked.iter().map(|&(d2, _)| d2.sqrt()).collect());
        neighbors.push(ranked.into_iter().map(|(_, gi)| gi).collect());
    }
    let confusion = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect()
        })
        .collect();
    Ok(Retrieval {
        neighbors,
        distances,
        accuracy: acc / q.max(1) as f64,
        confusion,
    })
}

/// Row-normalised confusion matrix of class predictions.
pub fn prediction_confusion(labels: &[usize], predictions: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0usize; classes]; classes];
    for (&l, &p) in labels.iter().zip(predictions) {
        counts[l][p] += 1;
    }
    counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect()
        })
        .collect()
}
