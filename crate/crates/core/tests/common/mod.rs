#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relreason::backbone::{Conv4Backbone, REPR_DIM};
use relreason::nn::Mode;
use relreason::relational::{derangement_shuffle, AggregationMode, PairOptions, PairPlan, PairScorer, RelationHead};
use relreason::tensor::gradcheck::relative_error;
use relreason::tensor::{focal_term, Tape, Tensor, Var};

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Central differences on a chosen subset of coordinates, compared against the
/// tape's analytic gradient. `picks[i]` lists the probed entries of input `i`.
pub fn fd_subset<F>(inputs: &[Tensor<f64>], picks: &[Vec<usize>], h: f64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let eval = |probe: &[Tensor<f64>]| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).data()[0]
    };
    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for (ti, idx) in picks.iter().enumerate() {
        let analytic = tape.grad(vars[ti]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[ti].numel()]);
        for &i in idx {
            let orig = probe[ti].data()[i];
            probe[ti].data_mut()[i] = orig + h;
            let up = eval(&probe);
            probe[ti].data_mut()[i] = orig - h;
            let down = eval(&probe);
            probe[ti].data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * h)));
        }
    }
    worst
}

/// Every index when the tensor is small, otherwise `cap` distinct random ones.
pub fn pick(rng: &mut ChaCha8Rng, numel: usize, cap: usize) -> Vec<usize> {
    if numel <= cap {
        (0..numel).collect()
    } else {
        rand::seq::index::sample(rng, numel, cap).into_vec()
    }
}

/// Brute-force squared Euclidean distance in f64.
pub fn dist2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum()
}

/// Backbone on 8×8 input → relation head → focal BCE over 4 pairs, with the
/// focal weights frozen at the base point on the numeric side.
pub fn end_to_end_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = Conv4Backbone::new(seed);
    for t in backbone.params.tensors_mut() {
        if t.rank() == 1 {
            // Move batch-norm scale and shift off their trivial init.
            for v in t.data_mut() {
                *v += rand::Rng::gen_range(&mut rng, -0.3..0.3);
            }
        }
    }
    let head = RelationHead::new(REPR_DIM, AggregationMode::Cat, &mut rng);
    let plan = PairPlan::build(2, 2, &PairOptions::default(), &mut rng).unwrap();
    assert_eq!(plan.len(), 4);

    let mut inputs = vec![uniform(&mut rng, &[4, 3, 8, 8], 0.0, 1.0)];
    inputs.extend(backbone.params.tensors().iter().map(Tensor::cast::<f64>));
    let nb = backbone.params.len();
    inputs.extend(head.params().tensors().iter().map(Tensor::cast::<f64>));

    let scores = |tape: &mut Tape<f64>, v: &[Var]| -> Var {
        let mut b = backbone.clone();
        let mut h = head.clone();
        let z = b.forward_unchecked(tape, &v[1..=nb], v[0], Mode::Train).unwrap();
        h.score(tape, &v[nb + 1..], z, &plan, Mode::Train).unwrap()
    };
    let weights: Vec<f64> = {
        let mut tape = Tape::<f64>::new();
        let v: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = scores(&mut tape, &v);
        tape.value(y)
            .data()
            .iter()
            .zip(&plan.targets)
            .map(|(&y, &t)| focal_term(y, f64::from(t), 2.0).1)
            .collect()
    };
    let targets: Vec<f64> = plan.targets.iter().map(|&t| f64::from(t)).collect();
    let picks: Vec<Vec<usize>> = inputs.iter().map(|t| pick(&mut rng, t.numel(), 40)).collect();
    fd_subset(&inputs, &picks, 1e-5, |tape, v| {
        let y = scores(tape, v);
        tape.weighted_bce(y, &targets, &weights).unwrap()
    })
}

/// Upper 99.9% chi-square quantiles for the degrees of freedom used here.
pub fn chi2_critical(df: usize) -> f64 {
    match df {
        1 => 10.827_566,
        3 => 16.266_236,
        14 => 36.123_274,
        _ => unreachable!("no table entry for {df}"),
    }
}

/// Draws `draws` derangements of size `m` and returns the number of fixed
/// points and the largest per-position chi-square statistic over the `m - 1`
/// admissible partners (zero for `m = 2`, where the partner is forced).
pub fn derangement_stats(m: usize, draws: u64, seed: u64) -> (u64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![vec![0u64; m]; m];
    for _ in 0..draws {
        let perm = derangement_shuffle(m, &mut rng).unwrap();
        for (pos, &partner) in perm.iter().enumerate() {
            counts[pos][partner] += 1;
        }
    }
    let fixed = (0..m).map(|i| counts[i][i]).sum();
    if m == 2 {
        return (fixed, 0.0);
    }
    let expected = draws as f64 / (m - 1) as f64;
    let worst = counts
        .iter()
        .enumerate()
        .map(|(pos, row)| {
            row.iter()
                .enumerate()
                .filter(|&(c, _)| c != pos)
                .map(|(_, &o)| (o as f64 - expected).powi(2) / expected)
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    (fixed, worst)
}
