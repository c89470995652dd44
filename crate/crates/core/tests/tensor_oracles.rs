mod common;

use common::uniform;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relreason::backbone::Conv4Backbone;
use relreason::nn::Mode;
use relreason::relational::{AggregationMode, PairScorer, RelationHead};
use relreason::tensor::gradcheck::{check_fn, grad_check, grad_check_report, GradOp};
use relreason::tensor::{focal_term, Tape, Tensor, Var};

#[test]
fn scalar_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(0.0));
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s).data(), &[0.5]);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.25]);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    tape.backward(sq).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
    let y = tape.leaky_relu(x, 0.01);
    assert_eq!(tape.value(y).data(), &[-0.01, 2.0]);
}

#[test]
fn conv_keeps_size_and_identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(uniform(&mut rng, &[1, 3, 32, 32], -1.0, 1.0).cast());
    let w = tape.constant(uniform(&mut rng, &[5, 3, 3, 3], -1.0, 1.0).cast());
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 5, 32, 32]);

    let a = uniform(&mut rng, &[3, 3], -5.0, 5.0);
    let mut tape = Tape::<f64>::new();
    let i = tape.constant(Tensor::eye(3));
    let av = tape.constant(a.clone());
    let p = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(p), &a);
}

#[test]
fn every_op_over_five_seeds() {
    for op in GradOp::ALL {
        let report = grad_check_report(op, 0..5).unwrap();
        assert!(report.max_rel_error < 1e-3, "{op}: {:.3e}", report.max_rel_error);
    }
}

#[test]
fn pinned_op_examples() {
    for seed in 0..5 {
        assert!(grad_check(GradOp::Sigmoid, &[vec![4, 4]], seed).unwrap() < 1e-5);
        assert!(grad_check(GradOp::BatchNormTrain, &[vec![8, 4]], seed).unwrap() < 1e-3);
        assert!(grad_check(GradOp::MatMul, &[vec![3, 5], vec![5, 2]], seed).unwrap() < 1e-5);
    }
}

#[test]
fn summed_conv_with_coarse_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = uniform(&mut rng, &[1, 3, 8, 8], -1.0, 1.0);
    let w = uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let err = check_fn(&[x, w], 1e-3, |tape, v| {
        let y = tape.conv2d(v[0], v[1], None, 1, 1)?;
        Ok(tape.sum(y))
    })
    .unwrap();
    assert!(err < 1e-3, "{err:.3e}");
}

#[test]
fn focal_backward_matches_frozen_weight_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y = uniform(&mut rng, &[16], 0.02, 0.98);
    let t: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
    let w: Vec<f64> = y.data().iter().zip(&t).map(|(&y, &t)| focal_term(y, t, 2.0).1).collect();
    let grads = |frozen: bool| {
        let mut tape = Tape::<f64>::new();
        let v = tape.param(y.clone());
        let l = if frozen {
            tape.weighted_bce(v, &t, &w).unwrap()
        } else {
            tape.focal_bce(v, &t, 2.0).unwrap()
        };
        let loss = tape.value(l).data()[0];
        tape.backward(l).unwrap();
        (loss, tape.grad(v).unwrap().to_vec())
    };
    assert_eq!(grads(true), grads(false));
}

#[test]
fn end_to_end_loss_over_five_seeds() {
    for seed in 0..5 {
        let err = common::end_to_end_error(seed);
        assert!(err < 1e-3, "seed {seed}: {err:.3e}");
    }
}

#[test]
fn head_parameters_on_four_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let head = RelationHead::new(8, AggregationMode::Cat, &mut rng);
    let features = uniform(&mut rng, &[4, 16], -1.0, 1.0);
    let targets = [1.0, 1.0, 0.0, 0.0];
    let mut inputs = vec![features];
    inputs.extend(head.params().tensors().iter().map(Tensor::cast::<f64>));
    let forward = |tape: &mut Tape<f64>, v: &[Var]| {
        let mut h = head.clone();
        h.forward(tape, &v[1..], v[0], Mode::Train).unwrap()
    };
    let weights: Vec<f64> = {
        let mut tape = Tape::<f64>::new();
        let v: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = forward(&mut tape, &v);
        tape.value(y).data().iter().zip(&targets).map(|(&y, &t)| focal_term(y, t, 2.0).1).collect()
    };
    let err = check_fn(&inputs, 1e-6, |tape, v| {
        let y = forward(tape, v);
        tape.weighted_bce(y, &targets, &weights)
    })
    .unwrap();
    assert!(err < 1e-3, "{err:.3e}");
}

#[test]
fn backbone_shapes_and_init() {
    let a = Conv4Backbone::new(5);
    assert_eq!(a, Conv4Backbone::new(5));
    assert_ne!(a, Conv4Backbone::new(6));
    assert_eq!(a.params.count(), relreason::backbone::CONV4_PARAM_COUNT);
    for (name, t) in a.params.names().iter().zip(a.params.tensors()) {
        if name.ends_with("bn.weight") {
            assert!(t.data().iter().all(|&v| v == 1.0));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let one = uniform(&mut rng, &[1, 3, 32, 32], 0.0, 1.0).cast::<f32>();
    let mut batch = Vec::new();
    for i in 0..8 {
        if i % 4 == 0 {
            batch.extend_from_slice(one.data());
        } else {
            batch.extend(uniform(&mut rng, &[3 * 32 * 32], 0.0, 1.0).cast::<f32>().data());
        }
    }
    let z = a.embed(&Tensor::new(&[8, 3, 32, 32], batch).unwrap(), 3).unwrap();
    assert_eq!(z.shape(), &[8, 64]);
    assert_eq!(z.row(0), z.row(4));

    let zero = a.embed(&Tensor::zeros(&[2, 3, 32, 32]), 8).unwrap();
    assert!(zero.data().iter().all(|v| v.is_finite()));
    assert_eq!(zero.row(0), zero.row(1));
}

#[test]
fn glorot_variance_within_twenty_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (fan_in, fan_out) = (27, 72);
    let w = relreason::nn::glorot_uniform(&[1000], fan_in, fan_out, &mut rng);
    let n = w.numel() as f64;
    let mean = w.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = w.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let expected = 2.0 / (fan_in + fan_out) as f64;
    assert!((var / expected - 1.0).abs() < 0.2, "{var} vs {expected}");
}

#[test]
fn tape_forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = Conv4Backbone::new(2);
        let x = uniform(&mut rng, &[6, 3, 16, 16], 0.0, 1.0).cast::<f32>();
        let mut tape = Tape::<f32>::new();
        let p = b.params.load(&mut tape);
        let xv = tape.constant(x);
        let z = b.forward(&mut tape, &p, xv, Mode::Train).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        (tape.value(z).clone(), b.params.grads(&tape, &p), b.bn.clone())
    };
    assert_eq!(run(), run());
}
