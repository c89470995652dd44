//! Finite-difference verification of the tape's adjoints.
//!
//! Both sides run in `f64`: the analytic gradient comes from the same generic
//! backward code used for training, the numeric one from central differences
//! of the forward pass. Ops with outputs wider than one element are reduced
//! to a scalar through a fixed random projection so every output element
//! contributes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{focal_term, Tape, Tensor, Var, BN_EPS, LEAKY_SLOPE};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Every differentiable op in the catalogue.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradOp {
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Maximum,
    Scale,
    Relu,
    LeakyRelu,
    Sigmoid,
    Log,
    Conv2d,
    BatchNormTrain,
    BatchNormEval,
    AvgPool2d,
    GlobalAvgPool,
    Sum,
    Mean,
    SumRows,
    Concat,
    SliceCols,
    GatherRows,
    SoftmaxCrossEntropy,
    FocalBce,
}

impl GradOp {
    pub const ALL: [GradOp; 24] = [
        GradOp::MatMul,
        GradOp::AddBias,
        GradOp::Add,
        GradOp::Sub,
        GradOp::Mul,
        GradOp::Maximum,
        GradOp::Scale,
        GradOp::Relu,
        GradOp::LeakyRelu,
        GradOp::Sigmoid,
        GradOp::Log,
        GradOp::Conv2d,
        GradOp::BatchNormTrain,
        GradOp::BatchNormEval,
        GradOp::AvgPool2d,
        GradOp::GlobalAvgPool,
        GradOp::Sum,
        GradOp::Mean,
        GradOp::SumRows,
        GradOp::Concat,
        GradOp::SliceCols,
        GradOp::GatherRows,
        GradOp::SoftmaxCrossEntropy,
        GradOp::FocalBce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::MatMul => "matmul",
            GradOp::AddBias => "add_bias",
            GradOp::Add => "add",
            GradOp::Sub => "sub",
            GradOp::Mul => "mul",
            GradOp::Maximum => "maximum",
            GradOp::Scale => "scale",
            GradOp::Relu => "relu",
            GradOp::LeakyRelu => "leaky_relu",
            GradOp::Sigmoid => "sigmoid",
            GradOp::Log => "log",
            GradOp::Conv2d => "conv2d",
            GradOp::BatchNormTrain => "batchnorm",
            GradOp::BatchNormEval => "batchnorm_eval",
            GradOp::AvgPool2d => "avg_pool2d",
            GradOp::GlobalAvgPool => "global_avg_pool",
            GradOp::Sum => "sum",
            GradOp::Mean => "mean",
            GradOp::SumRows => "sum_rows",
            GradOp::Concat => "concat",
            GradOp::SliceCols => "slice_cols",
            GradOp::GatherRows => "gather_rows",
            GradOp::SoftmaxCrossEntropy => "softmax_cross_entropy",
            GradOp::FocalBce => "focal_bce",
        }
    }

    /// Input shapes used when the caller has no preference.
    pub fn default_shapes(self) -> Vec<Vec<usize>> {
        match self {
            GradOp::MatMul => vec![vec![3, 5], vec![5, 2]],
            GradOp::AddBias => vec![vec![4, 3], vec![3]],
            GradOp::Add | GradOp::Sub | GradOp::Mul | GradOp::Maximum => vec![vec![4, 4], vec![4, 4]],
            GradOp::Conv2d => vec![vec![2, 3, 6, 6], vec![4, 3, 3, 3], vec![4]],
            GradOp::BatchNormTrain | GradOp::BatchNormEval => vec![vec![8, 4]],
            GradOp::AvgPool2d | GradOp::GlobalAvgPool => vec![vec![2, 3, 6, 6]],
            GradOp::Concat => vec![vec![3, 2], vec![3, 4]],
            GradOp::SliceCols | GradOp::GatherRows | GradOp::SumRows => vec![vec![5, 4]],
            GradOp::SoftmaxCrossEntropy => vec![vec![6, 4]],
            GradOp::FocalBce => vec![vec![8]],
            _ => vec![vec![4, 4]],
        }
    }

    fn arity(self) -> std::ops::RangeInclusive<usize> {
        match self {
            GradOp::MatMul
            | GradOp::AddBias
            | GradOp::Add
            | GradOp::Sub
            | GradOp::Mul
            | GradOp::Maximum
            | GradOp::Concat => 2..=2,
            GradOp::Conv2d => 2..=3,
            _ => 1..=1,
        }
    }

    fn kinked(self) -> bool {
        matches!(self, GradOp::Relu | GradOp::LeakyRelu | GradOp::Maximum)
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown op `{s}`")))
    }
}

/// Result of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: GradOp,
    pub max_rel_error: f64,
    pub entries: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic and central-difference gradients of a scalar function of
/// several tensors. `f` builds the scalar on the tape from leaf vars.
pub fn check_fn<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = probe[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + step;
            let up = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - step;
            let down = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * step)));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Scalar reduction through a fixed projection.
fn project(tape: &mut Tape<f64>, out: Var, proj: &Tensor<f64>) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let numel: usize = shape.iter().product();
    if numel > proj.numel() {
        return Err(Error::invalid(format!("projection too short for output {shape:?}")));
    }
    let p = tape.constant(Tensor::new(&shape, proj.data()[..numel].to_vec())?);
    let m = tape.mul(out, p)?;
    Ok(tape.sum(m))
}

/// Checks one op at a seeded random point and returns the max relative error.
pub fn grad_check(op: GradOp, shapes: &[Vec<usize>], seed: u64) -> Result<f64> {
    grad_check_with_step(op, shapes, seed, DEFAULT_STEP)
}

pub fn grad_check_with_step(op: GradOp, shapes: &[Vec<usize>], seed: u64, step: f64) -> Result<f64> {
    if !op.arity().contains(&shapes.len()) {
        return Err(Error::invalid(format!("{op}: {} input shapes given", shapes.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kink_margin = 1e-4f64.max(10.0 * step);
    let (lo, hi) = if op == GradOp::Log { (0.5, 2.0) } else { (-1.0, 1.0) };

    let mut inputs: Vec<Tensor<f64>>;
    loop {
        inputs = shapes.iter().map(|s| uniform(&mut rng, s, lo, hi)).collect();
        let ok = match op {
            GradOp::Relu | GradOp::LeakyRelu => inputs[0].data().iter().all(|v| v.abs() > kink_margin),
            GradOp::Maximum => inputs[0]
                .data()
                .iter()
                .zip(inputs[1].data())
                .all(|(a, b)| (a - b).abs() > kink_margin),
            _ => true,
        };
        if ok || !op.kinked() {
            break;
        }
    }
    if op == GradOp::FocalBce {
        inputs[0] = uniform(&mut rng, &shapes[0], 0.05, 0.95);
    }

    // Output width is unknown until the op runs; draw a projection wide enough.
    let widest: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>() * 16;
    let proj = uniform(&mut rng, &[widest], -1.0, 1.0);
    let labels: Vec<usize> = (0..shapes[0][0]).map(|_| rng.gen_range(0..shapes[0].get(1).copied().unwrap_or(1))).collect();
    let targets: Vec<f64> = (0..shapes[0].iter().product::<usize>())
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    // The focal weight is a constant of the backward pass, so the numeric side
    // holds it at the unperturbed scores too.
    let focal_weights: Vec<f64> = if op == GradOp::FocalBce {
        inputs[0]
            .data()
            .iter()
            .zip(&targets)
            .map(|(&y, &t)| focal_term(y, t, 2.0).1)
            .collect()
    } else {
        Vec::new()
    };
    let gather_rows: Vec<usize> = (0..shapes[0][0] + 2).map(|_| rng.gen_range(0..shapes[0][0])).collect();
    let channels = shapes[0].get(1).copied().unwrap_or(1);
    let bn_params = (
        uniform(&mut rng, &[channels], 0.5, 1.5),
        uniform(&mut rng, &[channels], -0.5, 0.5),
    );
    let running_mean: Vec<f64> = (0..channels).map(|i| 0.1 * i as f64).collect();
    let running_var: Vec<f64> = (0..channels).map(|i| 1.0 + 0.2 * i as f64).collect();

    let build = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let out = match op {
            GradOp::MatMul => tape.matmul(v[0], v[1])?,
            GradOp::AddBias => tape.add_bias(v[0], v[1])?,
            GradOp::Add => tape.add(v[0], v[1])?,
            GradOp::Sub => tape.sub(v[0], v[1])?,
            GradOp::Mul => tape.mul(v[0], v[1])?,
            GradOp::Maximum => tape.maximum(v[0], v[1])?,
            GradOp::Scale => tape.scale(v[0], -1.75),
            GradOp::Relu => tape.relu(v[0]),
            GradOp::LeakyRelu => tape.leaky_relu(v[0], LEAKY_SLOPE),
            GradOp::Sigmoid => tape.sigmoid(v[0]),
            GradOp::Log => tape.log(v[0]),
            GradOp::Conv2d => tape.conv2d(v[0], v[1], v.get(2).copied(), 1, 1)?,
            GradOp::BatchNormTrain | GradOp::BatchNormEval => {
                let g = tape.param(bn_params.0.clone());
                let b = tape.param(bn_params.1.clone());
                if op == GradOp::BatchNormTrain {
                    tape.batch_norm_train(v[0], g, b, BN_EPS)?.0
                } else {
                    tape.batch_norm_eval(v[0], g, b, &running_mean, &running_var, BN_EPS)?
                }
            }
            GradOp::AvgPool2d => tape.avg_pool2d(v[0], 2, 2)?,
            GradOp::GlobalAvgPool => tape.global_avg_pool(v[0])?,
            GradOp::Sum => tape.sum(v[0]),
            GradOp::Mean => tape.mean(v[0]),
            GradOp::SumRows => tape.sum_rows(v[0])?,
            GradOp::Concat => tape.concat(&[v[0], v[1]])?,
            GradOp::SliceCols => {
                let w = tape.shape(v[0])[1];
                tape.slice_cols(v[0], w / 2, w - w / 2)?
            }
            GradOp::GatherRows => tape.gather_rows(v[0], &gather_rows)?,
            GradOp::SoftmaxCrossEntropy => tape.softmax_cross_entropy(v[0], &labels)?,
            GradOp::FocalBce => tape.weighted_bce(v[0], &targets, &focal_weights)?,
        };
        project(tape, out, &proj)
    };
    check_fn(&inputs, step, build)
}

/// Runs [`grad_check`] with default shapes over several seeds.
pub fn grad_check_report(op: GradOp, seeds: impl IntoIterator<Item = u64>) -> Result<GradCheckReport> {
    let shapes = op.default_shapes();
    let mut worst = 0.0f64;
    let mut entries = 0;
    for seed in seeds {
        worst = worst.max(grad_check(op, &shapes, seed)?);
        entries += shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>();
    }
    Ok(GradCheckReport {
        op,
        max_rel_error: worst,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_4x4() {
        for seed in 0..5 {
            let e = grad_check(GradOp::Sigmoid, &[vec![4, 4]], seed).unwrap();
            assert!(e < 1e-5, "seed {seed}: {e}");
        }
    }

    #[test]
    fn batchnorm_training_8x4() {
        let e = grad_check(GradOp::BatchNormTrain, &[vec![8, 4]], 3).unwrap();
        assert!(e < 1e-3, "{e}");
    }

    #[test]
    fn matmul_3x5_5x2() {
        let e = grad_check(GradOp::MatMul, &[vec![3, 5], vec![5, 2]], 11).unwrap();
        assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn sum_of_conv_on_1x3x8x8() {
        let e = grad_check_with_step(GradOp::Conv2d, &[vec![1, 3, 8, 8], vec![4, 3, 3, 3]], 5, 1e-3).unwrap();
        assert!(e < 1e-3, "{e}");
    }

    #[test]
    fn parses_op_names() {
        for op in GradOp::ALL {
            assert_eq!(op.name().parse::<GradOp>().unwrap(), op);
        }
        assert!("nope".parse::<GradOp>().is_err());
    }

    #[test]
    fn wrong_arity_is_reported() {
        assert!(grad_check(GradOp::MatMul, &[vec![2, 2]], 0).is_err());
    }
}
