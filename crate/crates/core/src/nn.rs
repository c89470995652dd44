//! Parameter containers and the small layers shared by every model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running estimates updated.
    Train,
    /// Running statistics, no state changes.
    Eval,
}

/// Ordered, named trainable tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies every tensor onto `tape` as a grad-requiring leaf.
    pub fn load<T: Real>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.cast())).collect()
    }

    /// Gradients for `vars` (as returned by [`ParamSet::load`]) after a
    /// backward pass, zero-filled for parameters the loss did not reach.
    pub fn grads<T: Real>(&self, tape: &Tape<T>, vars: &[Var]) -> Vec<Vec<f32>> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| match tape.grad(v) {
                Some(g) => g.iter().map(|&x| x.as_f32()).collect(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    /// Replaces values from `(name, tensor)` pairs; every name must be present
    /// with a matching shape.
    pub fn assign(&mut self, named: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let full = format!("{prefix}{name}");
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == full)
                .ok_or_else(|| Error::format("checkpoint", "tensor", format!("missing `{full}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    "checkpoint",
                    "tensor",
                    format!("`{full}` has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// FNV-1a over the raw bits of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Uniform weights with bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Uniform weights with bound `1 / sqrt(fan_in)`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
    let bound = (1.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Batch-norm running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Batch norm whose statistics depend on `mode`; training mode folds the
/// batch statistics into `stats` with momentum [`BN_MOMENTUM`].
pub fn batch_norm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<Var> {
    let eps = T::lit(BN_EPS);
    match mode {
        Mode::Train => {
            let (y, batch) = tape.batch_norm_train(x, gamma, beta, eps)?;
            let m = BN_MOMENTUM as f32;
            for (r, b) in stats.mean.iter_mut().zip(&batch.mean) {
                *r = (1.0 - m) * *r + m * b.as_f32();
            }
            for (r, b) in stats.var.iter_mut().zip(&batch.var) {
                *r = (1.0 - m) * *r + m * b.as_f32();
            }
            Ok(y)
        }
        Mode::Eval => {
            let mean: Vec<T> = stats.mean.iter().map(|&v| <T as Real>::from_f32(v)).collect();
            let var: Vec<T> = stats.var.iter().map(|&v| <T as Real>::from_f32(v)).collect();
            tape.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
        }
    }
}

/// `x · W + b` with `W` stored as `[in, out]`.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Two-layer perceptron: linear → batch norm → leaky-ReLU → linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub params: ParamSet,
    pub bn: RunningStats,
    input: usize,
    hidden: usize,
    output: usize,
}

impl Mlp {
    /// Fan-in uniform weights, zero biases, unit batch-norm scale.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        params.push("fc1.weight", fan_in_uniform(&[input, hidden], input, rng));
        params.push("fc1.bias", Tensor::zeros(&[hidden]));
        params.push("bn.weight", Tensor::full(&[hidden], 1.0));
        params.push("bn.bias", Tensor::zeros(&[hidden]));
        params.push("fc2.weight", fan_in_uniform(&[hidden, output], hidden, rng));
        params.push("fc2.bias", Tensor::zeros(&[output]));
        Self {
            params,
            bn: RunningStats::new(hidden),
            input,
            hidden,
            output,
        }
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    pub fn output_width(&self) -> usize {
        self.output
    }

    pub fn forward<T: Real>(&mut self, tape: &mut Tape<T>, p: &[Var], x: Var, mode: Mode) -> Result<Var> {
        let width = tape.shape(x).get(1).copied();
        if tape.shape(x).len() != 2 || width != Some(self.input) {
            return Err(Error::shape(
                "mlp",
                format!("input {:?} for width {}", tape.shape(x), self.input),
            ));
        }
        let h = linear(tape, x, p[0], p[1])?;
        let h = batch_norm(tape, h, p[2], p[3], &mut self.bn, mode)?;
        let h = tape.leaky_relu(h, T::lit(LEAKY_SLOPE));
        linear(tape, h, p[4], p[5])
    }

    pub fn buffers(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        stats_buffers(&self.bn, &format!("{prefix}bn"))
    }

    pub fn load_buffers(&mut self, named: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
        load_stats(&mut self.bn, named, &format!("{prefix}bn"))
    }
}

pub(crate) fn stats_buffers(stats: &RunningStats, prefix: &str) -> Vec<(String, Tensor<f32>)> {
    let c = stats.mean.len();
    vec![
        (
            format!("{prefix}.running_mean"),
            Tensor::new(&[c], stats.mean.clone()).expect("channels > 0"),
        ),
        (
            format!("{prefix}.running_var"),
            Tensor::new(&[c], stats.var.clone()).expect("channels > 0"),
        ),
    ]
}

pub(crate) fn load_stats(stats: &mut RunningStats, named: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
    for (suffix, dst) in [("running_mean", &mut stats.mean), ("running_var", &mut stats.var)] {
        let key = format!("{prefix}.{suffix}");
        let (_, t) = named
            .iter()
            .find(|(n, _)| *n == key)
            .ok_or_else(|| Error::format("checkpoint", "tensor", format!("missing `{key}`")))?;
        if t.numel() != dst.len() {
            return Err(Error::format("checkpoint", "tensor", format!("`{key}` has {} values", t.numel())));
        }
        dst.copy_from_slice(t.data());
    }
    Ok(())
}
