//! Conv-4 feature extractor and the linear classification layer used on top
//! of it.
//!
//! Each of the four blocks runs conv(3×3, stride 1, pad 1) → batch norm →
//! ReLU → pool. The first three blocks (8, 16, 32 maps) pool with a 2×2
//! average at stride 2; the fourth (64 maps) pools adaptively to 1×1, so the
//! representation is 64 wide whatever the input resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, glorot_uniform, Mode, ParamSet, RunningStats};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const BLOCK_WIDTHS: [usize; 4] = [8, 16, 32, 64];
/// Width of the representation produced by [`Conv4Backbone::forward`].
pub const REPR_DIM: usize = 64;
pub const MIN_INPUT_SIDE: usize = 16;
/// Trainable scalars: conv weights (216 + 1152 + 4608 + 18432) plus
/// batch-norm scale and shift (2 · 120).
pub const CONV4_PARAM_COUNT: usize = 24_648;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv4Backbone {
    pub params: ParamSet,
    pub bn: [RunningStats; 4],
}

impl Conv4Backbone {
    /// Freshly initialised backbone; see [`Conv4Backbone::init_weights`].
    pub fn new(seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut in_c = 3;
        for (b, &out_c) in BLOCK_WIDTHS.iter().enumerate() {
            params.push(format!("block{}.conv.weight", b + 1), Tensor::zeros(&[out_c, in_c, 3, 3]));
            params.push(format!("block{}.bn.weight", b + 1), Tensor::full(&[out_c], 1.0));
            params.push(format!("block{}.bn.bias", b + 1), Tensor::zeros(&[out_c]));
            in_c = out_c;
        }
        let mut bb = Self {
            params,
            bn: BLOCK_WIDTHS.map(RunningStats::new),
        };
        bb.init_weights(seed);
        bb
    }

    /// Glorot-uniform conv weights from `seed`, batch-norm scale 1 and shift 0,
    /// running statistics reset.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (b, &out_c) in BLOCK_WIDTHS.iter().enumerate() {
            let conv = &mut self.params.tensors_mut()[3 * b];
            let shape = conv.shape().to_vec();
            let in_c = shape[1];
            *conv = glorot_uniform(&shape, in_c * 9, out_c * 9, &mut rng);
            self.params.tensors_mut()[3 * b + 1] = Tensor::full(&[out_c], 1.0);
            self.params.tensors_mut()[3 * b + 2] = Tensor::zeros(&[out_c]);
        }
        self.bn = BLOCK_WIDTHS.map(RunningStats::new);
    }

    /// Maps an `[M, 3, H, W]` batch to `[M, 64]` representations.
    pub fn forward<T: Real>(&mut self, tape: &mut Tape<T>, p: &[Var], x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("conv4", format!("expected [M, 3, H, W], got {shape:?}")));
        }
        if shape[2] < MIN_INPUT_SIDE || shape[3] < MIN_INPUT_SIDE {
            return Err(Error::shape(
                "conv4",
                format!("input side must be >= {MIN_INPUT_SIDE}, got {shape:?}"),
            ));
        }
        self.forward_unchecked(tape, p, x, mode)
    }

    /// Forward without the minimum-resolution check (any side >= 8 works).
    pub fn forward_unchecked<T: Real>(
        &mut self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let mut h = x;
        for b in 0..4 {
            h = tape.conv2d(h, p[3 * b], None, 1, 1)?;
            h = nn::batch_norm(tape, h, p[3 * b + 1], p[3 * b + 2], &mut self.bn[b], mode)?;
            h = tape.relu(h);
            h = if b < 3 {
                tape.avg_pool2d(h, 2, 2)?
            } else {
                tape.global_avg_pool(h)?
            };
        }
        Ok(h)
    }

    /// Inference-mode representations of an `[M, 3, H, W]` batch, computed in
    /// chunks so large datasets fit in memory.
    pub fn embed(&self, images: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("conv4", format!("expected NCHW, got {shape:?}")));
        }
        let per = shape[1..].iter().product::<usize>();
        let mut frozen = self.clone();
        let mut out = Vec::with_capacity(shape[0] * REPR_DIM);
        for start in (0..shape[0]).step_by(chunk.max(1)) {
            let n = chunk.max(1).min(shape[0] - start);
            let mut tape = Tape::<f32>::new();
            let p: Vec<Var> = frozen.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
            let mut s = shape.clone();
            s[0] = n;
            let x = tape.constant(Tensor::new(&s, images.data()[start * per..(start + n) * per].to_vec())?);
            let z = frozen.forward(&mut tape, &p, x, Mode::Eval)?;
            out.extend_from_slice(tape.value(z).data());
        }
        Tensor::new(&[shape[0], REPR_DIM], out)
    }

    pub fn buffers(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.bn
            .iter()
            .enumerate()
            .flat_map(|(b, s)| nn::stats_buffers(s, &format!("{prefix}block{}.bn", b + 1)))
            .collect()
    }

    pub fn load_buffers(&mut self, named: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
        for (b, s) in self.bn.iter_mut().enumerate() {
            nn::load_stats(s, named, &format!("{prefix}block{}.bn", b + 1))?;
        }
        Ok(())
    }
}

/// Linear classifier on frozen representations.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub params: ParamSet,
    classes: usize,
}

impl LinearProbe {
    /// Zero-initialised `[dim, classes]` weight and `[classes]` bias.
    pub fn new(dim: usize, classes: usize) -> Self {
        let mut params = ParamSet::new();
        params.push("weight", Tensor::zeros(&[dim, classes]));
        params.push("bias", Tensor::zeros(&[classes]));
        Self { params, classes }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], z: Var) -> Result<Var> {
        nn::linear(tape, z, p[0], p[1])
    }

    /// Arg-max class of each row of `features`.
    pub fn predict(&self, features: &Tensor<f32>) -> Vec<usize> {
        let w = &self.params.tensors()[0];
        let b = self.params.tensors()[1].data();
        let (d, c) = (w.shape()[0], w.shape()[1]);
        (0..features.shape()[0])
            .map(|i| {
                let row = features.row(i);
                let mut best = (0, f32::NEG_INFINITY);
                for k in 0..c {
                    let s = b[k] + (0..d).map(|j| row[j] * w.data()[j * c + k]).sum::<f32>();
                    if s > best.1 {
                        best = (k, s);
                    }
                }
                best.0
            })
            .collect()
    }
}
