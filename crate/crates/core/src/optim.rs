//! Adam and momentum SGD over [`ParamSet`]s.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// One bias-corrected Adam update of a single parameter buffer. `step` is the
/// 1-based index of this update.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f32],
    grads: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(Error::shape(
            "adam_step",
            format!("params {n}, grads {}, moments {}/{}", grads.len(), m.len(), v.len()),
        ));
    }
    if step == 0 {
        return Err(Error::invalid("adam_step: step counter starts at 1"));
    }
    let bc1 = 1.0 - (beta1 as f64).powf(step as f64);
    let bc2 = 1.0 - (beta2 as f64).powf(step as f64);
    for i in 0..n {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] as f64 / bc1;
        let v_hat = v[i] as f64 / bc2;
        params[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
    }
    Ok(())
}

/// Gradient-based optimizer holding per-parameter state.
pub trait Optimizer {
    fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f32>]) -> Result<()>;
    fn lr(&self) -> f32;
    fn set_lr(&mut self, lr: f32);
    /// State buffers as named tensors, for checkpoints.
    fn state(&self, prefix: &str) -> Vec<(String, Tensor<f32>)>;
    fn load_state(&mut self, named: &[(String, Tensor<f32>)], prefix: &str) -> Result<()>;
}

fn check_grads(params: &ParamSet, grads: &[Vec<f32>]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(
            "optimizer",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for ((g, p), name) in grads.iter().zip(params.tensors()).zip(params.names()) {
        if g.len() != p.numel() {
            return Err(Error::shape(
                "optimizer",
                format!("`{name}`: gradient of {} values for shape {:?}", g.len(), p.shape()),
            ));
        }
    }
    Ok(())
}

fn step_tensor(step: u64) -> Tensor<f32> {
    // exact for counts below 2^24
    Tensor::scalar(step as f32)
}

fn find<'a>(named: &'a [(String, Tensor<f32>)], key: &str) -> Result<&'a Tensor<f32>> {
    named
        .iter()
        .find(|(n, _)| n == key)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::format("checkpoint", "tensor", format!("missing `{key}`")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f32) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f32>]) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.len() != params.len() {
            return Err(Error::shape("adam", "optimizer state does not mirror the parameter set"));
        }
        self.step += 1;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            adam_step(
                p.data_mut(),
                &grads[i],
                &mut self.m[i],
                &mut self.v[i],
                self.step,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
            )?;
        }
        Ok(())
    }

    fn lr(&self) -> f32 {
        self.lr
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    fn state(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![(format!("{prefix}step"), step_tensor(self.step))];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            if m.is_empty() {
                continue;
            }
            out.push((format!("{prefix}m.{i}"), Tensor::new(&[m.len()], m.clone()).expect("non-empty")));
            out.push((format!("{prefix}v.{i}"), Tensor::new(&[v.len()], v.clone()).expect("non-empty")));
        }
        out
    }

    fn load_state(&mut self, named: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
        self.step = find(named, &format!("{prefix}step"))?.data()[0] as u64;
        for i in 0..self.m.len() {
            if self.m[i].is_empty() {
                continue;
            }
            for (key, dst) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let t = find(named, &format!("{prefix}{key}.{i}"))?;
                if t.numel() != dst.len() {
                    return Err(Error::format("checkpoint", "tensor", format!("`{prefix}{key}.{i}` size")));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(())
    }
}

/// SGD with classical momentum: `b = μ·b + g; p -= lr·b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    buffers: Vec<Vec<f32>>,
    step: u64,
}

impl Sgd {
    pub fn new(params: &ParamSet, lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            buffers: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f32>]) -> Result<()> {
        check_grads(params, grads)?;
        self.step += 1;
        for ((p, g), b) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.buffers) {
            for ((x, &gi), bi) in p.data_mut().iter_mut().zip(g).zip(b.iter_mut()) {
                *bi = self.momentum * *bi + gi;
                *x -= self.lr * *bi;
            }
        }
        Ok(())
    }

    fn lr(&self) -> f32 {
        self.lr
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    fn state(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![(format!("{prefix}step"), step_tensor(self.step))];
        for (i, b) in self.buffers.iter().enumerate() {
            out.push((format!("{prefix}momentum.{i}"), Tensor::new(&[b.len()], b.clone()).expect("non-empty")));
        }
        out
    }

    fn load_state(&mut self, named: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
        self.step = find(named, &format!("{prefix}step"))?.data()[0] as u64;
        for (i, b) in self.buffers.iter_mut().enumerate() {
            let t = find(named, &format!("{prefix}momentum.{i}"))?;
            if t.numel() != b.len() {
                return Err(Error::format("checkpoint", "tensor", format!("`{prefix}momentum.{i}` size")));
            }
            b.copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// One optimizer for the backbone and one for whatever sits on top of it.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerPair<O> {
    pub backbone: O,
    pub head: O,
}

impl<O: Optimizer> OptimizerPair<O> {
    pub fn set_lr(&mut self, backbone: f32, head: f32) {
        self.backbone.set_lr(backbone);
        self.head.set_lr(head);
    }

    pub fn state(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = self.backbone.state("optim.backbone.");
        out.extend(self.head.state("optim.head."));
        out
    }

    pub fn load_state(&mut self, named: &[(String, Tensor<f32>)]) -> Result<()> {
        self.backbone.load_state(named, "optim.backbone.")?;
        self.head.load_state(named, "optim.head.")
    }
}

impl OptimizerPair<Adam> {
    pub fn adam(backbone: &ParamSet, head: &ParamSet, lr_backbone: f32, lr_head: f32) -> Self {
        Self {
            backbone: Adam::new(backbone, lr_backbone),
            head: Adam::new(head, lr_head),
        }
    }
}

impl OptimizerPair<Sgd> {
    pub fn sgd(backbone: &ParamSet, head: &ParamSet, lr: f32, momentum: f32) -> Self {
        Self {
            backbone: Sgd::new(backbone, lr, momentum),
            head: Sgd::new(head, lr, momentum),
        }
    }
}

/// Learning rate divided by 10 at 50% and again at 75% of `epochs`.
pub fn milestone_lr(base: f32, epoch: usize, epochs: usize) -> f32 {
    let mut lr = base;
    if epochs > 0 && 2 * epoch >= epochs {
        lr /= 10.0;
    }
    if epochs > 0 && 4 * epoch >= 3 * epochs {
        lr /= 10.0;
    }
    lr
}
