use super::conv::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of a training-mode batch-norm call, used by the
/// caller to update its running estimates.
#[derive(Clone, Debug)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    /// Produced from inputs none of which require grad; never replayed.
    Constant,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Log(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    AvgPool2d {
        x: Var,
        k: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    FocalBce {
        y: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Linear record of executed ops; the push order is a topological order.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims_str(shapes: &[&[usize]]) -> String {
    shapes
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Clamp bound applied to scores before taking logs in the BCE ops.
pub const PROB_CLAMP: f64 = 1e-7;

/// Per-element focal BCE term and its (stop-gradient) weight.
pub fn focal_term<T: Real>(y: T, t: T, gamma: T) -> (T, T) {
    let eps = T::lit(PROB_CLAMP);
    let yc = y.max(eps).min(T::one() - eps);
    let half = T::lit(0.5);
    let base = (T::one() - t) * yc + t * (T::one() - yc);
    let w = if gamma == T::zero() {
        half
    } else {
        half * base.powf(gamma)
    };
    let term = -w * (t * yc.ln() + (T::one() - t) * (T::one() - yc).ln());
    (term, w)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Drops every recorded node so the tape can be reused for another step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, dims_str(&[self.shape(a), self.shape(b)])));
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn rank4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::shape(op, format!("expected NCHW, got {s:?}"))),
        }
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(Tensor { shape, data }, op, &[x])
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let shape = self.shape(a).to_vec();
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Tensor { shape, data }, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.rank2("matmul", a)?;
        let (k2, m) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", dims_str(&[self.shape(a), self.shape(b)])));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, self.data(a), false, self.data(b), false, &mut out, false);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `[D]` bias to every row of an `[N, D]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = self.rank2("add_bias", x)?;
        if self.shape(b) != [d] {
            return Err(Error::shape("add_bias", dims_str(&[self.shape(x), self.shape(b)])));
        }
        let bias = self.data(b);
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::AddBias(x, b), &[x, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise maximum; on ties the gradient flows to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("maximum", a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.map(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), |v| v.ln())
    }

    /// 2-D convolution of `[N, C, H, W]` by `[O, C, KH, KW]` with optional `[O]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.rank4("conv2d", x)?;
        let [o, c2, kh, kw] = self.rank4("conv2d", w)?;
        if c != c2 || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("{} (stride {stride}, pad {pad})", dims_str(&[self.shape(x), self.shape(w)])),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {o} filters", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            out_c: o,
            kh,
            kw,
            stride,
            pad,
        };
        let out = conv::forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let shape = vec![n, o, geom.out_h(), geom.out_w()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor { shape, data: out }, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Channel layout `(N, C, S)` of a batch-norm input, `S` = spatial size.
    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::shape("batch_norm", format!("expected [N, C] or NCHW, got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let spatial = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                dims_str(&[s, self.shape(gamma), self.shape(beta)]),
            ));
        }
        Ok((n, c, spatial))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: Vec<T>, training: bool) -> Var {
        let (n, c, s) = self.bn_layout(x, gamma, beta).expect("validated by caller");
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * s;
                for i in off..off + s {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = h * g[ci] + b[ci];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor { shape, data: out },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            &[x, gamma, beta],
        )
    }

    /// Training-mode batch norm: normalizes with the batch's own statistics
    /// over (batch, spatial) per channel and returns them for running updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchNormStats<T>)> {
        let (n, c, s) = self.bn_layout(x, gamma, beta)?;
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let count = T::from_usize(n * s).expect("count");
        let xd = self.data(x);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut acc = T::zero();
            for ni in 0..n {
                let off = (ni * c + ci) * s;
                acc = acc + xd[off..off + s].iter().copied().sum::<T>();
            }
            let m = acc / count;
            let mut sq = T::zero();
            for ni in 0..n {
                let off = (ni * c + ci) * s;
                sq = sq + xd[off..off + s].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
            mean[ci] = m;
            var[ci] = sq / count;
        }
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true);
        let bessel = count / (count - T::one());
        let unbiased = var.into_iter().map(|v| v * bessel).collect();
        Ok((out, BatchNormStats { mean, var: unbiased }))
    }

    /// Inference-mode batch norm with fixed statistics; a pure function of `x`.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, c, _) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats of width {} for {c} channels", running_mean.len()),
            ));
        }
        let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, running_mean, inv_std, false))
    }

    /// Average pooling without padding.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.rank4("avg_pool2d", x)?;
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(Error::shape(
                "avg_pool2d",
                format!("{:?} with kernel {k} stride {stride}", self.shape(x)),
            ));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let norm = T::one() / T::from_usize(k * k).expect("k");
        let xd = self.data(x);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let row = (oy * stride + ky) * w + ox * stride;
                        acc = acc + src[row..row + k].iter().copied().sum::<T>();
                    }
                    dst[oy * ow + ox] = acc * norm;
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, c, oh, ow],
                data: out,
            },
            Op::AvgPool2d { x, k, stride },
            &[x],
        ))
    }

    /// Adaptive average pooling to 1×1, returned flattened as `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4("global_avg_pool", x)?;
        let s = h * w;
        let norm = T::one() / T::from_usize(s).expect("s");
        let data = self
            .data(x)
            .chunks(s)
            .map(|p| p.iter().copied().sum::<T>() * norm)
            .collect();
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).expect("numel");
        let s = self.data(x).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Row sums of an `[N, D]` matrix as `[N, 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.rank2("sum_rows", x)?;
        let data = self.data(x).chunks(d).map(|r| r.iter().copied().sum()).collect();
        Ok(self.push(Tensor { shape: vec![n, 1], data }, Op::SumRows(x), &[x]))
    }

    /// Concatenation of `[N, D_i]` matrices along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        let rows = self.rank2("concat", parts[0])?.0;
        for &p in parts {
            let (r, w) = self.rank2("concat", p)?;
            if r != rows {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
                return Err(Error::shape("concat", dims_str(&shapes)));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, total],
                data,
            },
            Op::Concat(parts.to_vec()),
            parts,
        ))
    }

    /// Columns `start..start + len` of an `[N, D]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.rank2("slice_cols", x)?;
        if len == 0 || start + len > d {
            return Err(Error::shape(
                "slice_cols",
                format!("{:?} columns {start}..{}", self.shape(x), start + len),
            ));
        }
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        Ok(self.push(
            Tensor {
                shape: vec![n, len],
                data,
            },
            Op::SliceCols { x, start },
            &[x],
        ))
    }

    /// Selects rows of an `[N, D]` matrix; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.rank2("gather_rows", x)?;
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {:?}", self.shape(x))));
        }
        let xd = self.data(x);
        let data = rows.iter().flat_map(|&r| xd[r * d..(r + 1) * d].iter().copied()).collect();
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), d],
                data,
            },
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.rank2("softmax_cross_entropy", logits)?;
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels (max {:?}) for logits {:?}", labels.len(), labels.iter().max(), self.shape(logits)),
            ));
        }
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for (i, row) in self.data(logits).chunks(c).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                probs[i * c + j] = (v - mx).exp() / z;
            }
            loss = loss - (row[labels[i]] - mx - z.ln());
        }
        loss = loss / T::from_usize(n).expect("n");
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Focal-weighted binary cross-entropy averaged over all scores.
    ///
    /// Scores are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`; the focal weight
    /// `½·[(1-t)·y + t·(1-y)]^γ` is held constant during backward, so this is
    /// [`Tape::weighted_bce`] with the weights taken at the current scores.
    pub fn focal_bce(&mut self, y: Var, targets: &[T], gamma: T) -> Result<Var> {
        if !(gamma >= T::zero()) {
            return Err(Error::invalid(format!("focal_bce: gamma must be >= 0, got {gamma:?}")));
        }
        if targets.len() != self.value(y).numel() {
            return Err(Error::shape(
                "focal_bce",
                format!("{} targets for scores {:?}", targets.len(), self.shape(y)),
            ));
        }
        let weights: Vec<T> = self
            .data(y)
            .iter()
            .zip(targets)
            .map(|(&yi, &ti)| focal_term(yi, ti, gamma).1)
            .collect();
        self.weighted_bce(y, targets, &weights)
    }

    /// Binary cross-entropy with fixed per-element weights, averaged over all
    /// scores. Scores are clamped as in [`Tape::focal_bce`].
    pub fn weighted_bce(&mut self, y: Var, targets: &[T], weights: &[T]) -> Result<Var> {
        let n = self.value(y).numel();
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "weighted_bce",
                format!(
                    "{} targets and {} weights for scores {:?}",
                    targets.len(),
                    weights.len(),
                    self.shape(y)
                ),
            ));
        }
        let eps = T::lit(PROB_CLAMP);
        let mut loss = T::zero();
        for ((&yi, &ti), &w) in self.data(y).iter().zip(targets).zip(weights) {
            let yc = yi.max(eps).min(T::one() - eps);
            loss = loss - w * (ti * yc.ln() + (T::one() - ti) * (T::one() - yc).ln());
        }
        loss = loss / T::from_usize(n).expect("len");
        Ok(self.push(
            Tensor::scalar(loss),
            Op::FocalBce {
                y,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[y],
        ))
    }

    /// Reverse pass from a scalar loss. Populates the gradient of every
    /// grad-requiring leaf. Calling it twice without [`Tape::reset`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("tape already consumed by a previous backward; reset it first"));
        }
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty graph"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Backward("loss does not depend on any tensor requiring grad"));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if matches!(node.op, Op::Leaf) {
                rest[0].grad = Some(g);
                continue;
            }
            for (j, contrib) in input_grads(node, &g, before) {
                let target = &mut before[j.0];
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c),
                    None => target.grad = Some(contrib),
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }
}

fn needs<T>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn val<T>(nodes: &[Node<T>], v: Var) -> &Tensor<T> {
    &nodes[v.0].value
}

/// Adjoint contributions of one node to each grad-requiring input.
fn input_grads<T: Real>(node: &Node<T>, g: &[T], nodes: &[Node<T>]) -> Vec<(Var, Vec<T>)> {
    let mut out = Vec::new();
    let mut emit = |v: Var, f: &mut dyn FnMut() -> Vec<T>| {
        if needs(nodes, v) {
            out.push((v, f()));
        }
    };
    let out_value = &node.value;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (n, k) = (val(nodes, *a).shape()[0], val(nodes, *a).shape()[1]);
            let m = val(nodes, *b).shape()[1];
            emit(*a, &mut || {
                let mut da = vec![T::zero(); n * k];
                T::gemm(n, m, k, g, false, val(nodes, *b).data(), true, &mut da, false);
                da
            });
            emit(*b, &mut || {
                let mut db = vec![T::zero(); k * m];
                T::gemm(k, n, m, val(nodes, *a).data(), true, g, false, &mut db, false);
                db
            });
        }
        Op::AddBias(x, b) => {
            emit(*x, &mut || g.to_vec());
            emit(*b, &mut || {
                let d = val(nodes, *b).numel();
                let mut db = vec![T::zero(); d];
                for row in g.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(a, &r)| *a = *a + r);
                }
                db
            });
        }
        Op::Add(a, b) => {
            emit(*a, &mut || g.to_vec());
            emit(*b, &mut || g.to_vec());
        }
        Op::Sub(a, b) => {
            emit(*a, &mut || g.to_vec());
            emit(*b, &mut || g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            emit(*a, &mut || g.iter().zip(val(nodes, *b).data()).map(|(&g, &y)| g * y).collect());
            emit(*b, &mut || g.iter().zip(val(nodes, *a).data()).map(|(&g, &x)| g * x).collect());
        }
        Op::Maximum(a, b) => {
            let (ad, bd) = (val(nodes, *a).data(), val(nodes, *b).data());
            emit(*a, &mut || {
                g.iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&g, (&x, &y))| if x >= y { g } else { T::zero() })
                    .collect()
            });
            emit(*b, &mut || {
                g.iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&g, (&x, &y))| if x >= y { T::zero() } else { g })
                    .collect()
            });
        }
        Op::Scale(x, c) => emit(*x, &mut || g.iter().map(|&v| v * *c).collect()),
        Op::Relu(x) => emit(*x, &mut || {
            g.iter()
                .zip(val(nodes, *x).data())
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect()
        }),
        Op::LeakyRelu(x, slope) => emit(*x, &mut || {
            g.iter()
                .zip(val(nodes, *x).data())
                .map(|(&g, &v)| if v > T::zero() { g } else { g * *slope })
                .collect()
        }),
        Op::Sigmoid(x) => emit(*x, &mut || {
            g.iter()
                .zip(out_value.data())
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect()
        }),
        Op::Log(x) => emit(*x, &mut || {
            g.iter().zip(val(nodes, *x).data()).map(|(&g, &v)| g / v).collect()
        }),
        Op::Conv2d { x, w, b, geom } => {
            let need = (needs(nodes, *x), needs(nodes, *w), b.is_some_and(|b| needs(nodes, b)));
            let grads = conv::backward(geom, val(nodes, *x).data(), val(nodes, *w).data(), g, need);
            if let Some(dx) = grads.dx {
                out.push((*x, dx));
            }
            if let Some(dw) = grads.dw {
                out.push((*w, dw));
            }
            if let (Some(b), Some(db)) = (b, grads.db) {
                out.push((*b, db));
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        } => {
            let shape = val(nodes, *x).shape();
            let (n, c) = (shape[0], shape[1]);
            let s: usize = shape[2..].iter().product();
            let gam = val(nodes, *gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * s;
                    for i in off..off + s {
                        dgamma[ci] = dgamma[ci] + g[i] * xhat[i];
                        dbeta[ci] = dbeta[ci] + g[i];
                    }
                }
            }
            emit(*x, &mut || {
                let mut dx = vec![T::zero(); g.len()];
                let count = T::from_usize(n * s).expect("count");
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * s;
                        for i in off..off + s {
                            dx[i] = if *training {
                                // dxhat = g·γ; sums over the channel are dbeta·γ and dgamma·γ
                                gam[ci] * inv_std[ci] / count
                                    * (count * g[i] - dbeta[ci] - xhat[i] * dgamma[ci])
                            } else {
                                g[i] * gam[ci] * inv_std[ci]
                            };
                        }
                    }
                }
                dx
            });
            emit(*gamma, &mut || dgamma.clone());
            emit(*beta, &mut || dbeta.clone());
        }
        Op::AvgPool2d { x, k, stride } => emit(*x, &mut || {
            let s = val(nodes, *x).shape();
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
            let norm = T::one() / T::from_usize(k * k).expect("k");
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(p * oh + oy) * ow + ox] * norm;
                        for ky in 0..*k {
                            let row = p * h * w + (oy * stride + ky) * w + ox * stride;
                            dx[row..row + k].iter_mut().for_each(|d| *d = *d + gv);
                        }
                    }
                }
            }
            dx
        }),
        Op::GlobalAvgPool(x) => emit(*x, &mut || {
            let s = val(nodes, *x).shape();
            let spatial = s[2] * s[3];
            let norm = T::one() / T::from_usize(spatial).expect("s");
            g.iter()
                .flat_map(|&gv| std::iter::repeat_n(gv * norm, spatial))
                .collect()
        }),
        Op::Sum(x) => emit(*x, &mut || vec![g[0]; val(nodes, *x).numel()]),
        Op::Mean(x) => emit(*x, &mut || {
            let n = val(nodes, *x).numel();
            vec![g[0] / T::from_usize(n).expect("n"); n]
        }),
        Op::SumRows(x) => emit(*x, &mut || {
            let d = val(nodes, *x).shape()[1];
            g.iter().flat_map(|&gv| std::iter::repeat_n(gv, d)).collect()
        }),
        Op::Concat(parts) => {
            let total = out_value.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let w = val(nodes, p).shape()[1];
                emit(p, &mut || {
                    g.chunks(total)
                        .flat_map(|row| row[offset..offset + w].iter().copied())
                        .collect()
                });
                offset += w;
            }
        }
        Op::SliceCols { x, start } => emit(*x, &mut || {
            let d = val(nodes, *x).shape()[1];
            let len = out_value.shape()[1];
            let mut dx = vec![T::zero(); val(nodes, *x).numel()];
            for (r, row) in g.chunks(len).enumerate() {
                dx[r * d + start..r * d + start + len].copy_from_slice(row);
            }
            dx
        }),
        Op::Gather { x, rows } => emit(*x, &mut || {
            let d = val(nodes, *x).shape()[1];
            let mut dx = vec![T::zero(); val(nodes, *x).numel()];
            for (i, &r) in rows.iter().enumerate() {
                dx[r * d..(r + 1) * d]
                    .iter_mut()
                    .zip(&g[i * d..(i + 1) * d])
                    .for_each(|(a, &b)| *a = *a + b);
            }
            dx
        }),
        Op::Reshape(x) => emit(*x, &mut || g.to_vec()),
        Op::SoftmaxCrossEntropy { logits, labels, probs } => emit(*logits, &mut || {
            let c = val(nodes, *logits).shape()[1];
            let scale = g[0] / T::from_usize(labels.len()).expect("n");
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (i, &l) in labels.iter().enumerate() {
                d[i * c + l] = d[i * c + l] - scale;
            }
            d
        }),
        Op::FocalBce { y, targets, weights } => emit(*y, &mut || {
            let eps = T::lit(PROB_CLAMP);
            let scale = g[0] / T::from_usize(targets.len()).expect("n");
            val(nodes, *y)
                .data()
                .iter()
                .zip(targets.iter().zip(weights))
                .map(|(&yi, (&t, &w))| {
                    if yi < eps || yi > T::one() - eps {
                        T::zero()
                    } else {
                        -w * (t / yi - (T::one() - t) / (T::one() - yi)) * scale
                    }
                })
                .collect()
        }),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_and_leaky_relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, -1.0, 2.0]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        let l = tape.leaky_relu(x, 0.01);
        assert_eq!(tape.value(l).data(), &[0.0, -0.01, 2.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::eye(3));
        let a = tape.constant(t(&[3, 3], &[1.0, -2.0, 3.0, 4.5, 0.0, 6.0, -7.0, 8.0, 9.0]));
        let p = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(p), tape.value(a));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn batch_norm_rejects_single_sample_in_training() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.batch_norm_train(x, g, b, 1e-5), Err(Error::BatchTooSmall(1))));
        // inference mode is fine
        assert!(tape.batch_norm_eval(x, g, b, &[0.0; 4], &[1.0; 4], 1e-5).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        let y = tape.scale(x, 2.0);
        assert!(tape.backward(y).is_err());
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        assert!(tape.backward(s).is_err());
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn non_grad_inputs_are_not_recorded_as_ops() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        let y = tape.relu(x);
        assert!(!tape.requires_grad(y));
        let s = tape.sum(y);
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn gradients_accumulate_over_fanout() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let g = tape.gather_rows(x, &[0, 0, 1]).unwrap();
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_fn(&[3, 2], |i| i as f32));
        let b = tape.constant(Tensor::from_fn(&[3, 4], |i| -(i as f32)));
        let c = tape.concat(&[a, b]).unwrap();
        let a2 = tape.slice_cols(c, 0, 2).unwrap();
        let b2 = tape.slice_cols(c, 2, 4).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }

    #[test]
    fn batch_norm_eval_is_pure() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[4, 2, 2, 2], |i| i as f32 * 0.3));
        let g = tape.constant(Tensor::full(&[2], 1.5));
        let b = tape.constant(Tensor::full(&[2], -0.5));
        let y1 = tape.batch_norm_eval(x, g, b, &[0.2, 0.1], &[2.0, 0.5], 1e-5).unwrap();
        let y2 = tape.batch_norm_eval(x, g, b, &[0.2, 0.1], &[2.0, 0.5], 1e-5).unwrap();
        assert_eq!(tape.value(y1), tape.value(y2));
    }
}
