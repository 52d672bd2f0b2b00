use super::kernels::{self, ConvGeom};
use super::{Param, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for an operation defined outside the engine.
///
/// The caller computes the forward value; the rule maps the upstream
/// gradient to one gradient per input (`None` for inputs that get nothing).
pub trait GradientRule<F: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_output: &Tensor<F>,
    ) -> Vec<Option<Tensor<F>>>;
}

/// Batch normalization mode.
#[derive(Debug, Clone)]
pub enum NormMode<F> {
    /// Normalize with batch statistics.
    Train { eps: F },
    /// Normalize with supplied running statistics.
    Eval { mean: Vec<F>, var: Vec<F>, eps: F },
}

/// Per-channel batch statistics observed by a training-mode batch norm.
/// `var` is the unbiased estimate, ready for running-average updates.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

enum Op<F: Real> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    ScaleKernels {
        weight: Var,
        mask: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Flatten(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn GradientRule<F>>,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
///
/// Nodes are appended in creation order, which is a topological order of the
/// DAG, so backward is a single reverse sweep that visits each node once.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {}", op_name(&op));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, p: &Param<F>) -> Var {
        self.leaf(p.value.clone())
    }

    /// Copy of `v`'s value cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Kernel-wise broadcast: `out[o, i, :, :] = weight[o, i, :, :] · mask[o, i]`.
    pub fn scale_kernels(&mut self, weight: Var, mask: Var) -> Result<Var> {
        let ws = self.value(weight).shape().to_vec();
        let ms = self.value(mask).shape();
        if ws.len() != 4 || ms != [ws[0], ws[1]] {
            return Err(Error::dim(
                "scale_kernels",
                format!("mask {ms:?} does not match kernels of weight {ws:?}"),
            ));
        }
        let area = ws[2] * ws[3];
        let m = self.value(mask).data();
        let mut out = self.value(weight).data().to_vec();
        for (kernel, &s) in out.chunks_mut(area).zip(m) {
            for v in kernel {
                *v *= s;
            }
        }
        let value = Tensor::new(ws, out)?;
        let rg = self.rg(weight) || self.rg(mask);
        Ok(self.push(value, Op::ScaleKernels { weight, mask }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let (out, cols) = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new([geom.batch, geom.c_out, geom.ho, geom.wo], out)?;
        let rg = self.rg(x) || self.rg(w);
        // cols are only needed for the weight gradient and the input gradient
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, geom, cols }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (value, argmax) = kernels::max_pool_forward(self.value(x), size, stride)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.is_empty() {
            return Err(Error::dim("flatten", "scalar input"));
        }
        let b = s[0];
        let rest: usize = s[1..].iter().product();
        let value = self.value(x).clone().reshape([b, rest])?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Flatten(x), rg))
    }

    /// Fully connected layer with weight layout `(out, in)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = kernels::dense_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    /// Per-channel normalization of `[B, C, H, W]` followed by the affine
    /// `gamma·x̂ + beta`. In train mode the observed batch statistics are
    /// returned so the caller can update its running averages.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: &NormMode<F>,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::dim("batch_norm2d", format!("expected 4-d input, got {s:?}")));
        }
        let (b, c, area) = (s[0], s[1], s[2] * s[3]);
        for v in [gamma, beta] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(
                    "batch_norm2d",
                    format!("affine {:?} for {c} channels", self.value(v).shape()),
                ));
            }
        }
        let xd = self.value(x).data();
        let count = b * area;
        let (mean, var, eps, train) = match mode {
            NormMode::Train { eps } => {
                if count < 2 {
                    return Err(Error::Contract(
                        "train-mode batch norm needs at least two values per channel".into(),
                    ));
                }
                let n = F::from_usize(count).unwrap();
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                for ch in 0..c {
                    let mut acc = F::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * area;
                        acc += xd[base..base + area].iter().copied().sum();
                    }
                    mean[ch] = acc / n;
                    let mut sq = F::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * area;
                        for &v in &xd[base..base + area] {
                            let d = v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq / n;
                }
                (mean, var, *eps, true)
            }
            NormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(
                        "batch_norm2d",
                        format!("running stats of length {} for {c} channels", mean.len()),
                    ));
                }
                (mean.clone(), var.clone(), *eps, false)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![F::zero(); xd.len()];
        let mut out = vec![F::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * area;
                for i in base..base + area {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        let stats = train.then(|| {
            let n = F::from_usize(count).unwrap();
            let unbias = n / (n - F::one());
            BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|&v| v * unbias).collect(),
            }
        });
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((var, stats))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let probs = kernels::softmax_rows(self.value(logits));
        let tiny = F::min_positive_value();
        let loss: F = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[i * classes + l].max(tiny)).ln())
            .sum::<F>()
            / F::from_usize(labels.len()).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::from_usize(self.value(x).len().max(1)).unwrap();
        let value = Tensor::scalar(self.value(x).sum() / n);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Records an externally computed `output` whose gradient is given by
    /// `rule`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<F>,
        rule: impl GradientRule<F> + 'static,
    ) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule: Box::new(rule),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), F::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        node: &Node<F>,
        gy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let mut send = |v: Var, g: Tensor<F>| -> Result<()> {
            if !self.rg(v) {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::dim("backward", format!("{:?} vs {:?}", acc.shape(), g.shape())));
                    }
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, gy.clone())?;
                send(*b, gy.clone())?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                send(*a, gy.zip_map(vb, |g, y| g * y)?)?;
                send(*b, gy.zip_map(va, |g, x| g * x)?)?;
            }
            Op::Scale(a, f) => send(*a, gy.map(|g| g * *f))?,
            Op::ScaleKernels { weight, mask } => {
                let w = self.value(*weight);
                let m = self.value(*mask);
                let area = w.shape()[2] * w.shape()[3];
                if self.rg(*weight) {
                    let mut dw = gy.data().to_vec();
                    for (kernel, &s) in dw.chunks_mut(area).zip(m.data()) {
                        for v in kernel {
                            *v *= s;
                        }
                    }
                    send(*weight, Tensor::new(w.shape().to_vec(), dw)?)?;
                }
                if self.rg(*mask) {
                    let dm: Vec<F> = gy
                        .data()
                        .chunks(area)
                        .zip(w.data().chunks(area))
                        .map(|(g, wk)| g.iter().zip(wk).map(|(&g, &w)| g * w).sum())
                        .collect();
                    send(*mask, Tensor::new(m.shape().to_vec(), dm)?)?;
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.value(*w).data(),
                    cols,
                    gy.data(),
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    send(*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?)?;
                }
                if let Some(dw) = dw {
                    send(*w, Tensor::new(self.value(*w).shape().to_vec(), dw)?)?;
                }
            }
            Op::Relu(x) => {
                send(*x, gy.zip_map(&node.value, |g, y| if y > F::zero() { g } else { F::zero() })?)?
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                let d = dx.data_mut();
                for (&src, &g) in argmax.iter().zip(gy.data()) {
                    d[src] += g;
                }
                send(*x, dx)?;
            }
            Op::Flatten(x) => send(*x, gy.clone().reshape(self.value(*x).shape().to_vec())?)?,
            Op::Dense { x, w, b } => {
                let (dx, dw, db) = kernels::dense_backward(self.value(*x), self.value(*w), gy);
                send(*x, dx)?;
                send(*w, dw)?;
                if let Some(b) = b {
                    send(*b, db)?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.value(*x).shape();
                let (b, c, area) = (s[0], s[1], s[2] * s[3]);
                let gd = gy.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * area;
                        for i in base..base + area {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![F::zero(); gd.len()];
                    let n = F::from_usize(b * area).unwrap();
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch];
                        for bi in 0..b {
                            let base = (bi * c + ch) * area;
                            for i in base..base + area {
                                dx[i] = if *train {
                                    // dx = γ/σ · (g − mean(g) − x̂·mean(g·x̂))
                                    scale * (gd[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    send(*x, Tensor::new(s.to_vec(), dx)?)?;
                }
                send(*gamma, Tensor::new([c], dgamma)?)?;
                send(*beta, Tensor::new([c], dbeta)?)?;
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let classes = self.value(*logits).shape()[1];
                let scale = gy.item() / F::from_usize(labels.len()).unwrap();
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * classes + l] -= F::one();
                }
                for v in &mut d {
                    *v *= scale;
                }
                send(*logits, Tensor::new(self.value(*logits).shape().to_vec(), d)?)?;
            }
            Op::Sum(x) => send(*x, Tensor::full(self.value(*x).shape().to_vec(), gy.item()))?,
            Op::Mean(x) => {
                let n = F::from_usize(self.value(*x).len().max(1)).unwrap();
                send(*x, Tensor::full(self.value(*x).shape().to_vec(), gy.item() / n))?
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = rule.backward(&ins, &node.value, gy);
                if gs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "gradient rule {} returned {} gradients for {} inputs",
                        rule.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g {
                        if g.shape() != self.value(v).shape() {
                            return Err(Error::dim(rule.name(), "gradient shape differs from input"));
                        }
                        send(v, g)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn op_name<F: Real>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::ScaleKernels { .. } => "scale_kernels",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu(_) => "relu",
        Op::MaxPool { .. } => "max_pool2d",
        Op::Flatten(_) => "flatten",
        Op::Dense { .. } => "dense",
        Op::BatchNorm { .. } => "batch_norm2d",
        Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Custom { rule, .. } => rule.name(),
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of `v`, or `None` when no path from the loss reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when the leaf is off the loss path.
    pub fn wrt(&self, graph: &Graph<F>, v: Var) -> Tensor<F> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape().to_vec()))
    }

    /// Accumulates the gradient of leaf `v` into `param`, writing zeros when
    /// the leaf is off the loss path.
    pub fn accumulate_into(&self, graph: &Graph<F>, v: Var, param: &mut Param<F>) -> Result<()> {
        param.accumulate(&self.wrt(graph, v))
    }
}
