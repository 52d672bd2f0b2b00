//! Frozen backbone with per-task soft masks, normalization and heads.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::MaskPipeline;
use crate::error::{Error, Result};
use crate::mask::{MaskHyperparams, SoftMask};
use crate::tensor::{conv_output_extent, BatchStats, Graph, NormMode, Param, Real, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        c_out: usize,
        c_in: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        norm: bool,
        relu: bool,
    },
    /// Max pooling with window and stride `size`.
    Pool { size: usize },
    /// Fully connected feature layer; flattens its input.
    Dense {
        out_features: usize,
        in_features: usize,
        relu: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// `(channels, height, width)` of one input image.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

fn conv(c_in: usize, c_out: usize) -> LayerSpec {
    LayerSpec::Conv {
        c_out,
        c_in,
        kernel: 3,
        stride: 1,
        pad: 1,
        norm: true,
        relu: true,
    }
}

impl BackboneConfig {
    /// Stack of 3×3 conv + norm + relu layers, each followed by 2×2 pooling,
    /// then one dense feature layer.
    pub fn conv_stack(input: [usize; 3], channels: &[usize], features: usize) -> Self {
        let mut layers = Vec::new();
        let mut c = input[0];
        let (mut h, mut w) = (input[1], input[2]);
        for &out in channels {
            layers.push(conv(c, out));
            c = out;
            if h >= 2 && w >= 2 {
                layers.push(LayerSpec::Pool { size: 2 });
                h /= 2;
                w /= 2;
            }
        }
        layers.push(LayerSpec::Dense {
            out_features: features,
            in_features: c * h * w,
            relu: true,
        });
        BackboneConfig { input, layers }
    }

    /// Default desk-scale backbone for 32×32 RGB inputs.
    pub fn desk() -> Self {
        Self::conv_stack([3, 32, 32], &[32, 64, 128, 128], 256)
    }

    /// Narrow variant of [`desk`](Self::desk) for CPU-bound sweeps.
    pub fn small() -> Self {
        Self::conv_stack([3, 32, 32], &[16, 32, 64, 64], 128)
    }

    /// Named conv-stack preset (`desk`, `small`, `tiny`) for any input size.
    pub fn preset(name: &str, input: [usize; 3]) -> Result<Self> {
        let (channels, features): (&[usize], usize) = match name {
            "desk" => (&[32, 64, 128, 128], 256),
            "small" => (&[16, 32, 64, 64], 128),
            "tiny" => (&[8, 16], 32),
            _ => return Err(Error::Config(format!("unknown backbone preset {name:?}"))),
        };
        let config = Self::conv_stack(input, channels, features);
        config.validate()?;
        Ok(config)
    }

    /// VGG16-BN layout adapted to 32×32 inputs.
    pub fn vgg16_cifar() -> Self {
        let plan: &[&[usize]] = &[&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
        let mut layers = Vec::new();
        let mut c = 3;
        for block in plan {
            for &out in *block {
                layers.push(conv(c, out));
                c = out;
            }
            layers.push(LayerSpec::Pool { size: 2 });
        }
        layers.push(LayerSpec::Dense {
            out_features: 512,
            in_features: 512,
            relu: true,
        });
        BackboneConfig {
            input: [3, 32, 32],
            layers,
        }
    }

    /// Checks that consecutive layers compose; returns the feature dimension.
    pub fn validate(&self) -> Result<usize> {
        let [mut c, mut h, mut w] = self.input;
        let mut flat: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |detail: String| Error::Config(format!("layer {i}: {detail}"));
            match *layer {
                LayerSpec::Conv {
                    c_out,
                    c_in,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    if flat.is_some() {
                        return Err(bad("conv after dense".into()));
                    }
                    if c_in != c {
                        return Err(bad(format!("expects {c_in} channels, receives {c}")));
                    }
                    if c_out == 0 {
                        return Err(bad("zero output channels".into()));
                    }
                    let (Some(ho), Some(wo)) = (
                        conv_output_extent(h, kernel, stride, pad),
                        conv_output_extent(w, kernel, stride, pad),
                    ) else {
                        return Err(bad(format!("kernel {kernel} does not fit {h}x{w}")));
                    };
                    (c, h, w) = (c_out, ho, wo);
                }
                LayerSpec::Pool { size } => {
                    if flat.is_some() {
                        return Err(bad("pool after dense".into()));
                    }
                    let (Some(ho), Some(wo)) = (
                        conv_output_extent(h, size, size, 0),
                        conv_output_extent(w, size, size, 0),
                    ) else {
                        return Err(bad(format!("pool {size} does not fit {h}x{w}")));
                    };
                    (h, w) = (ho, wo);
                }
                LayerSpec::Dense {
                    out_features,
                    in_features,
                    ..
                } => {
                    let incoming = flat.unwrap_or(c * h * w);
                    if in_features != incoming {
                        return Err(bad(format!("expects {in_features} inputs, receives {incoming}")));
                    }
                    flat = Some(out_features);
                }
            }
        }
        Ok(flat.unwrap_or(c * h * w))
    }

    pub fn feature_dim(&self) -> Result<usize> {
        self.validate()
    }

    /// `(c_out, c_in, kh, kw)` of every conv layer in order.
    pub fn conv_shapes(&self) -> Vec<[usize; 4]> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::Conv {
                    c_out, c_in, kernel, ..
                } => Some([c_out, c_in, kernel, kernel]),
                _ => None,
            })
            .collect()
    }

    /// Channel count of every normalized conv layer in order.
    pub fn norm_channels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::Conv { c_out, norm: true, .. } => Some(c_out),
                _ => None,
            })
            .collect()
    }

    pub fn dense_shapes(&self) -> Vec<[usize; 2]> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::Dense {
                    out_features,
                    in_features,
                    ..
                } => Some([out_features, in_features]),
                _ => None,
            })
            .collect()
    }

    /// Number of kernel-wise mask scalars, `Σ c_out·c_in`.
    pub fn mask_scalars(&self) -> usize {
        self.conv_shapes().iter().map(|s| s[0] * s[1]).sum()
    }
}

fn he_normal<F: Real>(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<F> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| F::from_f64_lossy(normal.sample(rng)))
}

/// Shared feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<F> {
    pub config: BackboneConfig,
    pub conv: Vec<Param<F>>,
    /// `(weight, bias)` of each dense feature layer.
    pub dense: Vec<(Param<F>, Param<F>)>,
    frozen: bool,
}

impl<F: Real> Backbone<F> {
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let conv = config
            .conv_shapes()
            .into_iter()
            .map(|s| Param::new(he_normal(rng, s.to_vec(), s[1] * s[2] * s[3])))
            .collect();
        let dense = config
            .dense_shapes()
            .into_iter()
            .map(|[o, i]| {
                (
                    Param::new(he_normal(rng, vec![o, i], i)),
                    Param::new(Tensor::zeros([o])),
                )
            })
            .collect();
        Ok(Backbone {
            config,
            conv,
            dense,
            frozen: false,
        })
    }

    /// Assembles a backbone from stored weights, checking shapes.
    pub fn from_weights(
        config: BackboneConfig,
        conv: Vec<Tensor<F>>,
        dense: Vec<(Tensor<F>, Tensor<F>)>,
        frozen: bool,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = config.conv_shapes();
        let dshapes = config.dense_shapes();
        if shapes.len() != conv.len() || dshapes.len() != dense.len() {
            return Err(Error::CountMismatch("layer count differs from config".into()));
        }
        for (s, w) in shapes.iter().zip(&conv) {
            if w.shape() != s {
                return Err(Error::dim("backbone", format!("conv {:?} vs {s:?}", w.shape())));
            }
        }
        for ([o, i], (w, b)) in dshapes.iter().zip(&dense) {
            if w.shape() != [*o, *i] || b.shape() != [*o] {
                return Err(Error::dim("backbone", "dense weight shape differs from config"));
            }
        }
        Ok(Backbone {
            config,
            conv: conv.into_iter().map(Param::new).collect(),
            dense: dense.into_iter().map(|(w, b)| (Param::new(w), Param::new(b))).collect(),
            frozen,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A trainable copy.
    pub fn unfrozen_clone(&self) -> Self {
        Backbone {
            frozen: false,
            ..self.clone()
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out: Vec<&mut Param<F>> = self.conv.iter_mut().collect();
        for (w, b) in &mut self.dense {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// SHA-256 over every weight tensor's shape and little-endian f32 data.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let tensors = self
            .conv
            .iter()
            .map(|p| &p.value)
            .chain(self.dense.iter().flat_map(|(w, b)| [&w.value, &b.value]));
        for t in tensors {
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(t.to_f32_le_bytes());
        }
        h.finalize().into()
    }
}

/// Task-private batch-norm parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

impl<F: Real> NormState<F> {
    pub fn new(channels: usize) -> Self {
        NormState {
            gamma: Param::new(Tensor::ones([channels])),
            beta: Param::new(Tensor::zeros([channels])),
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
        }
    }

    pub fn eval_mode(&self) -> NormMode<F> {
        NormMode::Eval {
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
            eps: F::from_f64_lossy(NORM_EPS),
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats<F>) {
        let m = F::from_f64_lossy(NORM_MOMENTUM);
        let keep = F::one() - m;
        for (r, &s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * s;
        }
        for (r, &s) in self.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * s;
        }
    }
}

/// Task-private linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> Head<F> {
    pub fn init(features: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (features.max(1) as f64).sqrt();
        Head {
            weight: Param::new(Tensor::from_fn([classes, features], |_| {
                F::from_f64_lossy(rng.random_range(-bound..bound))
            })),
            bias: Param::new(Tensor::zeros([classes])),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

/// Everything needed to evaluate one task on top of the shared backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskArtifact<F> {
    pub task_id: usize,
    pub hp: MaskHyperparams,
    /// One frozen soft mask per conv layer.
    pub masks: Vec<SoftMask<F>>,
    /// Trained real masks, kept for resuming; not needed for evaluation.
    pub real_masks: Option<Vec<Tensor<F>>>,
    pub head: Head<F>,
    pub norms: Vec<NormState<F>>,
    /// Content hash of the backbone the masks were trained against.
    pub backbone_hash: [u8; 32],
}

/// Identity of a trainable parameter for task `t ≥ 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    RealMask(usize),
    HeadWeight,
    HeadBias,
    NormScale(usize),
    NormShift(usize),
}

/// Mutable state of a task under mask training.
#[derive(Debug, Clone)]
pub struct TaskState<F> {
    pub task_id: usize,
    pub real_masks: Vec<Param<F>>,
    pub head: Head<F>,
    pub norms: Vec<NormState<F>>,
}

impl<F: Real> TaskState<F> {
    /// Real masks at their initial value; normalization copied from
    /// `reference` (the initial task) so the first forward reproduces the
    /// backbone features.
    pub fn new(
        task_id: usize,
        backbone: &Backbone<F>,
        pipeline: Option<&MaskPipeline>,
        reference_norms: &[NormState<F>],
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let real_masks = match pipeline {
            Some(p) => backbone
                .config
                .conv_shapes()
                .iter()
                .map(|s| Param::new(p.init_real(s)))
                .collect(),
            None => Vec::new(),
        };
        if reference_norms.len() != backbone.config.norm_channels().len() {
            return Err(Error::CountMismatch("reference normalization layer count".into()));
        }
        let norms = reference_norms
            .iter()
            .map(|n| NormState {
                gamma: Param::new(n.gamma.value.clone()),
                beta: Param::new(n.beta.value.clone()),
                running_mean: n.running_mean.clone(),
                running_var: n.running_var.clone(),
            })
            .collect();
        Ok(TaskState {
            task_id,
            real_masks,
            head: Head::init(backbone.config.feature_dim()?, classes, rng),
            norms,
        })
    }

    /// Exactly the parameters optimized for this task: one real mask per
    /// conv layer, the head, and the task's normalization affine pairs.
    pub fn trainable_parameters(&mut self) -> Vec<(ParamRole, &mut Param<F>)> {
        let mut out: Vec<(ParamRole, &mut Param<F>)> = self
            .real_masks
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamRole::RealMask(i), p))
            .collect();
        out.push((ParamRole::HeadWeight, &mut self.head.weight));
        out.push((ParamRole::HeadBias, &mut self.head.bias));
        for (i, n) in self.norms.iter_mut().enumerate() {
            out.push((ParamRole::NormScale(i), &mut n.gamma));
            out.push((ParamRole::NormShift(i), &mut n.beta));
        }
        out
    }

    pub fn into_artifact(
        self,
        pipeline: Option<&MaskPipeline>,
        hp: MaskHyperparams,
        backbone: &Backbone<F>,
    ) -> Result<TaskArtifact<F>> {
        let shapes = backbone.config.conv_shapes();
        let (masks, real) = match pipeline {
            Some(p) => {
                let masks = self
                    .real_masks
                    .iter()
                    .map(|m| p.freeze(&m.value))
                    .collect::<Result<Vec<_>>>()?;
                (masks, Some(self.real_masks.into_iter().map(|p| p.value).collect()))
            }
            None => (shapes.iter().map(|s| SoftMask::identity(s[..2].to_vec())).collect(), None),
        };
        Ok(TaskArtifact {
            task_id: self.task_id,
            hp,
            masks,
            real_masks: real,
            head: strip(self.head),
            norms: self.norms.into_iter().map(strip_norm).collect(),
            backbone_hash: backbone.content_hash(),
        })
    }
}

fn strip<F: Real>(h: Head<F>) -> Head<F> {
    Head {
        weight: Param::new(h.weight.value),
        bias: Param::new(h.bias.value),
    }
}

fn strip_norm<F: Real>(n: NormState<F>) -> NormState<F> {
    NormState {
        gamma: Param::new(n.gamma.value),
        beta: Param::new(n.beta.value),
        ..n
    }
}

/// `conv2d(x, W ⊙ M)` with `M` broadcast over each kernel when it has shape
/// `(c_out, c_in)`, or applied element-wise when it has the weight's shape.
/// With `weight` recorded as a constant, gradients reach the mask only.
pub fn masked_conv_forward<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    weight: Var,
    mask: Option<Var>,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let effective = match mask {
        None => weight,
        Some(m) => {
            let ws = g.value(weight).shape();
            let ms = g.value(m).shape();
            if ms == ws {
                g.mul(weight, m)?
            } else if ws.len() == 4 && ms == [ws[0], ws[1]] {
                g.scale_kernels(weight, m)?
            } else {
                return Err(Error::dim(
                    "masked_conv_forward",
                    format!("mask {ms:?} does not fit weight {ws:?}"),
                ));
            }
        }
    };
    g.conv2d(x, effective, stride, pad)
}

/// Where per-layer masks come from during a forward pass.
pub enum MaskSource<'a, F> {
    /// No masking: the raw backbone.
    None,
    Frozen(&'a [SoftMask<F>]),
    Live {
        pipeline: &'a MaskPipeline,
        real: &'a [Param<F>],
        rng: Option<&'a mut dyn rand::RngCore>,
    },
}

/// Tape handles created by [`forward_graph`].
#[derive(Debug, Default)]
pub struct ForwardVars {
    pub conv: Vec<Var>,
    pub dense: Vec<(Var, Var)>,
    pub real_masks: Vec<Var>,
    pub norms: Vec<(Var, Var)>,
    pub head: Option<(Var, Var)>,
    pub logits: Option<Var>,
}

/// Options controlling which leaves receive gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct Trainables {
    pub backbone: bool,
    pub norms: bool,
    pub head: bool,
}

/// Records a full forward pass (backbone, masks, normalization, head) and
/// returns the logits plus tape handles and per-norm-layer batch statistics.
#[allow(clippy::too_many_arguments)]
pub fn forward_graph<F: Real>(
    g: &mut Graph<F>,
    backbone: &Backbone<F>,
    masks: MaskSource<'_, F>,
    norms: &[NormState<F>],
    head: &Head<F>,
    x: Tensor<F>,
    train_norm: bool,
    trainables: Trainables,
) -> Result<(Var, ForwardVars, Vec<Option<BatchStats<F>>>)> {
    let config = &backbone.config;
    let expected = config.input;
    let xs = x.shape();
    if xs.len() != 4 || xs[1..] != expected[..] {
        return Err(Error::dim(
            "forward",
            format!("input {xs:?} does not match backbone input {expected:?}"),
        ));
    }
    if norms.len() != config.norm_channels().len() {
        return Err(Error::CountMismatch(format!(
            "{} norm states for {} norm layers",
            norms.len(),
            config.norm_channels().len()
        )));
    }
    let mut vars = ForwardVars::default();
    let leaf = |g: &mut Graph<F>, t: &Tensor<F>, train: bool| {
        if train {
            g.leaf(t.clone())
        } else {
            g.constant(t.clone())
        }
    };

    let mut mask_vars: Vec<Option<Var>> = Vec::with_capacity(backbone.conv.len());
    match masks {
        MaskSource::None => mask_vars.resize(backbone.conv.len(), None),
        MaskSource::Frozen(ms) => {
            if ms.len() != backbone.conv.len() {
                return Err(Error::CountMismatch(format!(
                    "{} masks for {} conv layers",
                    ms.len(),
                    backbone.conv.len()
                )));
            }
            for m in ms {
                mask_vars.push(Some(g.constant(m.values())));
            }
        }
        MaskSource::Live {
            pipeline,
            real,
            mut rng,
        } => {
            if real.len() != backbone.conv.len() {
                return Err(Error::CountMismatch(format!(
                    "{} real masks for {} conv layers",
                    real.len(),
                    backbone.conv.len()
                )));
            }
            for r in real {
                let rv = g.param(r);
                vars.real_masks.push(rv);
                let m = pipeline.build(g, rv, rng.as_mut().map(|r| &mut **r as &mut dyn rand::RngCore))?;
                mask_vars.push(Some(m));
            }
        }
    }

    let mut h = g.constant(x);
    let mut stats = Vec::new();
    let (mut conv_i, mut norm_i, mut dense_i) = (0, 0, 0);
    for layer in &config.layers {
        match *layer {
            LayerSpec::Conv {
                stride, pad, norm, relu, ..
            } => {
                let w = leaf(g, &backbone.conv[conv_i].value, trainables.backbone);
                vars.conv.push(w);
                h = masked_conv_forward(g, h, w, mask_vars[conv_i], stride, pad)?;
                conv_i += 1;
                if norm {
                    let state = &norms[norm_i];
                    let gamma = leaf(g, &state.gamma.value, trainables.norms);
                    let beta = leaf(g, &state.beta.value, trainables.norms);
                    vars.norms.push((gamma, beta));
                    let mode = if train_norm {
                        NormMode::Train {
                            eps: F::from_f64_lossy(NORM_EPS),
                        }
                    } else {
                        state.eval_mode()
                    };
                    let (out, s) = g.batch_norm2d(h, gamma, beta, &mode)?;
                    stats.push(s);
                    h = out;
                    norm_i += 1;
                }
                if relu {
                    h = g.relu(h);
                }
            }
            LayerSpec::Pool { size } => h = g.max_pool2d(h, size, size)?,
            LayerSpec::Dense { relu, .. } => {
                if g.value(h).shape().len() != 2 {
                    h = g.flatten(h)?;
                }
                let (w, b) = &backbone.dense[dense_i];
                let wv = leaf(g, &w.value, trainables.backbone);
                let bv = leaf(g, &b.value, trainables.backbone);
                vars.dense.push((wv, bv));
                h = g.dense(h, wv, Some(bv))?;
                if relu {
                    h = g.relu(h);
                }
                dense_i += 1;
            }
        }
    }
    if g.value(h).shape().len() != 2 {
        h = g.flatten(h)?;
    }
    let hw = leaf(g, &head.weight.value, trainables.head);
    let hb = leaf(g, &head.bias.value, trainables.head);
    vars.head = Some((hw, hb));
    let logits = g.dense(h, hw, Some(hb))?;
    vars.logits = Some(logits);
    Ok((logits, vars, stats))
}

/// Eval-mode logits of one task.
pub fn evaluate_logits<F: Real>(
    backbone: &Backbone<F>,
    artifact: &TaskArtifact<F>,
    x: Tensor<F>,
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let (logits, _, _) = forward_graph(
        &mut g,
        backbone,
        MaskSource::Frozen(&artifact.masks),
        &artifact.norms,
        &artifact.head,
        x,
        false,
        Trainables::default(),
    )?;
    Ok(g.value(logits).clone())
}

/// Frozen backbone plus the artifacts of every finished task.
#[derive(Debug, Clone)]
pub struct ContinualModel<F> {
    pub backbone: Backbone<F>,
    artifacts: BTreeMap<usize, TaskArtifact<F>>,
}

impl<F: Real> ContinualModel<F> {
    pub fn new(backbone: Backbone<F>) -> Self {
        ContinualModel {
            backbone,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, artifact: TaskArtifact<F>) {
        self.artifacts.insert(artifact.task_id, artifact);
    }

    pub fn artifact(&self, task: usize) -> Result<&TaskArtifact<F>> {
        self.artifacts.get(&task).ok_or(Error::UnknownTask(task))
    }

    pub fn task_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.artifacts.keys().copied()
    }

    /// Logits of task `task` using the backbone and that task's artifact only.
    pub fn forward_task(&self, x: Tensor<F>, task: usize) -> Result<Tensor<F>> {
        evaluate_logits(&self.backbone, self.artifact(task)?, x)
    }
}
