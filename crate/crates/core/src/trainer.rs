//! Initial-task training, per-task mask learning and the run ledger.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{make_strategy, MaskPipeline, Strategy, StrategySpec};
use crate::data::{Dataset, TaskDescriptor, TaskSequence};
use crate::error::{Error, Result};
use crate::mask::{MaskHyperparams, SoftMask};
use crate::model::{
    forward_graph, Backbone, BackboneConfig, ForwardVars, Head, MaskSource, NormState, TaskArtifact, TaskState,
    Trainables,
};
use crate::tensor::{Graph, LrSchedule, OptimizerKind, OptimizerState, Param, Real, Tensor};

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_factor`.
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub seed: u64,
    pub strategy: StrategySpec,
    pub hp: MaskHyperparams,
    pub backbone: BackboneConfig,
    /// Id of the task trained from scratch before all others.
    pub init_task: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: 10 epochs, batch 64, Adam at 1e-4 decayed ×0.1
    /// half-way, kernel-wise soft masks.
    pub fn new(backbone: BackboneConfig) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            optimizer: OptimizerKind::adam(),
            lr: 1e-4,
            milestones: vec![5],
            lr_factor: 0.1,
            seed: 0,
            strategy: StrategySpec::KSM,
            hp: MaskHyperparams::default(),
            backbone,
            init_task: 1,
        }
    }

    /// Sets `epochs` and moves the single decay milestone to half-way.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.milestones = if epochs >= 2 { vec![epochs / 2] } else { Vec::new() };
        self
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr,
            milestones: self.milestones.clone(),
            factor: self.lr_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.hp.validate()?;
        self.backbone.validate()?;
        Ok(())
    }

    fn task_rng(&self, task_id: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(task_id as u64);
        rng
    }
}

/// Test-set accuracy (fraction correct) and mean cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// Shuffled minibatches; a trailing batch of one image joins the previous
/// batch so train-mode normalization always sees two samples.
fn minibatches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

fn check_task_data(task: &TaskDescriptor, config: &BackboneConfig) -> Result<()> {
    if task.train.dims != config.input {
        return Err(Error::dim(
            "train",
            format!("task {} images {:?} vs backbone input {:?}", task.id, task.train.dims, config.input),
        ));
    }
    Ok(())
}

fn update_norms<F: Real>(norms: &mut [NormState<F>], stats: Vec<Option<crate::tensor::BatchStats<F>>>) {
    for (n, s) in norms.iter_mut().zip(stats) {
        if let Some(s) = s {
            n.update_running(&s);
        }
    }
}

fn accumulate_common<F: Real>(
    g: &Graph<F>,
    grads: &crate::tensor::Gradients<F>,
    vars: &ForwardVars,
    norms: &mut [NormState<F>],
    head: &mut Head<F>,
) -> Result<()> {
    for ((gv, bv), n) in vars.norms.iter().zip(norms.iter_mut()) {
        grads.accumulate_into(g, *gv, &mut n.gamma)?;
        grads.accumulate_into(g, *bv, &mut n.beta)?;
    }
    let (hw, hb) = vars.head.expect("forward records the head");
    grads.accumulate_into(g, hw, &mut head.weight)?;
    grads.accumulate_into(g, hb, &mut head.bias)
}

/// Updates every backbone weight, its normalization and its head on one
/// batch.
fn dense_step<F: Real>(
    backbone: &mut Backbone<F>,
    norms: &mut [NormState<F>],
    head: &mut Head<F>,
    opt: &mut OptimizerState<F>,
    x: Tensor<F>,
    y: &[usize],
) -> Result<()> {
    let mut g = Graph::new();
    let all = Trainables {
        backbone: true,
        norms: true,
        head: true,
    };
    let (logits, vars, stats) = forward_graph(&mut g, backbone, MaskSource::None, norms, head, x, true, all)?;
    let loss = g.softmax_cross_entropy(logits, y)?;
    let grads = g.backward(loss)?;
    for (v, p) in vars.conv.iter().zip(backbone.conv.iter_mut()) {
        grads.accumulate_into(&g, *v, p)?;
    }
    for ((wv, bv), (w, b)) in vars.dense.iter().zip(backbone.dense.iter_mut()) {
        grads.accumulate_into(&g, *wv, w)?;
        grads.accumulate_into(&g, *bv, b)?;
    }
    accumulate_common(&g, &grads, &vars, norms, head)?;
    update_norms(norms, stats);
    let mut params = backbone.params_mut();
    params.push(&mut head.weight);
    params.push(&mut head.bias);
    for n in norms.iter_mut() {
        params.push(&mut n.gamma);
        params.push(&mut n.beta);
    }
    opt.step(&mut params)
}

fn artifact_with_identity<F: Real>(
    task_id: usize,
    hp: MaskHyperparams,
    backbone: &Backbone<F>,
    head: Head<F>,
    norms: Vec<NormState<F>>,
) -> TaskArtifact<F> {
    TaskArtifact {
        task_id,
        hp,
        masks: backbone
            .config
            .conv_shapes()
            .iter()
            .map(|s| SoftMask::identity(s[..2].to_vec()))
            .collect(),
        real_masks: None,
        head: Head {
            weight: Param::new(head.weight.value),
            bias: Param::new(head.bias.value),
        },
        norms: norms
            .into_iter()
            .map(|n| NormState {
                gamma: Param::new(n.gamma.value),
                beta: Param::new(n.beta.value),
                ..n
            })
            .collect(),
        backbone_hash: backbone.content_hash(),
    }
}

/// Trains a backbone from scratch on the initial task, freezes it, and
/// returns it with the task's identity-mask artifact.
pub fn train_initial<F: Real>(task: &TaskDescriptor, cfg: &TrainConfig) -> Result<(Backbone<F>, TaskArtifact<F>)> {
    cfg.validate()?;
    check_task_data(task, &cfg.backbone)?;
    let mut rng = cfg.task_rng(task.id);
    let mut backbone = Backbone::init(cfg.backbone.clone(), &mut rng)?;
    let mut norms: Vec<NormState<F>> = cfg.backbone.norm_channels().into_iter().map(NormState::new).collect();
    let mut head = Head::init(cfg.backbone.feature_dim()?, task.num_classes(), &mut rng);
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.schedule());
    for epoch in 0..cfg.epochs {
        opt.set_epoch(epoch);
        for batch in minibatches(task.train.len(), cfg.batch_size, &mut rng) {
            let (x, y) = task.train.batch::<F>(&batch);
            dense_step(&mut backbone, &mut norms, &mut head, &mut opt, x, &y)?;
        }
    }
    backbone.freeze();
    let artifact = artifact_with_identity(task.id, cfg.hp, &backbone, head, norms);
    Ok((backbone, artifact))
}

/// Learns the masks, normalization and head of one task against a frozen
/// backbone. `reference_norms` (the initial task's) seed the task's
/// normalization. Returns the artifact and the seconds spent in the
/// training loop.
pub fn train_task<F: Real>(
    task: &TaskDescriptor,
    backbone: &Backbone<F>,
    reference_norms: &[NormState<F>],
    cfg: &TrainConfig,
) -> Result<(TaskArtifact<F>, f64)> {
    if !backbone.is_frozen() {
        return Err(Error::Contract("mask training needs a frozen backbone".into()));
    }
    cfg.validate()?;
    check_task_data(task, &backbone.config)?;
    let strategy = make_strategy(cfg.strategy, cfg.hp)?;
    let pipeline = strategy
        .pipeline()
        .ok_or_else(|| Error::Contract("fine-tuning does not learn masks; use train_finetune".into()))?;
    let mut rng = cfg.task_rng(task.id);
    let mut state = TaskState::new(task.id, backbone, Some(pipeline), reference_norms, task.num_classes(), &mut rng)?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.schedule());
    let hash = backbone.content_hash();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        opt.set_epoch(epoch);
        for batch in minibatches(task.train.len(), cfg.batch_size, &mut rng) {
            let (x, y) = task.train.batch::<F>(&batch);
            mask_step(backbone, pipeline, &mut state, &mut opt, x, &y, &mut rng)?;
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    if backbone.content_hash() != hash {
        return Err(Error::Contract("backbone changed during mask training".into()));
    }
    Ok((state.into_artifact(Some(pipeline), cfg.hp, backbone)?, seconds))
}

fn mask_step<F: Real>(
    backbone: &Backbone<F>,
    pipeline: &MaskPipeline,
    state: &mut TaskState<F>,
    opt: &mut OptimizerState<F>,
    x: Tensor<F>,
    y: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut g = Graph::new();
    let trainables = Trainables {
        backbone: false,
        norms: true,
        head: true,
    };
    let noise = if pipeline.hp.gumbel {
        Some(rng as &mut dyn rand::RngCore)
    } else {
        None
    };
    let source = MaskSource::Live {
        pipeline,
        real: &state.real_masks,
        rng: noise,
    };
    let (logits, vars, stats) = forward_graph(&mut g, backbone, source, &state.norms, &state.head, x, true, trainables)?;
    let loss = g.softmax_cross_entropy(logits, y)?;
    let grads = g.backward(loss)?;
    for (v, p) in vars.real_masks.iter().zip(state.real_masks.iter_mut()) {
        grads.accumulate_into(&g, *v, p)?;
    }
    accumulate_common(&g, &grads, &vars, &mut state.norms, &mut state.head)?;
    update_norms(&mut state.norms, stats);
    let mut params: Vec<&mut Param<F>> = state.trainable_parameters().into_iter().map(|(_, p)| p).collect();
    opt.step(&mut params)
}

/// Fine-tuning reference: trains `working` (an unfrozen backbone shared by
/// all tasks), a fresh head and the task's normalization. Earlier tasks see
/// the updated weights, so they may be forgotten.
pub fn train_finetune<F: Real>(
    task: &TaskDescriptor,
    working: &mut Backbone<F>,
    reference_norms: &[NormState<F>],
    cfg: &TrainConfig,
) -> Result<(TaskArtifact<F>, f64)> {
    if working.is_frozen() {
        return Err(Error::Contract("fine-tuning needs an unfrozen backbone copy".into()));
    }
    cfg.validate()?;
    check_task_data(task, &working.config)?;
    let mut rng = cfg.task_rng(task.id);
    let mut norms: Vec<NormState<F>> = reference_norms.to_vec();
    let mut head = Head::init(working.config.feature_dim()?, task.num_classes(), &mut rng);
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.schedule());
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        opt.set_epoch(epoch);
        for batch in minibatches(task.train.len(), cfg.batch_size, &mut rng) {
            let (x, y) = task.train.batch::<F>(&batch);
            dense_step(working, &mut norms, &mut head, &mut opt, x, &y)?;
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok((artifact_with_identity(task.id, cfg.hp, working, head, norms), seconds))
}

/// Eval-mode accuracy and loss of one task. Deterministic.
pub fn evaluate<F: Real>(backbone: &Backbone<F>, artifact: &TaskArtifact<F>, data: &Dataset) -> Result<Evaluation> {
    if artifact.head.classes() < data.num_classes() {
        return Err(Error::dim(
            "evaluate",
            format!("head has {} classes, data {}", artifact.head.classes(), data.num_classes()),
        ));
    }
    let (mut correct, mut loss) = (0usize, 0.0f64);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = data.batch::<F>(chunk);
        let logits = crate::model::evaluate_logits(backbone, artifact, x)?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks(classes).zip(&y) {
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let (best, max) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            if best == label {
                correct += 1;
            }
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
    }
    let total = data.len();
    Ok(Evaluation {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        loss: if total == 0 { 0.0 } else { loss / total as f64 },
        correct,
        total,
    })
}

/// Schema version of the JSON ledger.
pub const LEDGER_SCHEMA: u32 = 1;

/// Results of one run. Rows are in training order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub schema: u32,
    pub strategy: String,
    pub seed: u64,
    pub task_ids: Vec<usize>,
    /// Accuracy on each task after the whole run.
    pub final_accuracy: Vec<f64>,
    /// Wall-clock seconds of each task's training loop.
    pub seconds: Vec<f64>,
    pub epochs: Vec<usize>,
    /// `matrix[i][j]`: accuracy on task `i` after finishing task `j`;
    /// `None` for `j < i`.
    pub matrix: Vec<Vec<Option<f64>>>,
}

impl RunLedger {
    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }

    pub fn mean_final_accuracy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.final_accuracy.iter().sum::<f64>() / self.len() as f64
    }

    /// True when every later measurement of a task equals its first one
    /// bit for bit.
    pub fn no_forgetting(&self) -> bool {
        self.matrix.iter().enumerate().all(|(i, row)| {
            let diag = row[i].map(f64::to_bits);
            row[i..].iter().all(|v| v.map(f64::to_bits) == diag)
        })
    }
}

/// Backbone, artifacts and ledger of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome<F> {
    /// The frozen backbone from the initial task.
    pub backbone: Backbone<F>,
    /// Final fine-tuned weights; `None` for mask strategies.
    pub finetuned: Option<Backbone<F>>,
    /// Artifacts in training order.
    pub artifacts: Vec<TaskArtifact<F>>,
    pub ledger: RunLedger,
}

impl<F: Real> RunOutcome<F> {
    /// The weights to evaluate every artifact against.
    pub fn eval_backbone(&self) -> &Backbone<F> {
        self.finetuned.as_ref().unwrap_or(&self.backbone)
    }
}

/// Trains the initial task, then every other task in sequence order,
/// evaluating all finished tasks after each one.
pub fn run_sequence<F: Real>(tasks: &TaskSequence, cfg: &TrainConfig) -> Result<RunOutcome<F>> {
    cfg.validate()?;
    let strategy = make_strategy(cfg.strategy, cfg.hp)?;
    let first = tasks.get(cfg.init_task).ok_or(Error::UnknownTask(cfg.init_task))?;
    let order: Vec<&TaskDescriptor> = std::iter::once(first)
        .chain(tasks.tasks.iter().filter(|t| t.id != cfg.init_task))
        .collect();
    let n = order.len();
    let mut matrix = vec![vec![None; n]; n];
    let mut seconds = Vec::with_capacity(n);

    let start = Instant::now();
    let (backbone, initial) = train_initial::<F>(first, cfg)?;
    seconds.push(start.elapsed().as_secs_f64());
    let hash = backbone.content_hash();
    let reference_norms = initial.norms.clone();
    let mut working = match strategy {
        Strategy::Finetune => Some(backbone.unfrozen_clone()),
        Strategy::Mask(_) => None,
    };
    let mut artifacts = vec![initial];
    matrix[0][0] = Some(evaluate(&backbone, &artifacts[0], &first.test)?.accuracy);

    for (j, task) in order.iter().enumerate().skip(1) {
        let (artifact, secs) = match working.as_mut() {
            Some(w) => train_finetune(task, w, &reference_norms, cfg)?,
            None => train_task(task, &backbone, &reference_norms, cfg)?,
        };
        seconds.push(secs);
        artifacts.push(artifact);
        let eval_backbone = working.as_ref().unwrap_or(&backbone);
        for (i, done) in order.iter().enumerate().take(j + 1) {
            matrix[i][j] = Some(evaluate(eval_backbone, &artifacts[i], &done.test)?.accuracy);
        }
        if backbone.content_hash() != hash {
            return Err(Error::Contract("frozen backbone changed during the run".into()));
        }
    }

    let final_accuracy = matrix.iter().map(|row| row[n - 1].expect("filled")).collect();
    let ledger = RunLedger {
        schema: LEDGER_SCHEMA,
        strategy: cfg.strategy.to_string(),
        seed: cfg.seed,
        task_ids: order.iter().map(|t| t.id).collect(),
        final_accuracy,
        seconds,
        epochs: vec![cfg.epochs; n],
        matrix,
    };
    Ok(RunOutcome {
        backbone,
        finetuned: working,
        artifacts,
        ledger,
    })
}
