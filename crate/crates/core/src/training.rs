//! Per-task optimization: first-task training, the dual-track step (projected
//! stable track plus distilled plastic track), plain fine-tuning, and pooled
//! multi-task training for the joint reference model.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{GradientSet, LossSpec, Network};
use crate::nullspace::Projector;
use crate::numerics::DenseMatrix;
use crate::rng::{derive, streams};
use crate::taskgen::{Samples, TaskMeta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_first_task: f64,
    pub lr_later_tasks: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub optimizer: OptimizerKind,
    /// Weight of the feature-distillation term on the plastic track.
    pub distill_weight: f64,
    /// Relative eigenvalue threshold for null directions.
    pub eps_rel: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr_first_task: 3e-3,
            lr_later_tasks: 1e-2,
            lr_milestones: vec![20, 40],
            lr_decay: 0.5,
            optimizer: OptimizerKind::ADAM,
            distill_weight: 1.0,
            eps_rel: 1e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0, "batch_size must be positive");
        ensure!(
            self.lr_first_task > 0.0 && self.lr_later_tasks > 0.0,
            "learning rates must be positive"
        );
        ensure!(self.lr_decay > 0.0, "lr_decay must be positive");
        ensure!(self.distill_weight >= 0.0, "distill_weight must be >= 0");
        ensure!(
            (0.0..1.0).contains(&self.eps_rel),
            "eps_rel must lie in [0, 1)"
        );
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            ensure!(
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
                "invalid Adam hyperparameters"
            );
        }
        Ok(())
    }

    pub fn lr_multiplier(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr_decay.powi(passed as i32)
    }

    /// The same schedule stretched to a budget of `epochs`.
    pub fn rescaled(&self, epochs: usize) -> TrainConfig {
        let scale = |m: usize| {
            if self.epochs == 0 {
                m
            } else {
                m * epochs / self.epochs
            }
        };
        TrainConfig {
            epochs,
            lr_milestones: self.lr_milestones.iter().map(|&m| scale(m)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: DenseMatrix,
    v: DenseMatrix,
}

impl Moments {
    fn like(p: &DenseMatrix) -> Self {
        Self {
            m: DenseMatrix::zeros(p.rows(), p.cols()),
            v: DenseMatrix::zeros(p.rows(), p.cols()),
        }
    }
}

/// Optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    extractor: Vec<Moments>,
    heads: BTreeMap<usize, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            extractor: Vec::new(),
            heads: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn proposal(
        kind: OptimizerKind,
        step: u64,
        moments: &mut Moments,
        grad: &DenseMatrix,
        lr: f64,
    ) -> DenseMatrix {
        match kind {
            OptimizerKind::Sgd => grad.scale(-lr),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(step as i32);
                let bc2 = 1.0 - beta2.powi(step as i32);
                let mut delta = DenseMatrix::zeros(grad.rows(), grad.cols());
                let (m, v) = (moments.m.as_mut_slice(), moments.v.as_mut_slice());
                for (i, (&g, d)) in grad
                    .as_slice()
                    .iter()
                    .zip(delta.as_mut_slice())
                    .enumerate()
                {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    *d = -lr * m_hat / (v_hat.sqrt() + eps);
                }
                delta
            }
        }
    }

    /// Computes the optimizer's proposed delta for every tensor in `grads`,
    /// projects the extractor deltas through `projector` when given, and adds
    /// them to `net`. Returns the extractor deltas actually applied.
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &GradientSet,
        lr: f64,
        projector: Option<&Projector>,
    ) -> Result<Vec<DenseMatrix>> {
        ensure!(
            grads.extractor.len() == net.extractor().len(),
            "gradient depth does not match the network"
        );
        if self.extractor.is_empty() {
            self.extractor = net.extractor().iter().map(|l| Moments::like(&l.params)).collect();
        }
        ensure!(
            self.extractor.len() == net.extractor().len(),
            "optimizer state does not match the network"
        );
        self.step += 1;
        let mut deltas = Vec::with_capacity(grads.extractor.len());
        for ((g, layer), mom) in grads.extractor.iter().zip(net.extractor()).zip(&mut self.extractor) {
            ensure!(
                g.shape() == layer.params.shape() && mom.m.shape() == g.shape(),
                "gradient shape {:?} does not match layer {:?}",
                g.shape(),
                layer.params.shape()
            );
            deltas.push(Self::proposal(self.kind, self.step, mom, g, lr));
        }
        if let Some(p) = projector {
            deltas = p.project_layers(&deltas)?;
        }
        for (layer, d) in net.extractor_mut().iter_mut().zip(&deltas) {
            layer.params.axpy(1.0, d)?;
        }
        for (&task, g) in &grads.heads {
            let kind = self.kind;
            let step = self.step;
            let head = net
                .head_mut(task)
                .ok_or_else(|| Error::precondition(format!("no head {task}")))?;
            ensure!(head.params.shape() == g.shape(), "head gradient shape mismatch");
            let mom = self
                .heads
                .entry(task)
                .or_insert_with(|| Moments::like(&head.params));
            let d = Self::proposal(kind, step, mom, g, lr);
            head.params.axpy(1.0, &d)?;
        }
        Ok(deltas)
    }
}

/// Mean over rows of `‖f_new − f_old‖²`.
pub fn loss_distill(features_new: &DenseMatrix, features_old: &DenseMatrix) -> Result<f64> {
    ensure!(
        features_new.shape() == features_old.shape(),
        "feature shapes differ: {:?} vs {:?}",
        features_new.shape(),
        features_old.shape()
    );
    ensure!(features_new.rows() > 0, "empty feature batch");
    let total: f64 = features_new
        .as_slice()
        .iter()
        .zip(features_old.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / features_new.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch.
    pub loss: f64,
    /// Training accuracy at the end of the epoch.
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualTrackResult {
    pub stable: Network,
    pub plastic: Network,
    pub stable_history: Vec<EpochLog>,
    pub plastic_history: Vec<EpochLog>,
}

/// Hooks into the stable track's update loop.
pub trait TrainObserver {
    /// Called after every stable-track step with the extractor deltas applied.
    fn on_stable_step(&mut self, _step: usize, _applied: &[DenseMatrix]) {}
}

impl TrainObserver for () {}

/// Fixed-size mini-batches over a per-epoch shuffled order; the tail batch may be short.
struct BatchPlan {
    order: Vec<usize>,
    rng: rand_chacha::ChaCha8Rng,
    batch_size: usize,
}

impl BatchPlan {
    fn new(n: usize, batch_size: usize, seed: u64, stream: u64) -> Self {
        Self {
            order: (0..n).collect(),
            rng: derive(seed, stream),
            batch_size,
        }
    }

    fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Head-local accuracy with argmax ties resolved toward the lowest index.
pub(crate) fn accuracy_rows(
    net: &Network,
    inputs: &DenseMatrix,
    local_labels: &[usize],
    tasks: &[usize],
) -> Result<f64> {
    if local_labels.is_empty() {
        return Ok(0.0);
    }
    let features = net.extract_features(inputs)?;
    let mut logits_by_task: BTreeMap<usize, DenseMatrix> = BTreeMap::new();
    for &t in tasks {
        if !logits_by_task.contains_key(&t) {
            let head = net
                .heads()
                .get(t)
                .ok_or_else(|| Error::precondition(format!("no head for task {t}")))?;
            logits_by_task.insert(t, head.affine(&features)?);
        }
    }
    let correct = (0..local_labels.len())
        .filter(|&i| argmax(logits_by_task[&tasks[i]].row(i)) == local_labels[i])
        .count();
    Ok(correct as f64 / local_labels.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One track trained with a single optimizer; shared by first-task training,
/// fine-tuning and the pooled joint model.
struct PooledData<'a> {
    inputs: &'a DenseMatrix,
    labels: Vec<usize>,
    tasks: Vec<usize>,
}

fn train_pooled_impl(
    net: &mut Network,
    data: &PooledData<'_>,
    cfg: &TrainConfig,
    base_lr: f64,
    order_stream: u64,
) -> Result<Vec<EpochLog>> {
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut plan = BatchPlan::new(data.inputs.rows(), cfg.batch_size, cfg.seed, order_stream);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = base_lr * cfg.lr_multiplier(epoch);
        let mut loss_sum = 0.0;
        let batches = plan.next_epoch();
        for idx in &batches {
            let x = data.inputs.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let t: Vec<usize> = idx.iter().map(|&i| data.tasks[i]).collect();
            net.update_norm_stats(&x)?;
            let (loss, grads) = net.backward_mixed(&x, &y, &t, &LossSpec::CROSS_ENTROPY)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}")));
            }
            opt.step(net, &grads, lr, None)?;
            loss_sum += loss;
        }
        history.push(EpochLog {
            epoch,
            loss: loss_sum / batches.len() as f64,
            acc: accuracy_rows(net, data.inputs, &data.labels, &data.tasks)?,
        });
    }
    Ok(history)
}

/// Trains `net` on the first task with cross-entropy and `lr_first_task`.
pub fn train_first_task(
    mut net: Network,
    meta: &TaskMeta,
    train: &Samples,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochLog>)> {
    cfg.validate()?;
    ensure!(
        net.head_count() > meta.task_id,
        "network has no head for task {}",
        meta.task_id
    );
    let data = PooledData {
        inputs: &train.inputs,
        labels: meta.local_labels(&train.labels)?,
        tasks: vec![meta.task_id; train.len()],
    };
    let history = train_pooled_impl(
        &mut net,
        &data,
        cfg,
        cfg.lr_first_task,
        streams::BATCH_ORDER + meta.task_id as u64,
    )?;
    Ok((net, history))
}

/// Appends a fresh head seeded from `(cfg.seed, task index)`.
pub fn with_new_head(prev: &Network, meta: &TaskMeta, cfg: &TrainConfig) -> Result<Network> {
    ensure!(
        prev.head_count() == meta.task_id,
        "previous network has {} heads; task {} needs exactly that many",
        prev.head_count(),
        meta.task_id
    );
    let mut net = prev.clone();
    net.add_head(meta.num_classes(), cfg.seed)?;
    Ok(net)
}

/// Naive fine-tuning baseline: unprojected cross-entropy training of a new task.
pub fn train_finetune(
    prev: &Network,
    meta: &TaskMeta,
    train: &Samples,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut net = with_new_head(prev, meta, cfg)?;
    let data = PooledData {
        inputs: &train.inputs,
        labels: meta.local_labels(&train.labels)?,
        tasks: vec![meta.task_id; train.len()],
    };
    let history = train_pooled_impl(
        &mut net,
        &data,
        cfg,
        cfg.lr_later_tasks,
        streams::BATCH_ORDER + meta.task_id as u64,
    )?;
    Ok((net, history))
}

/// Multi-head training on the union of several tasks' training sets.
pub fn train_joint(
    mut net: Network,
    tasks: &[(&TaskMeta, &Samples)],
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochLog>)> {
    cfg.validate()?;
    ensure!(!tasks.is_empty(), "joint training needs at least one task");
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    let mut task_ids = Vec::new();
    for (meta, samples) in tasks {
        ensure!(
            net.head_count() > meta.task_id,
            "network has no head for task {}",
            meta.task_id
        );
        parts.push(&samples.inputs);
        labels.extend(meta.local_labels(&samples.labels)?);
        task_ids.extend(std::iter::repeat(meta.task_id).take(samples.len()));
    }
    let inputs = DenseMatrix::vstack(&parts)?;
    let data = PooledData {
        inputs: &inputs,
        labels,
        tasks: task_ids,
    };
    // A single-task pool shares the first-task batch stream, so the joint model
    // over one task is exactly ordinary first-task training.
    let stream = if tasks.len() == 1 {
        streams::BATCH_ORDER + tasks[0].0.task_id as u64
    } else {
        streams::JOINT_ORDER + tasks.len() as u64
    };
    let history = train_pooled_impl(&mut net, &data, cfg, cfg.lr_first_task, stream)?;
    Ok((net, history))
}

/// Trains the stable and plastic tracks for task `meta.task_id`, both starting
/// from `prev` with the same freshly initialized head and fed the same
/// mini-batch sequence.
///
/// The stable track minimizes cross-entropy with every extractor delta projected
/// by `projector`. The plastic track minimizes cross-entropy plus
/// `distill_weight` times the feature distance to `prev`'s (frozen) extractor,
/// without projection.
pub fn train_task_dual(
    prev: &Network,
    projector: &Projector,
    meta: &TaskMeta,
    train: &Samples,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<DualTrackResult> {
    cfg.validate()?;
    ensure!(
        projector.fits(prev),
        "projector does not match the network's extractor"
    );
    ensure!(!train.is_empty(), "empty training set");
    let mut stable = with_new_head(prev, meta, cfg)?;
    let mut plastic = stable.clone();
    assert_eq!(
        stable, plastic,
        "both tracks must start from identical weights"
    );

    let labels = meta.local_labels(&train.labels)?;
    let tasks = vec![meta.task_id; train.len()];
    let reference = if cfg.distill_weight > 0.0 {
        Some(prev.extract_features(&train.inputs)?)
    } else {
        None
    };

    let mut opt_stable = Optimizer::new(cfg.optimizer);
    let mut opt_plastic = Optimizer::new(cfg.optimizer);
    let mut plan = BatchPlan::new(
        train.len(),
        cfg.batch_size,
        cfg.seed,
        streams::BATCH_ORDER + meta.task_id as u64,
    );
    let mut stable_history = Vec::with_capacity(cfg.epochs);
    let mut plastic_history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_later_tasks * cfg.lr_multiplier(epoch);
        let (mut s_loss, mut p_loss) = (0.0, 0.0);
        let batches = plan.next_epoch();
        for idx in &batches {
            let x = train.inputs.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();

            stable.update_norm_stats(&x)?;
            let (ls, gs) = stable.backward(&x, &y, meta.task_id, &LossSpec::CROSS_ENTROPY)?;
            let applied = opt_stable.step(&mut stable, &gs, lr, Some(projector))?;
            observer.on_stable_step(step, &applied);

            plastic.update_norm_stats(&x)?;
            let ref_batch = reference.as_ref().map(|r| r.select_rows(idx));
            let spec = match &ref_batch {
                Some(r) => LossSpec::with_distillation(r, cfg.distill_weight),
                None => LossSpec::CROSS_ENTROPY,
            };
            let (lp, gp) = plastic.backward(&x, &y, meta.task_id, &spec)?;
            opt_plastic.step(&mut plastic, &gp, lr, None)?;

            if !(ls.is_finite() && lp.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch} of task {}",
                    meta.task_id
                )));
            }
            s_loss += ls;
            p_loss += lp;
            step += 1;
        }
        let nb = batches.len() as f64;
        stable_history.push(EpochLog {
            epoch,
            loss: s_loss / nb,
            acc: accuracy_rows(&stable, &train.inputs, &labels, &tasks)?,
        });
        plastic_history.push(EpochLog {
            epoch,
            loss: p_loss / nb,
            acc: accuracy_rows(&plastic, &train.inputs, &labels, &tasks)?,
        });
    }

    Ok(DualTrackResult {
        stable,
        plastic,
        stable_history,
        plastic_history,
    })
}
