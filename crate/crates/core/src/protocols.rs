//! Pre-training (IID with optional full-head zapping, ASB with per-class row
//! zapping) and transfer (i.i.d. or sequential, linear probe or full model).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{iid_batches, sequential_stream, FewShotDataset, Sample, Split, TaskOrder, View};
use crate::error::{Error, Result};
use crate::instrument::{per_task_losses, AccuracyRow, PertaskRow};
use crate::nn::{argmax_rows, ConvNet, Param, StepOutput, Trainable};
use crate::optim::{Optimizer, OptimizerSpec, StateSlice};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainMode {
    Iid,
    Asb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub zap: bool,
    /// IID passes over the training view.
    pub epochs: usize,
    /// ASB iterations (one class each).
    pub iterations: usize,
    /// ASB: evaluate every this many iterations; 0 = only at the end.
    pub eval_every: usize,
    pub batch_size: usize,
    pub remember_set_size: usize,
    pub optimizer: OptimizerSpec,
    /// Keep optimizer buffers for resampled weights instead of zeroing them.
    pub keep_optimizer_state: bool,
    /// Set per replicate by the caller.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mode: PretrainMode::Iid,
            zap: true,
            epochs: 40,
            iterations: 1000,
            eval_every: 0,
            batch_size: 32,
            remember_set_size: 64,
            optimizer: OptimizerSpec::adam(1e-3),
            keep_optimizer_state: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Iid,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Probe {
    Linear,
    Full,
}

impl Probe {
    pub fn as_str(self) -> &'static str {
        match self {
            Probe::Linear => "linear",
            Probe::Full => "full",
        }
    }

    fn trainable(self) -> Trainable {
        match self {
            Probe::Linear => Trainable::HeadOnly,
            Probe::Full => Trainable::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub mode: TransferMode,
    pub probe: Probe,
    /// Number of transfer classes used; 0 = all in the dataset.
    pub n_tasks: usize,
    pub epochs: usize,
    /// i.i.d. mode only; sequential transfer always uses single examples.
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    /// Per-task loss probe interval in steps (sequential mode); 0 disables.
    pub probe_stride: usize,
    /// Set per replicate by the caller.
    #[serde(skip)]
    pub seed: u64,
    /// Seed of the task order; defaults to `seed`.
    pub task_order_seed: Option<u64>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            mode: TransferMode::Sequential,
            probe: Probe::Linear,
            n_tasks: 0,
            epochs: 3,
            batch_size: 16,
            optimizer: OptimizerSpec::adam(1e-3),
            probe_stride: 5,
            seed: 0,
            task_order_seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eval {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: Eval,
    /// Validation (pre-training) or meta-test (transfer) evaluation.
    pub eval: Eval,
}

/// Per-task losses probed during sequential transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct PerTaskLossGrid {
    pub order: TaskOrder,
    pub steps_per_task: usize,
    pub probes: Vec<ProbePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbePoint {
    pub epoch: usize,
    /// Optimizer steps taken so far in the run.
    pub step: usize,
    /// Indexed by task label.
    pub losses: Vec<f64>,
}

impl PerTaskLossGrid {
    pub fn n_tasks(&self) -> usize {
        self.order.order.len()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_tasks() * self.steps_per_task
    }

    pub fn at_step(&self, step: usize) -> Option<&ProbePoint> {
        self.probes.iter().find(|p| p.step == step)
    }

    /// Loss at the end of `epoch` minus loss when each task finished training
    /// in that epoch, by task label. Negative = the task kept improving.
    pub fn backward_transfer(&self, epoch: usize) -> Result<Vec<f64>> {
        let start = epoch * self.steps_per_epoch();
        let end = self
            .at_step(start + self.steps_per_epoch())
            .ok_or_else(|| Error::Invalid(format!("no probe at the end of epoch {epoch}")))?;
        let mut out = vec![0.0; self.n_tasks()];
        for (pos, &task) in self.order.order.iter().enumerate() {
            let s = start + (pos + 1) * self.steps_per_task;
            let own = self.at_step(s).ok_or_else(|| {
                Error::Invalid(format!("no probe at step {s}; probe stride must divide the task length"))
            })?;
            out[task] = end.losses[task] - own.losses[task];
        }
        Ok(out)
    }

    pub fn rows(&self, run_id: &str, replicate: usize, opt: &OptimizerSpec, probe: Probe) -> Vec<PertaskRow> {
        let pos = self.order.positions();
        let mut rows = Vec::with_capacity(self.probes.len() * self.n_tasks());
        for p in &self.probes {
            let mut by_pos: Vec<(usize, f64)> = p.losses.iter().enumerate().map(|(t, &l)| (pos[t], l)).collect();
            by_pos.sort_by_key(|x| x.0);
            for (task_id, loss) in by_pos {
                rows.push(PertaskRow {
                    run_id: run_id.to_string(),
                    replicate,
                    optimizer: opt.kind.as_str().to_string(),
                    lr: opt.lr,
                    probe: probe.as_str().to_string(),
                    epoch: p.epoch,
                    step: p.step,
                    task_id,
                    loss,
                });
            }
        }
        rows
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: ConvNet,
    /// Transfer only: evaluation of the fresh head before any training.
    pub initial: Option<Eval>,
    pub epochs: Vec<EpochStats>,
    pub pertask: Option<PerTaskLossGrid>,
    /// Optimizer steps taken.
    pub steps: usize,
}

impl RunResult {
    /// accuracy.csv rows; the pre-training evaluation is phase `init`.
    pub fn accuracy_rows(&self, run_id: &str, replicate: usize, phase: &str, eval_split: &str) -> Vec<AccuracyRow> {
        accuracy_rows(self.initial.as_ref(), &self.epochs, run_id, replicate, phase, eval_split)
    }
}

pub fn accuracy_rows(
    initial: Option<&Eval>,
    epochs: &[EpochStats],
    run_id: &str,
    replicate: usize,
    phase: &str,
    eval_split: &str,
) -> Vec<AccuracyRow> {
    let row = |phase: &str, epoch, split: &str, e: &Eval| AccuracyRow {
        run_id: run_id.to_string(),
        replicate,
        phase: phase.to_string(),
        epoch,
        split: split.to_string(),
        accuracy: e.accuracy,
        loss: e.loss,
    };
    let mut rows = Vec::new();
    if let Some(e) = initial {
        rows.push(row("init", 0, eval_split, e));
    }
    for s in epochs {
        rows.push(row(phase, s.epoch, "train", &s.train));
        rows.push(row(phase, s.epoch, eval_split, &s.eval));
    }
    rows
}

/// Snapshot handed to the progress callback at every epoch boundary.
pub struct Progress<'a> {
    pub initial: Option<&'a Eval>,
    pub epochs: &'a [EpochStats],
    pub pertask: Option<&'a PerTaskLossGrid>,
}

pub type Hook<'h> = &'h mut dyn FnMut(&Progress<'_>) -> Result<()>;

/// A callback that does nothing.
pub fn no_hook(_: &Progress<'_>) -> Result<()> {
    Ok(())
}

fn abort(epoch: usize, step: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op, node } => Error::NumericalAbort {
            epoch,
            step,
            detail: format!("non-finite value in {op} (node {node})"),
        },
        other => other,
    }
}

/// Fraction correct and mean loss over a view.
pub fn evaluate(model: &ConvNet, data: &FewShotDataset, view: &View) -> Result<Eval> {
    if view.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty view".into()));
    }
    let (x, y) = data.batch(&view.samples())?;
    Ok(eval_logits(&model.logits(&x)?, &y))
}

pub fn evaluate_accuracy(model: &ConvNet, data: &FewShotDataset, view: &View) -> Result<f64> {
    evaluate(model, data, view).map(|e| e.accuracy)
}

fn eval_logits(logits: &Tensor<f32>, labels: &[usize]) -> Eval {
    let correct = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    let n = labels.len();
    let per_class = per_task_losses(logits, labels, logits.shape()[1]).expect("labels within head");
    // per-class means back to a per-example mean
    let mut counts = vec![0usize; per_class.len()];
    labels.iter().for_each(|&y| counts[y] += 1);
    let loss = per_class
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(l, &c)| l * c as f64)
        .sum::<f64>()
        / n as f64;
    Eval {
        accuracy: correct as f64 / n as f64,
        loss,
    }
}

#[derive(Default)]
struct Running {
    loss: f64,
    correct: usize,
    n: usize,
}

impl Running {
    fn add(&mut self, s: &StepOutput, n: usize) {
        self.loss += s.loss as f64 * n as f64;
        self.correct += s.correct;
        self.n += n;
    }

    fn eval(&self) -> Eval {
        let n = self.n.max(1) as f64;
        Eval {
            accuracy: self.correct as f64 / n,
            loss: self.loss / n,
        }
    }
}

fn check_head(model: &ConvNet, data: &FewShotDataset) -> Result<()> {
    if model.n_classes() != data.n_classes() {
        return Err(Error::Invalid(format!(
            "model head has {} classes, dataset has {}",
            model.n_classes(),
            data.n_classes()
        )));
    }
    Ok(())
}

fn fc_slices() -> [StateSlice; 2] {
    [
        StateSlice::whole(Param::FcWeight.index()),
        StateSlice::whole(Param::FcBias.index()),
    ]
}

fn train_batch(
    model: &mut ConvNet,
    opt: &mut Optimizer<f32>,
    data: &FewShotDataset,
    batch: &[Sample],
    trainable: Trainable,
    (epoch, step): (usize, usize),
) -> Result<StepOutput> {
    let (x, y) = data.batch(batch)?;
    let out = model
        .train_step(&x, &y, trainable)
        .map_err(abort(epoch, step))?;
    opt.step(model.params_mut(), &out.grads)?;
    Ok(out)
}

/// IID pre-training; with `zap`, the fc layer is resampled after each epoch.
pub fn pretrain_iid(
    mut model: ConvNet,
    data: &FewShotDataset,
    split: &Split,
    cfg: &PretrainConfig,
    hook: Hook<'_>,
) -> Result<RunResult> {
    check_head(&model, data)?;
    let mut opt = cfg.optimizer.build::<f32>(Param::ALL.len());
    let mut zap_rng = seed::rng(cfg.seed, Stream::Zap, 0);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut run = Running::default();
        let batches = iid_batches(&split.train, cfg.batch_size, seed::derive(cfg.seed, Stream::DataOrder, epoch as u32))?;
        for b in &batches {
            let out = train_batch(&mut model, &mut opt, data, b, Trainable::All, (epoch, step))?;
            run.add(&out, b.len());
            step += 1;
        }
        // validation sees the trained head, before it is resampled
        let eval = evaluate(&model, data, &split.test)?;
        epochs.push(EpochStats {
            epoch,
            train: run.eval(),
            eval,
        });
        if cfg.zap {
            model.zap_full_fc(&mut zap_rng);
            if !cfg.keep_optimizer_state {
                opt.reset_state_for(&fc_slices())?;
            }
        }
        hook(&Progress {
            initial: None,
            epochs: &epochs,
            pertask: None,
        })?;
    }
    Ok(RunResult {
        model,
        initial: None,
        epochs,
        pertask: None,
        steps: step,
    })
}

/// Alternating Sequential and Batch pre-training.
pub fn pretrain_asb(
    mut model: ConvNet,
    data: &FewShotDataset,
    split: &Split,
    cfg: &PretrainConfig,
    hook: Hook<'_>,
) -> Result<RunResult> {
    check_head(&model, data)?;
    let n_classes = split.train.n_classes();
    let mut opt = cfg.optimizer.build::<f32>(Param::ALL.len());
    let mut zap_rng = seed::rng(cfg.seed, Stream::Zap, 0);
    let mut choice_rng = seed::rng(cfg.seed, Stream::AsbChoice, 0);
    let all = split.train.samples();
    let mut epochs = Vec::new();
    let mut run = Running::default();
    let mut step = 0;
    for it in 0..cfg.iterations {
        let class = choice_rng.random_range(0..n_classes);
        if cfg.zap {
            model.zap_class_row(class, &mut zap_rng)?;
            if !cfg.keep_optimizer_state {
                opt.reset_state_for(&[
                    StateSlice::rows(Param::FcWeight.index(), class..class + 1),
                    StateSlice::rows(Param::FcBias.index(), class..class + 1),
                ])?;
            }
        }
        let seq = split.train.class_samples(class);
        for s in &seq {
            let out = train_batch(&mut model, &mut opt, data, std::slice::from_ref(s), Trainable::All, (it, step))?;
            run.add(&out, 1);
            step += 1;
        }
        let mut batch: Vec<Sample> = (0..cfg.remember_set_size)
            .map(|_| all[choice_rng.random_range(0..all.len())])
            .collect();
        batch.extend_from_slice(&seq);
        let out = train_batch(&mut model, &mut opt, data, &batch, Trainable::All, (it, step))?;
        run.add(&out, batch.len());
        step += 1;

        let last = it + 1 == cfg.iterations;
        if last || (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) {
            epochs.push(EpochStats {
                epoch: epochs.len(),
                train: run.eval(),
                eval: evaluate(&model, data, &split.test)?,
            });
            run = Running::default();
            hook(&Progress {
                initial: None,
                epochs: &epochs,
                pertask: None,
            })?;
        }
    }
    Ok(RunResult {
        model,
        initial: None,
        epochs,
        pertask: None,
        steps: step,
    })
}

pub fn pretrain(model: ConvNet, data: &FewShotDataset, split: &Split, cfg: &PretrainConfig, hook: Hook<'_>) -> Result<RunResult> {
    match cfg.mode {
        PretrainMode::Iid => pretrain_iid(model, data, split, cfg, hook),
        PretrainMode::Asb => pretrain_asb(model, data, split, cfg, hook),
    }
}

fn task_split(split: &Split, n_tasks: usize) -> Result<Split> {
    let total = split.train.n_classes();
    let n = if n_tasks == 0 { total } else { n_tasks };
    if n > total {
        return Err(Error::Invalid(format!("{n} tasks requested, transfer data has {total} classes")));
    }
    let take = |v: &View| View {
        classes: v.classes[..n].to_vec(),
        examples: v.examples[..n].to_vec(),
    };
    Ok(Split {
        train: take(&split.train),
        test: take(&split.test),
    })
}

fn fresh_head(pretrained: &ConvNet, n: usize, seed_: u64) -> Result<ConvNet> {
    let mut model = pretrained.clone();
    model.resize_fc(n, &mut seed::rng(seed_, Stream::TransferHead, 0))?;
    Ok(model)
}

/// Inputs the model is evaluated on: raw images, or cached conv features
/// when only the head trains.
enum Inputs {
    Images(Tensor<f32>),
    Features(Tensor<f32>),
}

struct Cached {
    inputs: Inputs,
    labels: Vec<usize>,
    /// row of each (label, position-within-class)
    row_of: Vec<Vec<usize>>,
}

impl Cached {
    fn new(model: &ConvNet, data: &FewShotDataset, view: &View, probe: Probe) -> Result<Cached> {
        let samples = view.samples();
        let (x, labels) = data.batch(&samples)?;
        let inputs = match probe {
            Probe::Linear => Inputs::Features(model.features(&x)?),
            Probe::Full => Inputs::Images(x),
        };
        let mut row_of = vec![Vec::new(); view.n_classes()];
        for (i, s) in samples.iter().enumerate() {
            row_of[s.label].push(i);
        }
        Ok(Cached { inputs, labels, row_of })
    }

    fn logits(&self, model: &ConvNet) -> Result<Tensor<f32>> {
        match &self.inputs {
            Inputs::Images(x) => model.logits(x),
            Inputs::Features(f) => model.head_logits(f),
        }
    }

    fn eval(&self, model: &ConvNet) -> Result<Eval> {
        Ok(eval_logits(&self.logits(model)?, &self.labels))
    }

    fn rows(&self, rows: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let t = match &self.inputs {
            Inputs::Images(x) | Inputs::Features(x) => x,
        };
        let width = t.numel() / t.shape()[0];
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        Ok((Tensor::new(shape, data)?, rows.iter().map(|&r| self.labels[r]).collect()))
    }

    fn step(&self, model: &ConvNet, rows: &[usize], trainable: Trainable) -> Result<StepOutput> {
        let (x, y) = self.rows(rows)?;
        match self.inputs {
            Inputs::Images(_) => model.train_step(&x, &y, trainable),
            Inputs::Features(_) => model.head_train_step(&x, &y),
        }
    }
}

/// Standard fine-tuning on shuffled batches of the transfer classes.
pub fn transfer_iid(
    pretrained: &ConvNet,
    data: &FewShotDataset,
    split: &Split,
    cfg: &TransferConfig,
    hook: Hook<'_>,
) -> Result<RunResult> {
    let split = task_split(split, cfg.n_tasks)?;
    let mut model = fresh_head(pretrained, split.train.n_classes(), cfg.seed)?;
    let trainable = cfg.probe.trainable();
    let train = Cached::new(&model, data, &split.train, cfg.probe)?;
    let test = Cached::new(&model, data, &split.test, cfg.probe)?;
    let index: Vec<(usize, usize)> = split
        .train
        .samples()
        .iter()
        .map(|s| (s.label, s.example))
        .collect();
    let row = |s: &Sample| index.iter().position(|&k| k == (s.label, s.example)).unwrap();

    let mut opt = cfg.optimizer.build::<f32>(Param::ALL.len());
    let initial = test.eval(&model)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut run = Running::default();
        for b in iid_batches(&split.train, cfg.batch_size, seed::derive(cfg.seed, Stream::DataOrder, epoch as u32))? {
            let rows: Vec<usize> = b.iter().map(row).collect();
            let out = train.step(&model, &rows, trainable).map_err(abort(epoch, step))?;
            opt.step(model.params_mut(), &out.grads)?;
            run.add(&out, rows.len());
            step += 1;
        }
        epochs.push(EpochStats {
            epoch,
            train: run.eval(),
            eval: test.eval(&model)?,
        });
        hook(&Progress {
            initial: Some(&initial),
            epochs: &epochs,
            pertask: None,
        })?;
    }
    Ok(RunResult {
        model,
        initial: Some(initial),
        epochs,
        pertask: None,
        steps: step,
    })
}

/// Continual transfer: one example per step, task after task in a fixed
/// shuffled order, repeated for `cfg.epochs` passes.
pub fn transfer_sequential(
    pretrained: &ConvNet,
    data: &FewShotDataset,
    split: &Split,
    cfg: &TransferConfig,
    hook: Hook<'_>,
) -> Result<RunResult> {
    let split = task_split(split, cfg.n_tasks)?;
    let n_tasks = split.train.n_classes();
    let mut model = fresh_head(pretrained, n_tasks, cfg.seed)?;
    let trainable = cfg.probe.trainable();
    let order = TaskOrder::shuffled(n_tasks, cfg.task_order_seed.unwrap_or(cfg.seed));
    let stream = sequential_stream(&split.train, &order)?;
    let train = Cached::new(&model, data, &split.train, cfg.probe)?;
    let test = Cached::new(&model, data, &split.test, cfg.probe)?;
    // stream samples map to cached rows by (label, position in class)
    let pos_in_class: Vec<usize> = stream
        .iter()
        .map(|s| split.train.examples[s.label].iter().position(|&e| e == s.example).unwrap())
        .collect();

    let steps_per_task = stream.len() / n_tasks.max(1);
    let mut grid = (cfg.probe_stride > 0).then(|| PerTaskLossGrid {
        order: order.clone(),
        steps_per_task,
        probes: Vec::new(),
    });
    let probe = |model: &ConvNet, grid: &mut Option<PerTaskLossGrid>, epoch, step| -> Result<()> {
        if let Some(g) = grid {
            let losses = per_task_losses(&train.logits(model)?, &train.labels, n_tasks)?;
            g.probes.push(ProbePoint { epoch, step, losses });
        }
        Ok(())
    };

    let mut opt = cfg.optimizer.build::<f32>(Param::ALL.len());
    let initial = test.eval(&model)?;
    probe(&model, &mut grid, 0, 0)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut run = Running::default();
        for (s, &p) in stream.iter().zip(&pos_in_class) {
            let r = train.row_of[s.label][p];
            let out = train.step(&model, &[r], trainable).map_err(abort(epoch, step))?;
            opt.step(model.params_mut(), &out.grads)?;
            run.add(&out, 1);
            step += 1;
            if cfg.probe_stride > 0 && step % cfg.probe_stride == 0 {
                probe(&model, &mut grid, epoch, step)?;
            }
        }
        // make sure every epoch boundary has a probe
        if let Some(g) = &grid {
            if g.probes.last().map(|p| p.step) != Some(step) {
                probe(&model, &mut grid, epoch, step)?;
            }
        }
        epochs.push(EpochStats {
            epoch,
            train: run.eval(),
            eval: test.eval(&model)?,
        });
        hook(&Progress {
            initial: Some(&initial),
            epochs: &epochs,
            pertask: grid.as_ref(),
        })?;
    }
    Ok(RunResult {
        model,
        initial: Some(initial),
        epochs,
        pertask: grid,
        steps: step,
    })
}

pub fn transfer(pretrained: &ConvNet, data: &FewShotDataset, split: &Split, cfg: &TransferConfig, hook: Hook<'_>) -> Result<RunResult> {
    match cfg.mode {
        TransferMode::Iid => transfer_iid(pretrained, data, split, cfg, hook),
        TransferMode::Sequential => transfer_sequential(pretrained, data, split, cfg, hook),
    }
}
