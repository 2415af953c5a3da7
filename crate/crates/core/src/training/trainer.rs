use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{MetricRecord, OptimizerState, Regime, TrainConfig};
use crate::degradations::{generate_pairs, psnr, sample_seed, SamplePair, TaskSpec};
use crate::error::{Error, Result};
use crate::model::TinyIpt;
use crate::modulation::{BiasPack, TaskId};
use crate::nn::{GradientTape, Grads, Module, ParamId, ParamRole};
use crate::rng;

/// Which parameters an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableSet {
    /// Every shared tensor; no task-specific tensors.
    Backbone,
    /// Shared tensors plus the active task's own tensors.
    BackboneAndActiveTask,
    /// Only the active task's own tensors.
    ActiveTaskOnly,
}

impl TrainableSet {
    pub fn contains(self, id: &ParamId, active: &TaskId) -> bool {
        let backbone = id.role == ParamRole::Backbone;
        let own = id.role.task() == Some(active);
        match self {
            TrainableSet::Backbone => backbone,
            TrainableSet::BackboneAndActiveTask => backbone || own,
            TrainableSet::ActiveTaskOnly => own,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Mean absolute error over the batch.
    pub loss: f64,
    /// Norm of the trainable gradient before clipping.
    pub grad_norm: f64,
    pub updated_tensors: usize,
}

fn batch_task(batch: &[SamplePair]) -> Result<&TaskId> {
    let first = batch.first().ok_or_else(|| Error::Protocol("empty batch".into()))?;
    if let Some(other) = batch.iter().find(|p| p.task != first.task) {
        return Err(Error::Protocol(format!(
            "batch mixes tasks `{}` and `{}`",
            first.task, other.task
        )));
    }
    Ok(&first.task)
}

/// L1 loss and its gradient for one sample; the gradient is pre-divided by
/// `denom` so per-sample gradients sum to the batch-mean gradient.
fn sample_gradients(model: &TinyIpt<f32>, pair: &SamplePair, denom: f64) -> Result<(f64, Grads<f32>)> {
    let mut tape = GradientTape::new();
    let y = model.forward(&pair.degraded, &mut tape)?;
    let mut abs_sum = 0.0f64;
    let scale = (1.0 / denom) as f32;
    let dy = y.zip_map(&pair.clean, |a, b| {
        let d = a - b;
        if d > 0.0 {
            scale
        } else if d < 0.0 {
            -scale
        } else {
            0.0
        }
    })?;
    for (a, b) in y.data().iter().zip(pair.clean.data()) {
        abs_sum += (*a as f64 - *b as f64).abs();
    }
    let g = model.backward(&mut tape, &dy)?;
    Ok((abs_sum / denom, g.params))
}

/// One optimizer step on a single-task batch. Activates the batch's task,
/// computes the batch-mean L1 gradient (samples in parallel, reduced in a
/// fixed order) and updates only the parameters in `trainable`.
pub fn train_step(
    model: &mut TinyIpt<f32>,
    batch: &[SamplePair],
    trainable: TrainableSet,
    opt: &mut OptimizerState<f32>,
    lr: f64,
    max_grad_norm: Option<f64>,
) -> Result<StepOutcome> {
    let task = batch_task(batch)?.clone();
    model.set_active_task(Some(&task))?;
    let denom = (batch.len() * batch[0].clean.len()) as f64;
    let per_sample: Vec<(f64, Grads<f32>)> = batch
        .par_iter()
        .map(|p| sample_gradients(model, p, denom))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads = Grads::new();
    for (l, g) in per_sample {
        loss += l;
        grads.merge(g)?;
    }
    grads.retain(|id| trainable.contains(id, &task));
    if grads.is_empty() {
        return Err(Error::State(format!(
            "nothing to train for task `{task}` in {trainable:?}"
        )));
    }
    let grad_norm = grads.global_norm();
    let step = opt.step_count() as usize + 1;
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("task `{task}`, loss {loss}, gradient norm {grad_norm}, lr {lr}"),
        });
    }
    if let Some(max) = max_grad_norm {
        if grad_norm > max {
            grads.scale((max / grad_norm) as f32);
        }
    }
    let updated_tensors = opt.apply(
        &grads,
        lr,
        |id| trainable.contains(id, &task),
        |f| model.visit_params_mut(f),
    )?;
    Ok(StepOutcome {
        loss,
        grad_norm,
        updated_tensors,
    })
}

/// Mean validation PSNR of the restored outputs and of the degraded inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValResult {
    pub psnr: f64,
    pub degraded_psnr: f64,
}

impl ValResult {
    pub fn gain(&self) -> f64 {
        self.psnr - self.degraded_psnr
    }
}

/// Fixed validation pairs for `task`, shared by every run with the same seed.
pub fn validation_set(task: &TaskSpec, seed: u64, n: usize, size: usize) -> Result<Vec<SamplePair>> {
    generate_pairs(
        task,
        rng::derive_named(seed, &format!("validation/{}", task.id)),
        n,
        size,
        size,
    )
}

pub fn evaluate(model: &mut TinyIpt<f32>, task: &TaskSpec, pairs: &[SamplePair]) -> Result<ValResult> {
    let channel = task.eval_channel();
    let (mut out, mut base) = (0.0, 0.0);
    for p in pairs {
        let y = model.restore(&p.degraded, &task.id)?;
        out += psnr(&y, &p.clean, channel)?;
        base += psnr(&p.degraded, &p.clean, channel)?;
    }
    let n = pairs.len().max(1) as f64;
    Ok(ValResult {
        psnr: out / n,
        degraded_psnr: base / n,
    })
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TinyIpt<f32>,
    pub metrics: Vec<MetricRecord>,
    pub validation: BTreeMap<TaskId, ValResult>,
}

/// Owns the model during a run. Public so callers can inspect the model
/// after a failed run (e.g. to save a divergence snapshot).
pub struct Trainer {
    config: TrainConfig,
    pub model: TinyIpt<f32>,
    metrics: Vec<MetricRecord>,
    val_sets: BTreeMap<TaskId, Vec<SamplePair>>,
    sample_counters: BTreeMap<TaskId, u64>,
    global_step: usize,
    last_validation: BTreeMap<TaskId, ValResult>,
}

impl Trainer {
    /// Starts from `init` if given, otherwise from a fresh model seeded by the config.
    pub fn new(config: TrainConfig, init: Option<TinyIpt<f32>>) -> Result<Self> {
        config.validate()?;
        let model = match init {
            Some(m) => {
                if m.config().policy != config.model.policy {
                    return Err(Error::Compatibility(
                        "initial model was built with a different modulation policy".into(),
                    ));
                }
                m
            }
            None if config.regime == Regime::BiasOnlyFinetune => {
                return Err(Error::Config {
                    path: "regime".into(),
                    message: "bias-only finetuning needs a pretrained model".into(),
                })
            }
            None => TinyIpt::build(config.model.clone(), rng::derive_named(config.seed, "model"))?,
        };
        let size = config.model.patch_size;
        let val_sets = config
            .tasks
            .iter()
            .map(|t| Ok((t.id.clone(), validation_set(t, config.seed, config.val_samples, size)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            model,
            metrics: Vec::new(),
            val_sets,
            sample_counters: BTreeMap::new(),
            global_step: 0,
            last_validation: BTreeMap::new(),
        })
    }

    pub fn metrics(&self) -> &[MetricRecord] {
        &self.metrics
    }

    fn bias_seed(&self, task: &TaskId) -> u64 {
        rng::derive_named(self.config.seed, &format!("bias/{task}"))
    }

    fn ensure_registered(&mut self, task: &TaskId) -> Result<()> {
        if !self.model.is_registered(task) {
            self.model.register_task(task)?;
        }
        Ok(())
    }

    fn ensure_attached(&mut self, task: &TaskId) -> Result<()> {
        if self.model.task_param_count(task) == 0 {
            let seed = self.bias_seed(task);
            self.model.attach_task(task, seed)?;
        }
        Ok(())
    }

    /// Runs the configured regime to completion.
    pub fn run(&mut self) -> Result<()> {
        let tasks = self.config.tasks.clone();
        let total = self.config.steps;
        match self.config.regime {
            Regime::PlainMixed => {
                for t in &tasks {
                    self.ensure_registered(&t.id)?;
                }
                self.run_phase("mixed", &tasks, total, TrainableSet::Backbone)?;
            }
            Regime::Synchronous => {
                for t in &tasks {
                    self.ensure_attached(&t.id)?;
                }
                self.run_phase("sync", &tasks, total, TrainableSet::BackboneAndActiveTask)?;
            }
            Regime::TwoStage => {
                for t in &tasks {
                    self.ensure_registered(&t.id)?;
                }
                let first = total / 2;
                self.run_phase("mixed", &tasks, first, TrainableSet::Backbone)?;
                let rest = total - first;
                let n = tasks.len();
                for (i, t) in tasks.iter().enumerate() {
                    self.ensure_attached(&t.id)?;
                    let steps = rest / n + usize::from(i < rest % n);
                    self.run_phase(
                        &format!("finetune/{}", t.id),
                        std::slice::from_ref(t),
                        steps,
                        TrainableSet::ActiveTaskOnly,
                    )?;
                }
            }
            Regime::BiasOnlyFinetune => {
                let t = &tasks[0];
                self.ensure_attached(&t.id)?;
                self.run_phase("finetune", &tasks, total, TrainableSet::ActiveTaskOnly)?;
            }
        }
        Ok(())
    }

    fn next_batch(&mut self, task: &TaskSpec) -> Result<Vec<SamplePair>> {
        let b = self.config.batch_size;
        let size = self.config.model.patch_size;
        let stream = rng::derive_named(self.config.seed, &format!("train/{}", task.id));
        let counter = self.sample_counters.entry(task.id.clone()).or_insert(0);
        let start = *counter;
        *counter += b as u64;
        (start..start + b as u64)
            .into_par_iter()
            .map(|i| SamplePair::generate(task, sample_seed(stream, i), size, size))
            .collect()
    }

    /// `steps` optimizer steps cycling through `tasks` in order, with a fresh
    /// optimizer and learning-rate schedule.
    pub fn run_phase(&mut self, phase: &str, tasks: &[TaskSpec], steps: usize, trainable: TrainableSet) -> Result<()> {
        let mut opt = OptimizerState::new();
        let cfg = self.config.clone();
        for s in 0..steps {
            let task = &tasks[s % tasks.len()];
            let batch = self.next_batch(task)?;
            let lr = cfg.lr_schedule.at(cfg.learning_rate, s, steps);
            let out =
                train_step(&mut self.model, &batch, trainable, &mut opt, lr, cfg.max_grad_norm).map_err(
                    |e| match e {
                        Error::Divergence { detail, .. } => Error::Divergence {
                            step: self.global_step + 1,
                            detail: format!("phase {phase}: {detail}"),
                        },
                        e => e,
                    },
                )?;
            self.global_step += 1;
            self.metrics.push(MetricRecord {
                step: self.global_step,
                phase: phase.to_string(),
                task: task.id.clone(),
                loss: Some(out.loss),
                lr: Some(lr),
                val_psnr: None,
                degraded_psnr: None,
            });
            if cfg.val_every > 0 && (s + 1) % cfg.val_every == 0 && s + 1 != steps {
                self.validate(phase)?;
            }
        }
        self.validate(phase)?;
        Ok(())
    }

    /// Validates every configured task that the model knows and logs the result.
    pub fn validate(&mut self, phase: &str) -> Result<BTreeMap<TaskId, ValResult>> {
        let mut out = BTreeMap::new();
        for t in self.config.tasks.clone() {
            if !self.model.is_registered(&t.id) {
                continue;
            }
            let v = evaluate(&mut self.model, &t, &self.val_sets[&t.id])?;
            self.metrics.push(MetricRecord {
                step: self.global_step,
                phase: phase.to_string(),
                task: t.id.clone(),
                loss: None,
                lr: None,
                val_psnr: Some(v.psnr),
                degraded_psnr: Some(v.degraded_psnr),
            });
            out.insert(t.id.clone(), v);
        }
        self.last_validation = out.clone();
        Ok(out)
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            metrics: self.metrics,
            validation: self.last_validation,
        }
    }
}

/// Trains a fresh model under `config`.
pub fn run_regime(config: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone(), None)?;
    t.run()?;
    Ok(t.finish())
}

/// Continues training `init` under `config`.
pub fn run_regime_from(config: &TrainConfig, init: TinyIpt<f32>) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone(), Some(init))?;
    t.run()?;
    Ok(t.finish())
}

/// Outcome of a downstream bias-only finetune.
#[derive(Debug, Clone)]
pub struct DownstreamOutcome {
    pub pack: BiasPack,
    pub model: TinyIpt<f32>,
    pub metrics: Vec<MetricRecord>,
    pub validation: ValResult,
}

/// Learns a new task on a frozen backbone: only the new task's bias trains.
/// `config` supplies steps, batch size and learning rate; its regime and task
/// list are ignored.
pub fn downstream_finetune(
    pretrained: &TinyIpt<f32>,
    task: &TaskSpec,
    config: &TrainConfig,
) -> Result<DownstreamOutcome> {
    if pretrained.is_registered(&task.id) {
        return Err(Error::Conflict(format!("task `{}` is already registered", task.id)));
    }
    let cfg = TrainConfig {
        regime: Regime::BiasOnlyFinetune,
        tasks: vec![task.clone()],
        model: pretrained.config().clone(),
        ..config.clone()
    };
    let mut t = Trainer::new(cfg, Some(pretrained.clone()))?;
    t.run()?;
    let out = t.finish();
    Ok(DownstreamOutcome {
        pack: out.model.extract_pack(&task.id)?,
        validation: out.validation[&task.id],
        model: out.model,
        metrics: out.metrics,
    })
}

/// Finetunes every shared tensor of `model` on a single task. Used by the
/// weight-sensitivity probe, which compares weights before and after.
pub fn full_finetune(model: &TinyIpt<f32>, task: &TaskSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        tasks: vec![task.clone()],
        model: model.config().clone(),
        ..config.clone()
    };
    cfg.validate().or_else(|e| match e {
        // The single-task rule for mixed regimes does not apply here.
        Error::Config { ref path, .. } if path == "tasks" => Ok(()),
        e => Err(e),
    })?;
    let mut t = Trainer::new(
        TrainConfig {
            regime: Regime::BiasOnlyFinetune,
            ..cfg.clone()
        },
        Some(model.clone()),
    )?;
    t.ensure_registered(&task.id)?;
    t.run_phase(
        "full-finetune",
        std::slice::from_ref(task),
        cfg.steps,
        TrainableSet::Backbone,
    )?;
    Ok(t.finish())
}
