use super::*;
use crate::degradations::{SamplePair, TaskSpec};
use crate::error::Error;
use crate::model::{TinyIpt, TinyIptConfig};
use crate::modulation::TaskId;
use crate::nn::{Module, ParamId, ParamRole};
use crate::numerics::Tensor;

fn tiny_model() -> TinyIptConfig {
    TinyIptConfig {
        base_channels: 4,
        blocks_per_level: 1,
        patch_size: 8,
        ..TinyIptConfig::default()
    }
}

fn tiny(regime: Regime, steps: usize) -> TrainConfig {
    TrainConfig {
        regime,
        steps,
        batch_size: 2,
        learning_rate: 1e-3,
        val_samples: 2,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

fn snapshot(model: &TinyIpt<f32>) -> Vec<(ParamId, Tensor<f32>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| out.push((p.id, p.tensor.clone())));
    out
}

fn changed(a: &[(ParamId, Tensor<f32>)], b: &[(ParamId, Tensor<f32>)]) -> Vec<ParamId> {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .filter(|(x, y)| !x.1.bitwise_eq(&y.1))
        .map(|(x, _)| x.0.clone())
        .collect()
}

fn batch(task: &TaskSpec, seed: u64, n: usize) -> Vec<SamplePair> {
    (0..n as u64)
        .map(|i| SamplePair::generate(task, seed + i, 8, 8).unwrap())
        .collect()
}

fn two_task_model() -> (TinyIpt<f32>, TaskSpec, TaskSpec) {
    let mut m = TinyIpt::<f32>::build(tiny_model(), 1).unwrap();
    let (a, b) = (TaskSpec::denoise(25.0), TaskSpec::deblur());
    m.attach_task(&a.id, 1).unwrap();
    m.attach_task(&b.id, 2).unwrap();
    // Leave the zero-initialized output layer so gradients reach everything.
    m.visit_params_mut(&mut |p| {
        if p.id.name == "output.weight" && p.id.role == ParamRole::Backbone {
            p.tensor
                .data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = 0.01 * ((i % 7) as f32 - 3.0));
        }
    });
    (m, a, b)
}

#[test]
fn synchronous_step_leaves_other_task_untouched() {
    let (mut m, a, b) = two_task_model();
    let before = snapshot(&m);
    let mut opt = OptimizerState::new();
    for _ in 0..2 {
        train_step(
            &mut m,
            &batch(&a, 0, 2),
            TrainableSet::BackboneAndActiveTask,
            &mut opt,
            1e-3,
            None,
        )
        .unwrap();
    }
    let moved = changed(&before, &snapshot(&m));
    assert!(moved.iter().all(|id| id.role.task() != Some(&b.id)));
    assert!(moved.iter().any(|id| id.role == ParamRole::Backbone));
    assert!(moved.iter().any(|id| id.role.task() == Some(&a.id)));
    assert!(opt.tracked().all(|id| id.role.task() != Some(&b.id)));
}

#[test]
fn bias_only_step_freezes_backbone() {
    let (mut m, a, _) = two_task_model();
    let before = snapshot(&m);
    let mut opt = OptimizerState::new();
    for _ in 0..2 {
        train_step(
            &mut m,
            &batch(&a, 0, 2),
            TrainableSet::ActiveTaskOnly,
            &mut opt,
            1e-3,
            None,
        )
        .unwrap();
    }
    let moved = changed(&before, &snapshot(&m));
    assert!(!moved.is_empty());
    assert!(moved.iter().all(|id| id.role.task() == Some(&a.id)));
    assert!(opt.tracked().all(|id| id.role.task() == Some(&a.id)));
}

#[test]
fn clean_pairs_are_a_fixed_point() {
    let mut m = TinyIpt::<f32>::build(tiny_model(), 1).unwrap();
    let t = TaskSpec::denoise(25.0);
    m.attach_task(&t.id, 1).unwrap();
    let pairs: Vec<SamplePair> = batch(&t, 0, 3)
        .into_iter()
        .map(|p| SamplePair {
            degraded: p.clean.clone(),
            ..p
        })
        .collect();
    let before = snapshot(&m);
    let mut opt = OptimizerState::new();
    let out = train_step(
        &mut m,
        &pairs,
        TrainableSet::BackboneAndActiveTask,
        &mut opt,
        1e-3,
        None,
    )
    .unwrap();
    assert_eq!(out.loss, 0.0);
    assert_eq!(out.grad_norm, 0.0);
    assert!(changed(&before, &snapshot(&m)).is_empty());
}

#[test]
fn mixed_batches_are_refused() {
    let (mut m, a, b) = two_task_model();
    let mut pairs = batch(&a, 0, 1);
    pairs.extend(batch(&b, 5, 1));
    let mut opt = OptimizerState::new();
    let err = train_step(&mut m, &pairs, TrainableSet::Backbone, &mut opt, 1e-3, None).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
    assert!(matches!(
        train_step(&mut m, &[], TrainableSet::Backbone, &mut opt, 1e-3, None),
        Err(Error::Protocol(_))
    ));
}

#[test]
fn exploding_learning_rate_is_reported_as_divergence() {
    let (mut m, a, _) = two_task_model();
    let mut opt = OptimizerState::new();
    let mut result = Ok(());
    for _ in 0..50 {
        if let Err(e) = train_step(&mut m, &batch(&a, 0, 2), TrainableSet::Backbone, &mut opt, 1e30, None) {
            result = Err(e);
            break;
        }
    }
    assert!(matches!(result, Err(Error::Divergence { .. })), "{result:?}");
}

#[test]
fn clipping_bounds_the_update() {
    let (mut m, a, _) = two_task_model();
    let mut opt = OptimizerState::new();
    let out = train_step(
        &mut m,
        &batch(&a, 0, 2),
        TrainableSet::Backbone,
        &mut opt,
        1e-3,
        Some(1e-9),
    )
    .unwrap();
    assert!(out.grad_norm > 1e-9);
}

#[test]
fn runs_are_deterministic() {
    let cfg = tiny(Regime::Synchronous, 6);
    let a = run_regime(&cfg).unwrap();
    let b = run_regime(&cfg).unwrap();
    assert_eq!(metrics_to_jsonl(&a.metrics), metrics_to_jsonl(&b.metrics));
    assert!(snapshot(&a.model)
        .iter()
        .zip(snapshot(&b.model))
        .all(|(x, y)| x.1.bitwise_eq(&y.1)));
    let c = run_regime(&TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(metrics_to_jsonl(&a.metrics), metrics_to_jsonl(&c.metrics));
}

#[test]
fn regimes_train_the_right_tensors() {
    let plain = run_regime(&tiny(Regime::PlainMixed, 4)).unwrap();
    assert_eq!(plain.model.tasks().len(), 2);
    for t in plain.model.tasks() {
        assert_eq!(plain.model.task_param_count(t), 0);
    }
    let sync = run_regime(&tiny(Regime::Synchronous, 4)).unwrap();
    for t in sync.model.tasks() {
        assert!(sync.model.task_param_count(t) > 0);
    }
    let two = run_regime(&tiny(Regime::TwoStage, 7)).unwrap();
    let phases: Vec<&str> = two
        .metrics
        .iter()
        .filter(|r| r.loss.is_some())
        .map(|r| r.phase.as_str())
        .collect();
    assert_eq!(phases.len(), 7);
    assert_eq!(phases.iter().filter(|p| **p == "mixed").count(), 3);
    assert_eq!(phases.iter().filter(|p| **p == "finetune/denoise").count(), 2);
    assert_eq!(phases.iter().filter(|p| **p == "finetune/deblur").count(), 2);
    assert_eq!(two.validation.len(), 2);
}

#[test]
fn round_robin_over_tasks() {
    let out = run_regime(&tiny(Regime::Synchronous, 5)).unwrap();
    let order: Vec<&str> = out
        .metrics
        .iter()
        .filter(|r| r.loss.is_some())
        .map(|r| r.task.as_str())
        .collect();
    assert_eq!(order, ["denoise", "deblur", "denoise", "deblur", "denoise"]);
}

#[test]
fn bias_only_regime_needs_a_pretrained_model() {
    let cfg = TrainConfig {
        tasks: vec![TaskSpec::derain()],
        ..tiny(Regime::BiasOnlyFinetune, 2)
    };
    assert!(matches!(run_regime(&cfg), Err(Error::Config { .. })));
}

#[test]
fn downstream_finetune_isolates_elementary_tasks() {
    let base = run_regime(&tiny(Regime::Synchronous, 4)).unwrap().model;
    let mut before = base.clone();
    let x = batch(&TaskSpec::denoise(25.0), 3, 1).remove(0).degraded;
    let denoise = TaskId::from("denoise");
    let ref_out = before.restore(&x, &denoise).unwrap();

    let rain = TaskSpec::derain();
    let out = downstream_finetune(&base, &rain, &tiny(Regime::BiasOnlyFinetune, 3)).unwrap();
    let mut tuned = out.model.clone();
    assert!(tuned.restore(&x, &denoise).unwrap().bitwise_eq(&ref_out));
    let moved = changed(
        &snapshot(&base),
        &snapshot(&tuned)
            .into_iter()
            .filter(|(id, _)| id.role.task() != Some(&rain.id))
            .collect::<Vec<_>>(),
    );
    assert!(moved.is_empty());

    let mut fresh = base.clone();
    fresh.merge_pack(&out.pack).unwrap();
    let y = crate::degradations::SamplePair::generate(&rain, 9, 8, 8)
        .unwrap()
        .degraded;
    assert!(fresh
        .restore(&y, &rain.id)
        .unwrap()
        .bitwise_eq(&tuned.restore(&y, &rain.id).unwrap()));

    let again = downstream_finetune(&tuned, &rain, &tiny(Regime::BiasOnlyFinetune, 1));
    assert!(matches!(again, Err(Error::Conflict(_))));
}

#[test]
fn full_finetune_touches_only_backbone() {
    let base = run_regime(&tiny(Regime::PlainMixed, 2)).unwrap().model;
    let out = full_finetune(&base, &TaskSpec::deblur(), &tiny(Regime::PlainMixed, 2)).unwrap();
    let moved = changed(&snapshot(&base), &snapshot(&out.model));
    assert!(!moved.is_empty());
    assert!(moved.iter().all(|id| id.role == ParamRole::Backbone));
}
