use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::modulation::{ModulationPolicy, RankStrategy};
use crate::nn::{compare_with_finite_differences, ParamId, FD_FAIL_THRESHOLD};

fn small_config() -> TinyIptConfig {
    TinyIptConfig {
        base_channels: 4,
        blocks_per_level: 1,
        patch_size: 8,
        ..TinyIptConfig::default()
    }
}

fn image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut r = rng::stream(seed);
    Tensor::from_fn([3, h, w], |_| r.random::<f32>())
}

fn all_params(model: &TinyIpt<f32>) -> Vec<(ParamId, Tensor<f32>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| out.push((p.id, p.tensor.clone())));
    out
}

/// Gives every tensor, including the zero-initialized ones, nonzero values.
fn jitter<T: Scalar>(model: &mut TinyIpt<T>, seed: u64, scale: f64) {
    let mut r = rng::stream(seed);
    model.visit_params_mut(&mut |p| {
        for v in p.tensor.data_mut() {
            let n: f64 = StandardNormal.sample(&mut r);
            *v += T::lit(scale * n);
        }
    });
}

#[test]
fn default_census_covers_all_groups_and_ffn_dominates() {
    let model = TinyIpt::<f32>::build(TinyIptConfig::default(), 0).unwrap();
    let census = model.param_census();
    assert_eq!(census.len(), 8);
    assert!(census.values().all(|&n| n > 0), "{census:?}");
    let ffn = census[&LayerGroup::FfnProjection];
    for (g, &n) in &census {
        assert!(ffn >= n, "{g} has {n} > ffn {ffn}");
    }
    let total: usize = census.values().sum();
    let mut counted = 0;
    model.visit_params(&mut |p| counted += p.tensor.len());
    assert_eq!(total, counted);
}

#[test]
fn single_level_has_empty_channel_reduction() {
    let cfg = TinyIptConfig {
        levels: 1,
        ..small_config()
    };
    let model = TinyIpt::<f32>::build(cfg, 0).unwrap();
    let census = model.param_census();
    assert_eq!(census[&LayerGroup::ChannelReduction], 0);
    assert_eq!(census[&LayerGroup::UpDownSampling], 0);
    assert_eq!(census.len(), 8);
}

#[test]
fn build_is_deterministic() {
    let a = TinyIpt::<f32>::build(TinyIptConfig::default(), 5).unwrap();
    let b = TinyIpt::<f32>::build(TinyIptConfig::default(), 5).unwrap();
    let c = TinyIpt::<f32>::build(TinyIptConfig::default(), 6).unwrap();
    let (pa, pb, pc) = (all_params(&a), all_params(&b), all_params(&c));
    assert!(pa.iter().zip(&pb).all(|(x, y)| x.0 == y.0 && x.1.bitwise_eq(&y.1)));
    assert!(pa.iter().zip(&pc).any(|(x, y)| !x.1.bitwise_eq(&y.1)));
}

#[test]
fn invalid_config_is_rejected() {
    let cfg = TinyIptConfig {
        levels: 0,
        ..TinyIptConfig::default()
    };
    assert!(matches!(TinyIpt::<f32>::build(cfg, 0), Err(Error::Config { .. })));
}

#[test]
fn fresh_model_is_identity_and_preserves_shape() {
    let mut model = TinyIpt::<f32>::build(small_config(), 1).unwrap();
    let t = TaskId::from("denoise");
    model.attach_task(&t, 2).unwrap();
    for (h, w) in [(8, 8), (16, 8), (12, 20)] {
        let x = image(3, h, w);
        let y = model.restore(&x, &t).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.bitwise_eq(&x));
    }
}

#[test]
fn restore_errors() {
    let mut model = TinyIpt::<f32>::build(small_config(), 1).unwrap();
    let t = TaskId::from("denoise");
    model.attach_task(&t, 2).unwrap();
    let err = model.restore(&image(0, 8, 8), &TaskId::from("dehaze")).unwrap_err();
    assert!(matches!(err, Error::UnknownTask { ref registered, .. } if registered == &["denoise".to_string()]));
    assert!(matches!(model.restore(&image(0, 6, 8), &t), Err(Error::Dimension(_))));
    let gray = Tensor::<f32>::zeros([1, 8, 8]);
    assert!(matches!(model.restore(&gray, &t), Err(Error::Dimension(_))));
}

#[test]
fn restore_clamps_and_is_repeatable() {
    let mut model = TinyIpt::<f32>::build(small_config(), 1).unwrap();
    let t = TaskId::from("denoise");
    model.attach_task(&t, 2).unwrap();
    jitter(&mut model, 9, 0.5);
    let x = image(4, 8, 8);
    let y1 = model.restore(&x, &t).unwrap();
    let y2 = model.restore(&x, &t).unwrap();
    assert!(y1.bitwise_eq(&y2));
    assert!(y1.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let raw = model.forward(&x, &mut GradientTape::inference()).unwrap();
    for (c, r) in y1.data().iter().zip(raw.data()) {
        assert_eq!(*c, r.clamp(0.0, 1.0));
    }
}

#[test]
fn padded_restore_handles_any_size() {
    let mut model = TinyIpt::<f32>::build(small_config(), 1).unwrap();
    let t = TaskId::from("denoise");
    model.attach_task(&t, 2).unwrap();
    // A fresh model is the identity, so padding must be cropped away exactly.
    let x = image(6, 7, 10);
    let y = model.restore_padded(&x, &t).unwrap();
    assert_eq!(y.shape(), &[3, 7, 10]);
    assert!(y.bitwise_eq(&x.map(|v| v.clamp(0.0, 1.0))));
    jitter(&mut model, 3, 0.3);
    let x = image(7, 8, 8);
    assert!(model
        .restore_padded(&x, &t)
        .unwrap()
        .bitwise_eq(&model.restore(&x, &t).unwrap()));
    let odd = model.restore_padded(&image(8, 5, 3), &t).unwrap();
    assert_eq!(odd.shape(), &[3, 5, 3]);
}

#[test]
fn perturbing_one_pack_leaves_other_task_untouched() {
    let mut model = TinyIpt::<f32>::build(small_config(), 1).unwrap();
    let (t, u) = (TaskId::from("denoise"), TaskId::from("derain"));
    model.attach_task(&t, 2).unwrap();
    model.attach_task(&u, 3).unwrap();
    jitter(&mut model, 11, 0.1);
    let x = image(5, 8, 8);
    let before = model.restore(&x, &t).unwrap();
    let before_u = model.restore(&x, &u).unwrap();
    for w in model.weights_mut() {
        if let Some(b) = w.bias_mut(&u) {
            b.up.data_mut().iter_mut().for_each(|v| *v += 0.3);
        }
    }
    assert!(model.restore(&x, &t).unwrap().bitwise_eq(&before));
    assert!(!model.restore(&x, &u).unwrap().bitwise_eq(&before_u));
}

#[test]
fn registered_task_without_tensors_runs_on_backbone() {
    let mut model = TinyIpt::<f32>::build(small_config(), 1).unwrap();
    let (t, u) = (TaskId::from("a"), TaskId::from("b"));
    model.register_task(&t).unwrap();
    model.register_task(&u).unwrap();
    jitter(&mut model, 2, 0.1);
    let x = image(1, 8, 8);
    assert!(model
        .restore(&x, &t)
        .unwrap()
        .bitwise_eq(&model.restore(&x, &u).unwrap()));
    assert!(matches!(model.register_task(&t), Err(Error::Conflict(_))));
    model.attach_task(&t, 1).unwrap();
    assert!(matches!(model.attach_task(&t, 1), Err(Error::Conflict(_))));
}

#[test]
fn default_policy_spares_embedder_and_norms() {
    let mut model = TinyIpt::<f32>::build(TinyIptConfig::default(), 0).unwrap();
    let t = TaskId::from("t");
    model.attach_task(&t, 0).unwrap();
    let mut groups = std::collections::BTreeSet::new();
    model.visit_params(&mut |p| {
        if p.id.role.task().is_some() {
            groups.insert(p.group);
        }
    });
    assert!(!groups.contains(&LayerGroup::ImageEmbedder));
    assert!(!groups.contains(&LayerGroup::LayerNorm));
    assert_eq!(groups.len(), 6);
    assert!(model.task_param_count(&t) < model.backbone_param_count());
}

#[test]
fn pack_round_trip_between_models() {
    let mut a = TinyIpt::<f32>::build(small_config(), 1).unwrap();
    let t = TaskId::from("deblur");
    a.attach_task(&t, 4).unwrap();
    jitter(&mut a, 3, 0.05);
    let pack = a.extract_pack(&t).unwrap();
    assert_eq!(pack.param_count(), a.task_param_count(&t));

    let mut b = a.clone();
    b.remove_task(&t);
    assert!(!b.is_registered(&t));
    b.merge_pack(&BiasPack::decode(&pack.encode().unwrap()).unwrap())
        .unwrap();
    let x = image(8, 8, 8);
    assert!(a.restore(&x, &t).unwrap().bitwise_eq(&b.restore(&x, &t).unwrap()));

    let other_policy = TinyIptConfig {
        policy: ModulationPolicy::default().with_rank(RankStrategy::constant(2)),
        ..small_config()
    };
    let mut c = TinyIpt::<f32>::build(other_policy, 1).unwrap();
    assert!(matches!(c.merge_pack(&pack), Err(Error::Compatibility(_))));
    assert!(c.tasks().is_empty());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tmod");
    let mut a = TinyIpt::<f32>::build(small_config(), 1).unwrap();
    let (t, u) = (TaskId::from("denoise"), TaskId::from("plain"));
    a.attach_task(&t, 4).unwrap();
    a.register_task(&u).unwrap();
    jitter(&mut a, 3, 0.05);
    a.save(&path).unwrap();
    let mut b = TinyIpt::<f32>::load(&path).unwrap();
    assert_eq!(b.tasks(), a.tasks());
    let pa = all_params(&a);
    let pb = all_params(&b);
    assert_eq!(pa.len(), pb.len());
    assert!(pa.iter().zip(&pb).all(|(x, y)| x.0 == y.0 && x.1.bitwise_eq(&y.1)));
    let x = image(2, 8, 8);
    assert!(a.restore(&x, &t).unwrap().bitwise_eq(&b.restore(&x, &t).unwrap()));
    assert!(a.restore(&x, &u).unwrap().bitwise_eq(&b.restore(&x, &u).unwrap()));
}

#[test]
fn checkpoint_with_wrong_architecture_is_rejected() {
    let a = TinyIpt::<f32>::build(small_config(), 1).unwrap();
    let mut ck = Checkpoint::from_model(&a).unwrap();
    ck.config.base_channels = 8;
    assert!(matches!(ck.to_model(), Err(Error::Compatibility(_))));
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let policy = ModulationPolicy::default().with_treatment(LayerGroup::OutputLayer, GroupTreatment::Biased);
    let cfg = TinyIptConfig {
        policy,
        ..small_config()
    };
    let mut model = TinyIpt::<f64>::build(cfg, 3).unwrap();
    let t = TaskId::from("t");
    model.attach_task(&t, 1).unwrap();
    jitter(&mut model, 17, 0.2);
    model.set_active_task(Some(&t)).unwrap();

    let mut r = rng::stream(99);
    let x = Tensor::<f64>::from_fn([3, 8, 8], |_| r.random::<f64>());
    let probe = Tensor::<f64>::from_fn([3, 8, 8], |_| r.random::<f64>() - 0.5);

    let mut tape = GradientTape::new();
    model.forward(&x, &mut tape).unwrap();
    let grads = model.backward(&mut tape, &probe).unwrap();

    let mut ids = Vec::new();
    model.visit_params(&mut |p| ids.push((p.id.clone(), p.group)));
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|(id, _)| grads.params.require(id).unwrap().data().to_vec())
        .collect();
    let targets: Vec<(String, Option<LayerGroup>, &[f64])> = ids
        .iter()
        .zip(&analytic)
        .map(|((id, g), a)| (id.to_string(), Some(*g), a.as_slice()))
        .collect();

    let report = compare_with_finite_differences(&targets, 2, 5, |i, coord, delta| {
        let id = &ids[i].0;
        let shift = |m: &mut TinyIpt<f64>, d: f64| {
            m.visit_params_mut(&mut |p| {
                if &p.id == id {
                    p.tensor.data_mut()[coord] += d;
                }
            })
        };
        shift(&mut model, delta);
        let out = model.forward(&x, &mut GradientTape::inference());
        shift(&mut model, -delta);
        out?.dot(&probe)
    })
    .unwrap();

    let coords: usize = report.entries.iter().map(|e| e.coords).sum();
    assert!(coords >= 32 && report.entries.len() >= 16);
    assert_eq!(report.groups().len(), 8);
    assert!(report.max_error() < FD_FAIL_THRESHOLD, "{:?}", report.failures());
    assert!(ids.iter().any(|(id, _)| id.role.task().is_some()));
}
