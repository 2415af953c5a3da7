use std::collections::BTreeMap;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use super::{GradientTape, Grads, Layer, LayerGroup, Module, ParamId};
use crate::error::Result;
use crate::numerics::Tensor;
use crate::rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative error above which a parameter is flagged.
pub const FD_FAIL_THRESHOLD: f64 = 1e-3;
const MIN_COORDS: usize = 32;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub param: String,
    pub group: Option<LayerGroup>,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.entries
            .iter()
            .filter(|e| !(e.max_rel_error <= FD_FAIL_THRESHOLD))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn groups(&self) -> Vec<LayerGroup> {
        let mut g: Vec<LayerGroup> = self.entries.iter().filter_map(|e| e.group).collect();
        g.sort();
        g.dedup();
        g
    }
}

/// Compares analytic gradients against central differences.
///
/// `targets` lists `(label, group, len, analytic)`; `loss_at(i, coord, delta)`
/// must return the loss with coordinate `coord` of target `i` shifted by `delta`.
pub fn compare_with_finite_differences(
    targets: &[(String, Option<LayerGroup>, &[f64])],
    coords_per_target: usize,
    seed: u64,
    mut loss_at: impl FnMut(usize, usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed);
    let mut report = GradCheckReport::default();
    for (i, (label, group, analytic)) in targets.iter().enumerate() {
        let len = analytic.len();
        let coords: Vec<usize> = if len <= coords_per_target {
            (0..len).collect()
        } else {
            let mut c = index::sample(&mut rng, len, coords_per_target).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let plus = loss_at(i, c, FD_STEP)?;
            let minus = loss_at(i, c, -FD_STEP)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (analytic[c] - numeric).abs() / (numeric.abs() + 1e-8);
            worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
        }
        report.entries.push(ParamCheck {
            param: label.clone(),
            group: *group,
            coords: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

pub fn finite_difference_check(layer: &Layer<f64>, seed: u64) -> Result<GradCheckReport> {
    finite_difference_check_with(layer, [layer.in_channels(), 6, 6], seed)
}

/// Checks every parameter of `layer` and its input gradient on a random input,
/// using the loss `Σ r ⊙ layer(x)` for a fixed random `r`.
pub fn finite_difference_check_with(layer: &Layer<f64>, input_shape: [usize; 3], seed: u64) -> Result<GradCheckReport> {
    let mut r = rng::stream(rng::derive_seed(seed, 0));
    let x = Tensor::<f64>::from_fn(input_shape, |_| StandardNormal.sample(&mut r));
    let probe = Tensor::<f64>::from_fn(layer.output_shape(input_shape), |_| StandardNormal.sample(&mut r));

    let loss = |layer: &Layer<f64>, x: &Tensor<f64>| -> Result<f64> {
        let y = layer.forward(x, &mut GradientTape::inference())?;
        y.dot(&probe)
    };

    let mut tape = GradientTape::new();
    layer.forward(&x, &mut tape)?;
    let grads = layer.backward(&mut tape, &probe)?;

    let mut groups: BTreeMap<ParamId, LayerGroup> = BTreeMap::new();
    layer.visit_params(&mut |p| {
        groups.insert(p.id, p.group);
    });
    let ids: Vec<ParamId> = groups.keys().cloned().collect();
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|id| grad_or_zero(&grads.params, id, layer)).collect();

    let mut targets: Vec<(String, Option<LayerGroup>, &[f64])> = ids
        .iter()
        .zip(&analytic)
        .map(|(id, g)| (id.to_string(), Some(groups[id]), g.data()))
        .collect();
    targets.push(("input".into(), None, grads.input.data()));

    let n_params = ids.len();
    compare_with_finite_differences(&targets, MIN_COORDS, rng::derive_seed(seed, 1), |i, c, delta| {
        if i == n_params {
            let mut xp = x.clone();
            xp.data_mut()[c] += delta;
            return loss(layer, &xp);
        }
        let mut perturbed = layer.clone();
        perturbed.visit_params_mut(&mut |p| {
            if p.id == ids[i] {
                p.tensor.data_mut()[c] += delta;
            }
        });
        loss(&perturbed, &x)
    })
}

fn grad_or_zero(grads: &Grads<f64>, id: &ParamId, layer: &Layer<f64>) -> Tensor<f64> {
    if let Some(g) = grads.get(id) {
        return g.clone();
    }
    let mut shape = Vec::new();
    layer.visit_params(&mut |p| {
        if &p.id == id {
            shape = p.tensor.shape().to_vec();
        }
    });
    Tensor::zeros(shape)
}
