use std::borrow::Cow;
use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{RankStrategy, TaskId};
use crate::error::{Error, Result};
use crate::nn::{Grads, LayerGroup, ParamId, ParamRole, ParamView, ParamViewMut};
use crate::numerics::{gemm, matmul, Scalar, Tensor};
use crate::rng;

/// Standard deviation of the Gaussian used for the first bias factor.
pub const BIAS_INIT_STD: f64 = 0.02;

/// How a [`ModulatedWeight`] turns its tensors into the weight a layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModulationMode {
    /// `W_general + B1·B2` for the active task.
    #[default]
    Additive,
    /// A dense per-task tensor replaces `W_general`.
    Replacement,
    /// Always `W_general`; task biases are ignored.
    BackboneOnly,
}

/// Low-rank factor pair `(B1: n_α×r, B2: r×n_β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankBias<T> {
    pub down: Tensor<T>,
    pub up: Tensor<T>,
}

impl<T: Scalar> LowRankBias<T> {
    pub fn rank(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn product(&self) -> Tensor<T> {
        matmul(&self.down, &self.up).expect("bias factors are shape-checked on insertion")
    }
}

/// A backbone matrix plus per-task modulation state.
///
/// Convolution kernels are stored in their `C_out × (C_in·k·k)` matrix view.
#[derive(Debug, Clone)]
pub struct ModulatedWeight<T> {
    name: String,
    group: LayerGroup,
    general: Tensor<T>,
    biases: BTreeMap<TaskId, LowRankBias<T>>,
    replacements: BTreeMap<TaskId, Tensor<T>>,
    active: Option<TaskId>,
    mode: ModulationMode,
}

impl<T: Scalar> ModulatedWeight<T> {
    pub fn new(name: impl Into<String>, group: LayerGroup, general: Tensor<T>) -> Result<Self> {
        general.dims2()?;
        Ok(Self {
            name: name.into(),
            group,
            general,
            biases: BTreeMap::new(),
            replacements: BTreeMap::new(),
            active: None,
            mode: ModulationMode::Additive,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> LayerGroup {
        self.group
    }

    pub fn general(&self) -> &Tensor<T> {
        &self.general
    }

    pub fn general_mut(&mut self) -> &mut Tensor<T> {
        &mut self.general
    }

    /// `(n_α, n_β)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.general.shape()[0], self.general.shape()[1])
    }

    pub fn mode(&self) -> ModulationMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: ModulationMode) {
        self.mode = mode;
    }

    pub fn active_task(&self) -> Option<&TaskId> {
        self.active.as_ref()
    }

    pub fn set_active(&mut self, task: Option<TaskId>) {
        self.active = task;
    }

    pub fn bias(&self, task: &TaskId) -> Option<&LowRankBias<T>> {
        self.biases.get(task)
    }

    pub fn bias_mut(&mut self, task: &TaskId) -> Option<&mut LowRankBias<T>> {
        self.biases.get_mut(task)
    }

    pub fn replacement(&self, task: &TaskId) -> Option<&Tensor<T>> {
        self.replacements.get(task)
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        let mut all: Vec<TaskId> = self.biases.keys().chain(self.replacements.keys()).cloned().collect();
        all.sort();
        all.dedup();
        all
    }

    pub fn has_task(&self, task: &TaskId) -> bool {
        self.biases.contains_key(task) || self.replacements.contains_key(task)
    }

    /// Registers a zero-effect bias for `task`: `B1 ~ N(0, 0.02²)`, `B2 = 0`.
    pub fn attach_bias(&mut self, task: &TaskId, strategy: RankStrategy, seed: u64) -> Result<()> {
        strategy.validate()?;
        if self.has_task(task) {
            return Err(Error::Conflict(format!(
                "task `{task}` already registered on weight `{}`",
                self.name
            )));
        }
        let (rows, cols) = self.dims();
        let r = strategy.rank_for(rows, cols);
        let normal = Normal::new(0.0, BIAS_INIT_STD).expect("valid std");
        let mut rng = rng::stream(seed);
        let down = Tensor::from_fn([rows, r], |_| T::lit(normal.sample(&mut rng)));
        let up = Tensor::zeros([r, cols]);
        self.biases.insert(task.clone(), LowRankBias { down, up });
        Ok(())
    }

    /// Registers a dense replacement for `task`, initialized from `W_general`.
    pub fn attach_replacement(&mut self, task: &TaskId) -> Result<()> {
        if self.has_task(task) {
            return Err(Error::Conflict(format!(
                "task `{task}` already registered on weight `{}`",
                self.name
            )));
        }
        self.replacements.insert(task.clone(), self.general.clone());
        Ok(())
    }

    /// Installs explicit factors for `task`, replacing any existing ones.
    pub fn insert_bias(&mut self, task: &TaskId, down: Tensor<T>, up: Tensor<T>) -> Result<()> {
        let (rows, cols) = self.dims();
        let (dr, r) = down.dims2()?;
        let (r2, uc) = up.dims2()?;
        if dr != rows || uc != cols || r != r2 || r > rows.min(cols) {
            return Err(Error::Compatibility(format!(
                "bias factors {:?}·{:?} do not fit weight `{}` of shape {:?}",
                down.shape(),
                up.shape(),
                self.name,
                self.general.shape()
            )));
        }
        self.biases.insert(task.clone(), LowRankBias { down, up });
        Ok(())
    }

    pub fn insert_replacement(&mut self, task: &TaskId, dense: Tensor<T>) -> Result<()> {
        if dense.shape() != self.general.shape() {
            return Err(Error::Compatibility(format!(
                "replacement of shape {:?} does not fit weight `{}` of shape {:?}",
                dense.shape(),
                self.name,
                self.general.shape()
            )));
        }
        self.replacements.insert(task.clone(), dense);
        Ok(())
    }

    pub fn remove_task(&mut self, task: &TaskId) {
        self.biases.remove(task);
        self.replacements.remove(task);
    }

    fn unknown(&self, task: &TaskId) -> Error {
        Error::UnknownTask {
            task: task.to_string(),
            registered: self.tasks().iter().map(ToString::to_string).collect(),
        }
    }

    /// Weight used for `task` (or the backbone when `task` is `None`).
    pub fn effective_weight(&self, task: Option<&TaskId>) -> Result<Cow<'_, Tensor<T>>> {
        let Some(task) = task else {
            return Ok(Cow::Borrowed(&self.general));
        };
        match self.mode {
            ModulationMode::BackboneOnly => Ok(Cow::Borrowed(&self.general)),
            ModulationMode::Additive => {
                let bias = self.biases.get(task).ok_or_else(|| self.unknown(task))?;
                if bias.up.is_zero() {
                    return Ok(Cow::Borrowed(&self.general));
                }
                let (rows, cols) = self.dims();
                let mut w = self.general.clone();
                gemm(
                    rows,
                    bias.rank(),
                    cols,
                    bias.down.data(),
                    false,
                    bias.up.data(),
                    false,
                    w.data_mut(),
                    true,
                );
                Ok(Cow::Owned(w))
            }
            ModulationMode::Replacement => self
                .replacements
                .get(task)
                .map(Cow::Borrowed)
                .ok_or_else(|| self.unknown(task)),
        }
    }

    /// Weight for the currently active task.
    pub fn effective(&self) -> Result<Cow<'_, Tensor<T>>> {
        self.effective_weight(self.active.as_ref())
    }

    /// Routes the gradient of the effective weight to the tensors that produced it.
    pub fn backprop(&self, d_eff: Tensor<T>, grads: &mut Grads<T>) -> Result<()> {
        let task = match (&self.active, self.mode) {
            (None, _) | (_, ModulationMode::BackboneOnly) => None,
            (Some(t), _) => Some(t),
        };
        let Some(task) = task else {
            return grads.accumulate(ParamId::backbone(&self.name), d_eff);
        };
        match self.mode {
            ModulationMode::Replacement => grads.accumulate(
                ParamId::with_role(&self.name, ParamRole::Replacement(task.clone())),
                d_eff,
            ),
            _ => {
                let bias = self.biases.get(task).ok_or_else(|| self.unknown(task))?;
                let (rows, cols) = self.dims();
                let r = bias.rank();
                // dB1 = dW · B2ᵀ, dB2 = B1ᵀ · dW
                let mut d_down = Tensor::zeros([rows, r]);
                gemm(
                    rows,
                    cols,
                    r,
                    d_eff.data(),
                    false,
                    bias.up.data(),
                    true,
                    d_down.data_mut(),
                    false,
                );
                let mut d_up = Tensor::zeros([r, cols]);
                gemm(
                    r,
                    rows,
                    cols,
                    bias.down.data(),
                    true,
                    d_eff.data(),
                    false,
                    d_up.data_mut(),
                    false,
                );
                grads.accumulate(
                    ParamId::with_role(&self.name, ParamRole::BiasDown(task.clone())),
                    d_down,
                )?;
                grads.accumulate(ParamId::with_role(&self.name, ParamRole::BiasUp(task.clone())), d_up)?;
                grads.accumulate(ParamId::backbone(&self.name), d_eff)
            }
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        f(ParamView {
            id: ParamId::backbone(&self.name),
            group: self.group,
            tensor: &self.general,
        });
        for (task, bias) in &self.biases {
            f(ParamView {
                id: ParamId::with_role(&self.name, ParamRole::BiasDown(task.clone())),
                group: self.group,
                tensor: &bias.down,
            });
            f(ParamView {
                id: ParamId::with_role(&self.name, ParamRole::BiasUp(task.clone())),
                group: self.group,
                tensor: &bias.up,
            });
        }
        for (task, dense) in &self.replacements {
            f(ParamView {
                id: ParamId::with_role(&self.name, ParamRole::Replacement(task.clone())),
                group: self.group,
                tensor: dense,
            });
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        f(ParamViewMut {
            id: ParamId::backbone(&self.name),
            group: self.group,
            tensor: &mut self.general,
        });
        for (task, bias) in self.biases.iter_mut() {
            f(ParamViewMut {
                id: ParamId::with_role(&self.name, ParamRole::BiasDown(task.clone())),
                group: self.group,
                tensor: &mut bias.down,
            });
            f(ParamViewMut {
                id: ParamId::with_role(&self.name, ParamRole::BiasUp(task.clone())),
                group: self.group,
                tensor: &mut bias.up,
            });
        }
        for (task, dense) in self.replacements.iter_mut() {
            f(ParamViewMut {
                id: ParamId::with_role(&self.name, ParamRole::Replacement(task.clone())),
                group: self.group,
                tensor: dense,
            });
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModulatedWeight<U> {
        ModulatedWeight {
            name: self.name.clone(),
            group: self.group,
            general: self.general.cast(),
            biases: self
                .biases
                .iter()
                .map(|(t, b)| {
                    (
                        t.clone(),
                        LowRankBias {
                            down: b.down.cast(),
                            up: b.up.cast(),
                        },
                    )
                })
                .collect(),
            replacements: self.replacements.iter().map(|(t, d)| (t.clone(), d.cast())).collect(),
            active: self.active.clone(),
            mode: self.mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn task(name: &str) -> TaskId {
        TaskId::new(name)
    }

    fn random(shape: [usize; 2], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_up_factor_is_exactly_the_backbone() {
        let mut w = ModulatedWeight::new("w", LayerGroup::FfnProjection, random([4, 6], 1)).unwrap();
        w.attach_bias(&task("a"), RankStrategy::constant(2), 9).unwrap();
        let eff = w.effective_weight(Some(&task("a"))).unwrap();
        assert!(eff.bitwise_eq(w.general()));
    }

    #[test]
    fn pure_bias_on_zero_backbone() {
        let mut w = ModulatedWeight::new("w", LayerGroup::FfnProjection, Tensor::<f64>::zeros([3, 3])).unwrap();
        let (down, up) = (random([3, 2], 2), random([2, 3], 3));
        let d = matmul(&down, &up).unwrap();
        w.insert_bias(&task("a"), down, up).unwrap();
        let eff = w.effective_weight(Some(&task("a"))).unwrap();
        assert!(eff.sub(&d).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn additive_matches_dense_composition() {
        let base = random([4, 4], 4);
        let (down, up) = (random([4, 2], 5), random([2, 4], 6));
        let reference = base.add(&matmul(&down, &up).unwrap()).unwrap();
        let mut w = ModulatedWeight::new("w", LayerGroup::QkvProjection, base).unwrap();
        w.insert_bias(&task("a"), down, up).unwrap();
        let eff = w.effective_weight(Some(&task("a"))).unwrap();
        assert!(eff.sub(&reference).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn unknown_task_lists_registered() {
        let mut w = ModulatedWeight::new("w", LayerGroup::QkvProjection, random([2, 2], 1)).unwrap();
        w.attach_bias(&task("denoise"), RankStrategy::constant(1), 0).unwrap();
        let err = w.effective_weight(Some(&task("derain"))).unwrap_err();
        match err {
            Error::UnknownTask { task, registered } => {
                assert_eq!(task, "derain");
                assert_eq!(registered, vec!["denoise".to_string()]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn attach_shapes_and_duplicates() {
        let mut w = ModulatedWeight::new("w", LayerGroup::FfnProjection, Tensor::<f32>::zeros([32, 64])).unwrap();
        w.attach_bias(&task("a"), RankStrategy::constant(4), 0).unwrap();
        let b = w.bias(&task("a")).unwrap();
        assert_eq!(b.down.shape(), &[32, 4]);
        assert_eq!(b.up.shape(), &[4, 64]);
        assert!(b.up.is_zero());
        assert!(matches!(
            w.attach_bias(&task("a"), RankStrategy::constant(4), 0),
            Err(Error::Conflict(_))
        ));
        w.attach_bias(&task("b"), RankStrategy::proportional(0.25), 0).unwrap();
        assert_eq!(w.bias(&task("b")).unwrap().rank(), 8);
    }

    #[test]
    fn init_statistics() {
        let mut w = ModulatedWeight::new("w", LayerGroup::FfnProjection, Tensor::<f64>::zeros([200, 100])).unwrap();
        w.attach_bias(&task("a"), RankStrategy::constant(50), 3).unwrap();
        let down = &w.bias(&task("a")).unwrap().down;
        let n = down.len() as f64;
        let mean = down.sum() / n;
        let std = (down.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.002, "{mean}");
        assert!((std - 0.02).abs() < 0.001, "{std}");
    }

    #[test]
    fn backbone_only_ignores_biases_and_replacement_ignores_backbone() {
        let mut w = ModulatedWeight::new("w", LayerGroup::OutputLayer, random([3, 5], 7)).unwrap();
        w.insert_bias(&task("a"), random([3, 1], 8), random([1, 5], 9)).unwrap();
        w.set_mode(ModulationMode::BackboneOnly);
        assert!(w.effective_weight(Some(&task("a"))).unwrap().bitwise_eq(w.general()));

        let mut r = ModulatedWeight::new("r", LayerGroup::OutputLayer, random([3, 5], 7)).unwrap();
        r.set_mode(ModulationMode::Replacement);
        r.attach_replacement(&task("a")).unwrap();
        let dense = random([3, 5], 10);
        r.insert_replacement(&task("a"), dense.clone()).unwrap();
        *r.general_mut() = Tensor::zeros([3, 5]);
        assert!(r.effective_weight(Some(&task("a"))).unwrap().bitwise_eq(&dense));
    }

    #[test]
    fn backprop_matches_finite_differences_of_bilinear_form() {
        // L = <G, W + B1·B2>, so dB1 = G·B2ᵀ and dB2 = B1ᵀ·G.
        let g = random([4, 5], 20);
        let mut w = ModulatedWeight::new("w", LayerGroup::FfnProjection, random([4, 5], 21)).unwrap();
        w.insert_bias(&task("a"), random([4, 2], 22), random([2, 5], 23))
            .unwrap();
        w.set_active(Some(task("a")));
        let mut grads = Grads::new();
        w.backprop(g.clone(), &mut grads).unwrap();
        let loss = |w: &ModulatedWeight<f64>| w.effective().unwrap().dot(&g).unwrap();
        let h = 1e-6;
        for role in [
            ParamRole::BiasDown(task("a")),
            ParamRole::BiasUp(task("a")),
            ParamRole::Backbone,
        ] {
            let id = ParamId::with_role("w", role);
            let analytic = grads.get(&id).unwrap().clone();
            for idx in 0..analytic.len() {
                let mut plus = w.clone();
                let mut minus = w.clone();
                let bump = |m: &mut ModulatedWeight<f64>, d: f64| {
                    m.visit_mut(&mut |p| {
                        if p.id == id {
                            p.tensor.data_mut()[idx] += d;
                        }
                    })
                };
                bump(&mut plus, h);
                bump(&mut minus, -h);
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!((numeric - analytic.data()[idx]).abs() < 1e-7, "{id} [{idx}]");
            }
        }
    }
}
