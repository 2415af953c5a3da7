use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamId, ParamViewMut};
use crate::numerics::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Adam state. Moments are created lazily, only for parameters that
/// actually receive an update.
#[derive(Debug, Clone)]
pub struct OptimizerState<T = f32> {
    step: u64,
    moments: BTreeMap<ParamId, Moments<T>>,
}

impl<T> Default for OptimizerState<T> {
    fn default() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> impl Iterator<Item = &ParamId> {
        self.moments.keys()
    }

    /// Advances the step counter; call once per optimizer step, before the
    /// per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// One Adam update of `param` with gradient `grad`.
    pub fn update(&mut self, id: &ParamId, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
        if self.step == 0 {
            return Err(Error::State("optimizer update before begin_step".into()));
        }
        param.check_same_shape(grad)?;
        let st = self.moments.entry(id.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(param.shape().to_vec()),
            v: Tensor::zeros(param.shape().to_vec()),
        });
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
        let (one, eps) = (T::one(), T::lit(ADAM_EPS));
        let step_size = T::lit(lr / c1);
        let c2_sqrt = T::lit(c2.sqrt());
        let m = st.m.data_mut();
        let v = st.v.data_mut();
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            *p -= step_size * m[i] / (v[i].sqrt() / c2_sqrt + eps);
        }
        Ok(())
    }

    /// Applies every gradient in `grads` whose id passes `trainable`, walking
    /// parameters through `visit`.
    pub fn apply(
        &mut self,
        grads: &Grads<T>,
        lr: f64,
        trainable: impl Fn(&ParamId) -> bool,
        visit: impl FnOnce(&mut dyn FnMut(ParamViewMut<'_, T>)),
    ) -> Result<usize> {
        self.begin_step();
        let mut updated = 0;
        let mut failure = None;
        visit(&mut |p| {
            if failure.is_some() || !trainable(&p.id) {
                return;
            }
            if let Some(g) = grads.get(&p.id) {
                match self.update(&p.id, p.tensor, g, lr) {
                    Ok(()) => updated += 1,
                    Err(e) => failure = Some(e),
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(updated),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::LrSchedule;

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        // With bias correction the first Adam step is lr·sign(g).
        let mut opt = OptimizerState::<f64>::new();
        let id = ParamId::backbone("w");
        let mut p = Tensor::from_rows(&[&[1.0, -2.0, 0.5]]);
        let g = Tensor::from_rows(&[&[3.0, -0.1, 1e-3]]);
        opt.begin_step();
        opt.update(&id, &mut p, &g, 0.01).unwrap();
        let expect = [0.99, -1.99, 0.49];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn converges_on_a_quadratic() {
        // f(x) = Σ a_i (x_i − b_i)²
        let a = [1.0, 3.0, 0.5, 10.0, 0.2];
        let b = [0.3, -1.2, 2.0, 0.05, -0.7];
        let id = ParamId::backbone("x");
        let mut x = Tensor::<f64>::zeros([5]);
        let mut opt = OptimizerState::new();
        let schedule = LrSchedule::Cosine { min_lr: 0.0 };
        let steps = 5000;
        for s in 0..steps {
            let g = Tensor::from_fn([5], |i| 2.0 * a[i] * (x.data()[i] - b[i]));
            opt.begin_step();
            opt.update(&id, &mut x, &g, schedule.at(0.05, s, steps)).unwrap();
        }
        for (xi, bi) in x.data().iter().zip(b) {
            assert!((xi - bi).abs() < 1e-6, "{xi} vs {bi}");
        }
    }

    #[test]
    fn moments_only_for_trainable_parameters() {
        let mut params = [
            (ParamId::backbone("a"), Tensor::<f32>::zeros([2])),
            (ParamId::backbone("b"), Tensor::<f32>::zeros([2])),
        ];
        let mut grads = Grads::new();
        grads.accumulate(params[0].0.clone(), Tensor::filled([2], 1.0)).unwrap();
        grads.accumulate(params[1].0.clone(), Tensor::filled([2], 1.0)).unwrap();
        let mut opt = OptimizerState::new();
        let n = opt
            .apply(
                &grads,
                0.1,
                |id| id.name == "a",
                |f| {
                    for (id, t) in params.iter_mut() {
                        f(ParamViewMut {
                            id: id.clone(),
                            group: crate::nn::LayerGroup::FfnProjection,
                            tensor: t,
                        });
                    }
                },
            )
            .unwrap();
        assert_eq!(n, 1);
        assert_eq!(opt.tracked().map(|i| i.name.as_str()).collect::<Vec<_>>(), ["a"]);
        assert!(params[1].1.is_zero());
        assert!(!params[0].1.is_zero());
    }

    #[test]
    fn update_before_step_is_refused() {
        let mut opt = OptimizerState::<f32>::new();
        let mut p = Tensor::zeros([1]);
        let err = opt.update(&ParamId::backbone("p"), &mut p, &Tensor::zeros([1]), 0.1);
        assert!(matches!(err, Err(Error::State(_))));
    }
}
