//! Differentiable layers with hand-written backward passes.
//!
//! Feature maps are `C × H × W` tensors. Every layer pushes a record onto a
//! [`GradientTape`] during forward and pops it during backward.

mod gradcheck;
mod layers;
mod params;
mod tape;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::modulation::ModulatedWeight;
use crate::numerics::{Scalar, Tensor};

pub use gradcheck::{
    compare_with_finite_differences, finite_difference_check, finite_difference_check_with, GradCheckReport,
    ParamCheck, FD_FAIL_THRESHOLD, FD_STEP,
};
pub use layers::{
    gelu, gelu_grad, ChannelAttention, Conv2d, Downsample, Ffn, LayerNorm, Linear, Module, Upsample, LAYERNORM_EPS,
};
pub use params::{Grads, LayerGroup, ParamId, ParamRole, ParamView, ParamViewMut};
pub use tape::GradientTape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Linear,
    LayerNorm,
    ChannelAttention,
    Ffn,
    Downsample,
    Upsample,
}

/// Any single layer.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    Linear(Linear<T>),
    LayerNorm(LayerNorm<T>),
    ChannelAttention(ChannelAttention<T>),
    Ffn(Ffn<T>),
    Downsample(Downsample<T>),
    Upsample(Upsample<T>),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $e:expr) => {
        match $self {
            Layer::Conv2d($l) => $e,
            Layer::Linear($l) => $e,
            Layer::LayerNorm($l) => $e,
            Layer::ChannelAttention($l) => $e,
            Layer::Ffn($l) => $e,
            Layer::Downsample($l) => $e,
            Layer::Upsample($l) => $e,
        }
    };
}

/// Output of a full backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Grads<T>,
    pub input: Tensor<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::LayerNorm(_) => LayerKind::LayerNorm,
            Layer::ChannelAttention(_) => LayerKind::ChannelAttention,
            Layer::Ffn(_) => LayerKind::Ffn,
            Layer::Downsample(_) => LayerKind::Downsample,
            Layer::Upsample(_) => LayerKind::Upsample,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Layer::Conv2d(l) => l.c_in,
            Layer::Linear(l) => l.c_in,
            Layer::LayerNorm(l) => l.channels,
            Layer::ChannelAttention(l) => l.channels,
            Layer::Ffn(l) => l.channels,
            Layer::Downsample(l) => l.c_in,
            Layer::Upsample(l) => l.c_in,
        }
    }

    /// Output shape for a `C × H × W` input.
    pub fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        let [_, h, w] = input;
        match self {
            Layer::Conv2d(l) => [l.c_out, h, w],
            Layer::Linear(l) => [l.c_out, h, w],
            Layer::Downsample(l) => [l.c_out, h / 2, w / 2],
            Layer::Upsample(l) => [l.c_out, h * 2, w * 2],
            Layer::LayerNorm(_) | Layer::ChannelAttention(_) | Layer::Ffn(_) => input,
        }
    }

    /// Runs a backward pass over a tape holding exactly this layer's forward.
    pub fn backward(&self, tape: &mut GradientTape<T>, loss_grad: &Tensor<T>) -> Result<Gradients<T>> {
        tape.begin_backward()?;
        let mut params = Grads::new();
        let input = self.backward_step(tape, loss_grad, &mut params)?;
        Ok(Gradients { params, input })
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv2d(l) => Layer::Conv2d(Conv2d {
                weight: l.weight.cast(),
                c_in: l.c_in,
                c_out: l.c_out,
                kernel: l.kernel,
            }),
            Layer::Linear(l) => Layer::Linear(Linear {
                weight: l.weight.cast(),
                c_in: l.c_in,
                c_out: l.c_out,
            }),
            Layer::LayerNorm(l) => Layer::LayerNorm(LayerNorm {
                name: l.name.clone(),
                gamma: l.gamma.cast(),
                beta: l.beta.cast(),
                channels: l.channels,
            }),
            Layer::ChannelAttention(l) => Layer::ChannelAttention(ChannelAttention {
                qkv: l.qkv.cast(),
                proj: l.proj.cast(),
                channels: l.channels,
            }),
            Layer::Ffn(l) => Layer::Ffn(Ffn {
                fc1: l.fc1.cast(),
                fc2: l.fc2.cast(),
                channels: l.channels,
                hidden: l.hidden,
            }),
            Layer::Downsample(l) => Layer::Downsample(Downsample {
                weight: l.weight.cast(),
                c_in: l.c_in,
                c_out: l.c_out,
            }),
            Layer::Upsample(l) => Layer::Upsample(Upsample {
                weight: l.weight.cast(),
                c_in: l.c_in,
                c_out: l.c_out,
            }),
        }
    }
}

impl<T: Scalar> Module<T> for Layer<T> {
    fn forward(&self, x: &Tensor<T>, tape: &mut GradientTape<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => l.forward(x, tape))
    }

    fn backward_step(&self, tape: &mut GradientTape<T>, dy: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => l.backward_step(tape, dy, grads))
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        dispatch!(self, l => l.visit_params(f))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        dispatch!(self, l => l.visit_params_mut(f))
    }

    fn weights_mut(&mut self) -> Vec<&mut ModulatedWeight<T>> {
        dispatch!(self, l => l.weights_mut())
    }

    fn weights(&self) -> Vec<&ModulatedWeight<T>> {
        dispatch!(self, l => l.weights())
    }
}
