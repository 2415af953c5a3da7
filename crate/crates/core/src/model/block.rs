use rand::Rng;

use crate::error::Result;
use crate::modulation::ModulatedWeight;
use crate::nn::{ChannelAttention, Ffn, GradientTape, Grads, LayerNorm, Module, ParamView, ParamViewMut};
use crate::numerics::{Scalar, Tensor};

/// Pre-norm transformer block: `h += attn(ln1(h)); h += ffn(ln2(h))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attn: ChannelAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ffn: Ffn<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(name: &str, channels: usize, ffn_ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(&format!("{name}.norm1"), channels),
            attn: ChannelAttention::new(&format!("{name}.attn"), channels, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), channels),
            ffn: Ffn::new(&format!("{name}.ffn"), channels, ffn_ratio, rng),
        }
    }

    pub(crate) fn cast<U: Scalar>(&self) -> TransformerBlock<U> {
        TransformerBlock {
            norm1: LayerNorm {
                name: self.norm1.name.clone(),
                gamma: self.norm1.gamma.cast(),
                beta: self.norm1.beta.cast(),
                channels: self.norm1.channels,
            },
            attn: ChannelAttention {
                qkv: self.attn.qkv.cast(),
                proj: self.attn.proj.cast(),
                channels: self.attn.channels,
            },
            norm2: LayerNorm {
                name: self.norm2.name.clone(),
                gamma: self.norm2.gamma.cast(),
                beta: self.norm2.beta.cast(),
                channels: self.norm2.channels,
            },
            ffn: Ffn {
                fc1: self.ffn.fc1.cast(),
                fc2: self.ffn.fc2.cast(),
                channels: self.ffn.channels,
                hidden: self.ffn.hidden,
            },
        }
    }
}

impl<T: Scalar> Module<T> for TransformerBlock<T> {
    fn forward(&self, x: &Tensor<T>, tape: &mut GradientTape<T>) -> Result<Tensor<T>> {
        let a = self.attn.forward(&self.norm1.forward(x, tape)?, tape)?;
        let h = x.add(&a)?;
        let f = self.ffn.forward(&self.norm2.forward(&h, tape)?, tape)?;
        h.add(&f)
    }

    fn backward_step(&self, tape: &mut GradientTape<T>, dy: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        let d_norm2 = self.ffn.backward_step(tape, dy, grads)?;
        let mut dh = self.norm2.backward_step(tape, &d_norm2, grads)?;
        dh.add_assign(dy)?;
        let d_norm1 = self.attn.backward_step(tape, &dh, grads)?;
        let mut dx = self.norm1.backward_step(tape, &d_norm1, grads)?;
        dx.add_assign(&dh)?;
        Ok(dx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.norm1.visit_params(f);
        self.attn.visit_params(f);
        self.norm2.visit_params(f);
        self.ffn.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        self.norm1.visit_params_mut(f);
        self.attn.visit_params_mut(f);
        self.norm2.visit_params_mut(f);
        self.ffn.visit_params_mut(f);
    }

    fn weights_mut(&mut self) -> Vec<&mut ModulatedWeight<T>> {
        let mut w = self.attn.weights_mut();
        w.extend(self.ffn.weights_mut());
        w
    }

    fn weights(&self) -> Vec<&ModulatedWeight<T>> {
        let mut w = self.attn.weights();
        w.extend(self.ffn.weights());
        w
    }
}
