//! The toy IPT-style restoration network.
//!
//! Layout for `levels = L`: embedder, then `L-1` encoder stages each followed
//! by a stride-2 downsampling, a bottleneck stage, and `L-1` decoder stages
//! that upsample, concatenate the matching skip, reduce channels back with a
//! 1×1 convolution and run their blocks. The output convolution predicts a
//! residual that is added to the input.

mod block;
mod checkpoint;
mod config;

use std::collections::BTreeMap;

use crate::degradations::reflect;
use crate::error::{Error, Result};
use crate::modulation::{BiasPack, GroupTreatment, ModulatedWeight, ModulationMode, TaskId};
use crate::nn::{
    Conv2d, Downsample, GradientTape, Gradients, Grads, LayerGroup, Linear, Module, ParamRole, ParamView, ParamViewMut,
    Upsample,
};
use crate::numerics::{Scalar, Tensor};
use crate::rng;

pub use block::TransformerBlock;
pub use checkpoint::{BackboneTensor, Checkpoint};
pub use config::TinyIptConfig;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
pub struct TinyIpt<T = f32> {
    config: TinyIptConfig,
    embed: Conv2d<T>,
    encoders: Vec<Vec<TransformerBlock<T>>>,
    downs: Vec<Downsample<T>>,
    bottleneck: Vec<TransformerBlock<T>>,
    ups: Vec<Upsample<T>>,
    reducers: Vec<Linear<T>>,
    decoders: Vec<Vec<TransformerBlock<T>>>,
    output: Conv2d<T>,
    tasks: Vec<TaskId>,
    active: Option<TaskId>,
}

fn stage<T: Scalar>(name: &str, cfg: &TinyIptConfig, level: usize, rng: &mut rng::Rng) -> Vec<TransformerBlock<T>> {
    (0..cfg.blocks_per_level)
        .map(|b| TransformerBlock::new(&format!("{name}.block{b}"), cfg.channels_at(level), cfg.ffn_ratio, rng))
        .collect()
}

fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::Dimension(format!(
            "cannot concatenate {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let plane: usize = x.shape()[1..].iter().product();
    let mut sa = x.shape().to_vec();
    let mut sb = x.shape().to_vec();
    sa[0] = first;
    sb[0] -= first;
    let (da, db) = x.data().split_at(first * plane);
    Ok((Tensor::new(sa, da.to_vec())?, Tensor::new(sb, db.to_vec())?))
}

impl<T: Scalar> TinyIpt<T> {
    /// Deterministic initialization from `seed`; the output layer starts at zero
    /// so a fresh model is the identity map.
    pub fn build(config: TinyIptConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(rng::derive_named(seed, "model-init"));
        let cfg = &config;
        let deepest = cfg.levels - 1;
        let embed = Conv2d::new(
            "embed",
            LayerGroup::ImageEmbedder,
            IMAGE_CHANNELS,
            cfg.base_channels,
            3,
            &mut rng,
        );
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for l in 0..deepest {
            encoders.push(stage(&format!("enc{l}"), cfg, l, &mut rng));
            downs.push(Downsample::new(
                &format!("down{l}"),
                cfg.channels_at(l),
                cfg.channels_at(l + 1),
                &mut rng,
            ));
        }
        let bottleneck = stage("mid", cfg, deepest, &mut rng);
        let mut ups = Vec::new();
        let mut reducers = Vec::new();
        let mut decoders = Vec::new();
        for l in (0..deepest).rev() {
            let c = cfg.channels_at(l);
            ups.push(Upsample::new(&format!("up{l}"), cfg.channels_at(l + 1), c, &mut rng));
            reducers.push(Linear::new(
                &format!("reduce{l}"),
                LayerGroup::ChannelReduction,
                2 * c,
                c,
                &mut rng,
            ));
            decoders.push(stage(&format!("dec{l}"), cfg, l, &mut rng));
        }
        // Stored by level, index 0 = full resolution.
        ups.reverse();
        reducers.reverse();
        decoders.reverse();
        let output = Conv2d::from_weight(
            "output",
            LayerGroup::OutputLayer,
            cfg.base_channels,
            3,
            Tensor::zeros([IMAGE_CHANNELS, cfg.base_channels * 9]),
        )?;
        let mut model = Self {
            config,
            embed,
            encoders,
            downs,
            bottleneck,
            ups,
            reducers,
            decoders,
            output,
            tasks: Vec::new(),
            active: None,
        };
        model.apply_policy_modes();
        Ok(model)
    }

    pub fn config(&self) -> &TinyIptConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn active_task(&self) -> Option<&TaskId> {
        self.active.as_ref()
    }

    pub fn is_registered(&self, task: &TaskId) -> bool {
        self.tasks.contains(task)
    }

    fn unknown(&self, task: &TaskId) -> Error {
        Error::UnknownTask {
            task: task.to_string(),
            registered: self.tasks.iter().map(ToString::to_string).collect(),
        }
    }

    fn apply_policy_modes(&mut self) {
        let policy = self.config.policy.clone();
        for w in self.weights_mut() {
            w.set_mode(match policy.treatment(w.group()) {
                GroupTreatment::Shared => ModulationMode::BackboneOnly,
                GroupTreatment::Biased => ModulationMode::Additive,
                GroupTreatment::Replaced => ModulationMode::Replacement,
            });
        }
    }

    /// Adds `task` to the registry without giving it any task-specific tensors;
    /// it runs on the shared backbone until [`attach_task`](Self::attach_task).
    pub fn register_task(&mut self, task: &TaskId) -> Result<()> {
        if self.is_registered(task) {
            return Err(Error::Conflict(format!("task `{task}` is already registered")));
        }
        self.tasks.push(task.clone());
        Ok(())
    }

    /// Gives `task` its own tensors as the policy dictates: zero-effect low-rank
    /// biases on biased groups, copies of the backbone on replaced groups.
    pub fn attach_task(&mut self, task: &TaskId, seed: u64) -> Result<()> {
        if self.weights().iter().any(|w| w.has_task(task)) {
            return Err(Error::Conflict(format!("task `{task}` already has modulation tensors")));
        }
        let policy = self.config.policy.clone();
        for (i, w) in self.weights_mut().into_iter().enumerate() {
            match policy.treatment(w.group()) {
                GroupTreatment::Shared => {}
                GroupTreatment::Biased => w.attach_bias(task, policy.rank, rng::derive_seed(seed, i as u64))?,
                GroupTreatment::Replaced => w.attach_replacement(task)?,
            }
        }
        if !self.is_registered(task) {
            self.tasks.push(task.clone());
        }
        if self.active.as_ref() == Some(task) {
            self.set_active_task(Some(task))?;
        }
        Ok(())
    }

    /// Drops `task` and all of its tensors.
    pub fn remove_task(&mut self, task: &TaskId) {
        for w in self.weights_mut() {
            w.remove_task(task);
        }
        self.tasks.retain(|t| t != task);
        if self.active.as_ref() == Some(task) {
            self.set_active_task(None).expect("None is always valid");
        }
    }

    /// Routes every weight to `task`. Weights without tensors for `task` fall
    /// back to the backbone.
    pub fn set_active_task(&mut self, task: Option<&TaskId>) -> Result<()> {
        if let Some(t) = task {
            if !self.is_registered(t) {
                return Err(self.unknown(t));
            }
        }
        for w in self.weights_mut() {
            let routed = task.filter(|t| w.has_task(t)).cloned();
            w.set_active(routed);
        }
        self.active = task.cloned();
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let [c, h, w] = x.shape() else {
            return Err(Error::Dimension(format!("expected a 3×H×W image, got {:?}", x.shape())));
        };
        let m = self.config.spatial_multiple();
        if *c != IMAGE_CHANNELS || *h == 0 || *w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Dimension(format!(
                "expected a 3×H×W image with H and W divisible by {m}, got {:?}",
                x.shape()
            )));
        }
        Ok((*h, *w))
    }

    /// Backward pass over a tape holding exactly one forward of this model.
    pub fn backward(&self, tape: &mut GradientTape<T>, loss_grad: &Tensor<T>) -> Result<Gradients<T>> {
        tape.begin_backward()?;
        let mut params = Grads::new();
        let input = self.backward_step(tape, loss_grad, &mut params)?;
        Ok(Gradients { params, input })
    }

    /// Restores `image` for `task`; the result is clamped to `[0, 1]`.
    pub fn restore(&mut self, image: &Tensor<T>, task: &TaskId) -> Result<Tensor<T>> {
        if !self.is_registered(task) {
            return Err(self.unknown(task));
        }
        self.check_input(image)?;
        if self.active.as_ref() != Some(task) {
            self.set_active_task(Some(task))?;
        }
        let y = self.forward(image, &mut GradientTape::inference())?;
        Ok(y.map(|v| v.max(T::zero()).min(T::one())))
    }

    /// [`restore`](Self::restore) for any image size: the input is
    /// reflect-padded up to the spatial multiple and the result cropped back.
    pub fn restore_padded(&mut self, image: &Tensor<T>, task: &TaskId) -> Result<Tensor<T>> {
        let [c, h, w] = *image.shape() else {
            return Err(Error::Dimension(format!(
                "expected a 3×H×W image, got {:?}",
                image.shape()
            )));
        };
        let m = self.config.spatial_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (ph, pw) == (h, w) || h == 0 || w == 0 {
            return self.restore(image, task);
        }
        let src = image.data();
        let padded = Tensor::from_fn([c, ph, pw], |i| {
            let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
            let (sy, sx) = (reflect(y as isize, h), reflect(x as isize, w));
            src[(ch * h + sy) * w + sx]
        });
        let out = self.restore(&padded, task)?;
        let od = out.data();
        Ok(Tensor::from_fn([c, h, w], |i| {
            let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
            od[(ch * ph + y) * pw + x]
        }))
    }

    /// Every modulated weight in forward order.
    pub fn weights(&self) -> Vec<&ModulatedWeight<T>> {
        let mut out = self.embed.weights();
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            enc.iter().for_each(|b| out.extend(b.weights()));
            out.extend(down.weights());
        }
        self.bottleneck.iter().for_each(|b| out.extend(b.weights()));
        for l in (0..self.ups.len()).rev() {
            out.extend(self.ups[l].weights());
            out.extend(self.reducers[l].weights());
            self.decoders[l].iter().for_each(|b| out.extend(b.weights()));
        }
        out.extend(self.output.weights());
        out
    }

    pub fn weights_mut(&mut self) -> Vec<&mut ModulatedWeight<T>> {
        let mut out = self.embed.weights_mut();
        for (enc, down) in self.encoders.iter_mut().zip(&mut self.downs) {
            enc.iter_mut().for_each(|b| out.extend(b.weights_mut()));
            out.extend(down.weights_mut());
        }
        self.bottleneck.iter_mut().for_each(|b| out.extend(b.weights_mut()));
        let mut tail: Vec<Vec<&mut ModulatedWeight<T>>> = Vec::new();
        for ((up, red), dec) in self.ups.iter_mut().zip(&mut self.reducers).zip(&mut self.decoders) {
            let mut v = up.weights_mut();
            v.extend(red.weights_mut());
            dec.iter_mut().for_each(|b| v.extend(b.weights_mut()));
            tail.push(v);
        }
        tail.into_iter().rev().for_each(|v| out.extend(v));
        out.extend(self.output.weights_mut());
        out
    }

    /// Backbone parameter count per group; all eight groups are present.
    pub fn param_census(&self) -> BTreeMap<LayerGroup, usize> {
        let mut census: BTreeMap<LayerGroup, usize> = LayerGroup::ALL.into_iter().map(|g| (g, 0)).collect();
        self.visit_params(&mut |p| {
            if p.id.role == ParamRole::Backbone {
                *census.get_mut(&p.group).expect("all groups present") += p.tensor.len();
            }
        });
        census
    }

    pub fn backbone_param_count(&self) -> usize {
        self.param_census().values().sum()
    }

    /// Scalars owned by `task` alone.
    pub fn task_param_count(&self, task: &TaskId) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.id.role.task() == Some(task) {
                n += p.tensor.len();
            }
        });
        n
    }

    /// `(name, rank)` of every weight the policy modulates; rank is `None` for
    /// dense replacements.
    pub fn pack_layout(&self) -> Vec<(String, Option<usize>)> {
        let policy = &self.config.policy;
        self.weights()
            .into_iter()
            .filter_map(|w| {
                let (rows, cols) = w.dims();
                match policy.treatment(w.group()) {
                    GroupTreatment::Shared => None,
                    GroupTreatment::Biased => Some((w.name().to_string(), Some(policy.rank.rank_for(rows, cols)))),
                    GroupTreatment::Replaced => Some((w.name().to_string(), None)),
                }
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> TinyIpt<U> {
        let blocks = |v: &Vec<TransformerBlock<T>>| v.iter().map(|b| b.cast()).collect::<Vec<_>>();
        TinyIpt {
            config: self.config.clone(),
            embed: Conv2d {
                weight: self.embed.weight.cast(),
                c_in: self.embed.c_in,
                c_out: self.embed.c_out,
                kernel: self.embed.kernel,
            },
            encoders: self.encoders.iter().map(blocks).collect(),
            downs: self
                .downs
                .iter()
                .map(|d| Downsample {
                    weight: d.weight.cast(),
                    c_in: d.c_in,
                    c_out: d.c_out,
                })
                .collect(),
            bottleneck: blocks(&self.bottleneck),
            ups: self
                .ups
                .iter()
                .map(|u| Upsample {
                    weight: u.weight.cast(),
                    c_in: u.c_in,
                    c_out: u.c_out,
                })
                .collect(),
            reducers: self
                .reducers
                .iter()
                .map(|r| Linear {
                    weight: r.weight.cast(),
                    c_in: r.c_in,
                    c_out: r.c_out,
                })
                .collect(),
            decoders: self.decoders.iter().map(blocks).collect(),
            output: Conv2d {
                weight: self.output.weight.cast(),
                c_in: self.output.c_in,
                c_out: self.output.c_out,
                kernel: self.output.kernel,
            },
            tasks: self.tasks.clone(),
            active: self.active.clone(),
        }
    }
}

impl TinyIpt<f32> {
    pub fn extract_pack(&self, task: &TaskId) -> Result<BiasPack> {
        if !self.is_registered(task) {
            return Err(self.unknown(task));
        }
        BiasPack::extract(self.weights(), task, self.config.policy.hash()).map_err(|_| Error::UnknownTask {
            task: task.to_string(),
            registered: self
                .tasks
                .iter()
                .filter(|t| self.weights().iter().any(|w| w.has_task(t)))
                .map(ToString::to_string)
                .collect(),
        })
    }

    /// Installs `pack`, registering its task if needed. Existing tensors for
    /// that task are replaced; nothing changes if the pack does not fit.
    pub fn merge_pack(&mut self, pack: &BiasPack) -> Result<()> {
        let hash = self.config.policy.hash();
        let layout = self.pack_layout();
        let mut weights = self.weights_mut();
        pack.merge_into(&mut weights, &hash, &layout)?;
        if !self.is_registered(&pack.task) {
            self.tasks.push(pack.task.clone());
        }
        if let Some(active) = self.active.clone() {
            self.set_active_task(Some(&active))?;
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for TinyIpt<T> {
    fn forward(&self, x: &Tensor<T>, tape: &mut GradientTape<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.embed.forward(x, tape)?;
        let mut skips = Vec::with_capacity(self.downs.len());
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            for b in enc {
                h = b.forward(&h, tape)?;
            }
            let d = down.forward(&h, tape)?;
            skips.push(std::mem::replace(&mut h, d));
        }
        for b in &self.bottleneck {
            h = b.forward(&h, tape)?;
        }
        for l in (0..self.ups.len()).rev() {
            let u = self.ups[l].forward(&h, tape)?;
            let cat = concat_channels(&u, &skips[l])?;
            h = self.reducers[l].forward(&cat, tape)?;
            for b in &self.decoders[l] {
                h = b.forward(&h, tape)?;
            }
        }
        let residual = self.output.forward(&h, tape)?;
        x.add(&residual)
    }

    fn backward_step(&self, tape: &mut GradientTape<T>, dy: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        let mut dh = self.output.backward_step(tape, dy, grads)?;
        let mut d_skips = Vec::with_capacity(self.ups.len());
        for l in 0..self.ups.len() {
            for b in self.decoders[l].iter().rev() {
                dh = b.backward_step(tape, &dh, grads)?;
            }
            let d_cat = self.reducers[l].backward_step(tape, &dh, grads)?;
            let (du, ds) = split_channels(&d_cat, self.config.channels_at(l))?;
            d_skips.push(ds);
            dh = self.ups[l].backward_step(tape, &du, grads)?;
        }
        for b in self.bottleneck.iter().rev() {
            dh = b.backward_step(tape, &dh, grads)?;
        }
        for l in (0..self.downs.len()).rev() {
            dh = self.downs[l].backward_step(tape, &dh, grads)?;
            dh.add_assign(&d_skips[l])?;
            for b in self.encoders[l].iter().rev() {
                dh = b.backward_step(tape, &dh, grads)?;
            }
        }
        let mut dx = self.embed.backward_step(tape, &dh, grads)?;
        dx.add_assign(dy)?;
        Ok(dx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.embed.visit_params(f);
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            enc.iter().for_each(|b| b.visit_params(f));
            down.visit_params(f);
        }
        self.bottleneck.iter().for_each(|b| b.visit_params(f));
        for l in (0..self.ups.len()).rev() {
            self.ups[l].visit_params(f);
            self.reducers[l].visit_params(f);
            self.decoders[l].iter().for_each(|b| b.visit_params(f));
        }
        self.output.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        self.embed.visit_params_mut(f);
        for (enc, down) in self.encoders.iter_mut().zip(&mut self.downs) {
            enc.iter_mut().for_each(|b| b.visit_params_mut(f));
            down.visit_params_mut(f);
        }
        self.bottleneck.iter_mut().for_each(|b| b.visit_params_mut(f));
        for l in (0..self.ups.len()).rev() {
            self.ups[l].visit_params_mut(f);
            self.reducers[l].visit_params_mut(f);
            self.decoders[l].iter_mut().for_each(|b| b.visit_params_mut(f));
        }
        self.output.visit_params_mut(f);
    }

    fn weights_mut(&mut self) -> Vec<&mut ModulatedWeight<T>> {
        TinyIpt::weights_mut(self)
    }

    fn weights(&self) -> Vec<&ModulatedWeight<T>> {
        TinyIpt::weights(self)
    }
}

#[cfg(test)]
mod tests;
