use rand::Rng;

use super::tape::{AttentionRecord, ConvRecord, FfnRecord, GradientTape, LinearRecord, NormRecord, Record, UpRecord};
use super::{Grads, LayerGroup, ParamId, ParamView, ParamViewMut};
use crate::error::{Error, Result};
use crate::modulation::ModulatedWeight;
use crate::numerics::{gemm, Scalar, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Common interface of every differentiable layer.
pub trait Module<T: Scalar> {
    fn forward(&self, x: &Tensor<T>, tape: &mut GradientTape<T>) -> Result<Tensor<T>>;

    /// Pops this layer's record, accumulates parameter gradients and returns `dL/dx`.
    fn backward_step(&self, tape: &mut GradientTape<T>, dy: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>>;

    fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_, T>));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>));

    fn weights_mut(&mut self) -> Vec<&mut ModulatedWeight<T>>;

    fn weights(&self) -> Vec<&ModulatedWeight<T>>;
}

fn chw<T: Scalar>(x: &Tensor<T>, channels: usize, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] if c == channels => Ok((c, h, w)),
        _ => Err(Error::Dimension(format!(
            "{what} expects a {channels}×H×W input, got {:?}",
            x.shape()
        ))),
    }
}

/// Rows of `x` as a `channels × rest` matrix.
fn channel_matrix<T: Scalar>(x: &Tensor<T>, channels: usize, what: &str) -> Result<usize> {
    if x.ndim() < 2 || x.shape()[0] != channels {
        return Err(Error::Dimension(format!(
            "{what} expects {channels} leading channels, got {:?}",
            x.shape()
        )));
    }
    Ok(x.len() / channels)
}

fn uniform_matrix<T: Scalar>(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn([rows, cols], |_| T::lit(rng.random_range(-bound..bound)))
}

fn tensor_with_shape<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), data).expect("layer output shape is consistent")
}

// ---------------------------------------------------------------------------

/// `k×k` convolution, stride 1, zero padding `k/2`, no bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: ModulatedWeight<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: &str, group: LayerGroup, c_in: usize, c_out: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "odd kernel sizes only");
        let w = uniform_matrix(c_out, c_in * kernel * kernel, c_in * kernel * kernel, rng);
        Self::from_weight(name, group, c_in, kernel, w).expect("consistent shape")
    }

    pub fn from_weight(name: &str, group: LayerGroup, c_in: usize, kernel: usize, w: Tensor<T>) -> Result<Self> {
        let (c_out, cols) = w.dims2()?;
        if cols != c_in * kernel * kernel {
            return Err(Error::Dimension(format!(
                "conv weight {:?} vs c_in {c_in}, k {kernel}",
                w.shape()
            )));
        }
        Ok(Self {
            weight: ModulatedWeight::new(format!("{name}.weight"), group, w)?,
            c_in,
            c_out,
            kernel,
        })
    }

    fn im2col(&self, x: &[T], h: usize, w: usize) -> Vec<T> {
        let (k, pad) = (self.kernel, self.kernel / 2);
        let n = h * w;
        let mut cols = vec![T::zero(); self.c_in * k * k * n];
        for c in 0..self.c_in {
            let plane = &x[c * n..(c + 1) * n];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &plane[sy as usize * w..][..w];
                        let dst = &mut row[y * w..][..w];
                        for (xx, d) in dst.iter_mut().enumerate() {
                            let sx = xx as isize + kx as isize - pad as isize;
                            if sx >= 0 && sx < w as isize {
                                *d = src[sx as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize) -> Vec<T> {
        let (k, pad) = (self.kernel, self.kernel / 2);
        let n = h * w;
        let mut x = vec![T::zero(); self.c_in * n];
        for c in 0..self.c_in {
            let plane = &mut x[c * n..(c + 1) * n];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - pad as isize;
                            if sx >= 0 && sx < w as isize {
                                plane[sy as usize * w + sx as usize] += row[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn forward(&self, x: &Tensor<T>, tape: &mut GradientTape<T>) -> Result<Tensor<T>> {
        let (_, h, w) = chw(x, self.c_in, "conv2d")?;
        let n = h * w;
        let weight = self.weight.effective()?.into_owned();
        let cols = self.im2col(x.data(), h, w);
        let kk = self.c_in * self.kernel * self.kernel;
        let mut y = vec![T::zero(); self.c_out * n];
        gemm(self.c_out, kk, n, weight.data(), false, &cols, false, &mut y, false);
        tape.push(Record::Conv(ConvRecord {
            cols,
            weight,
            in_shape: [self.c_in, h, w],
        }))?;
        Ok(tensor_with_shape(&[self.c_out, h, w], y))
    }

    fn backward_step(&self, tape: &mut GradientTape<T>, dy: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        let Record::Conv(rec) = tape.pop("conv2d")? else {
            unreachable!()
        };
        let [c_in, h, w] = rec.in_shape;
        let n = h * w;
        let kk = c_in * self.kernel * self.kernel;
        if dy.shape() != [self.c_out, h, w] {
            return Err(Error::Dimension(format!("conv2d gradient shape {:?}", dy.shape())));
        }
        let mut dw = Tensor::zeros([self.c_out, kk]);
        gemm(
            self.c_out,
            n,
            kk,
            dy.data(),
            false,
            &rec.cols,
            true,
            dw.data_mut(),
            false,
        );
        let mut dcols = vec![T::zero(); kk * n];
        gemm(
            kk,
            self.c_out,
            n,
            rec.weight.data(),
            true,
            dy.data(),
            false,
            &mut dcols,
            false,
        );
        self.weight.backprop(dw, grads)?;
        Ok(tensor_with_shape(&[c_in, h, w], self.col2im(&dcols, h, w)))
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.weight.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        self.weight.visit_mut(f);
    }

    fn weights_mut(&mut self) -> Vec<&mut ModulatedWeight<T>> {
        vec![&mut self.weight]
    }

    fn weights(&self) -> Vec<&ModulatedWeight<T>> {
        vec![&self.weight]
    }
}

// ---------------------------------------------------------------------------

/// Per-position channel mixing `y = W x` over a `C_in × …` input (a 1×1 convolution).
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: ModulatedWeight<T>,
    pub c_in: usize,
    pub c_out: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, group: LayerGroup, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self::from_weight(name, group, uniform_matrix(c_out, c_in, c_in, rng)).expect("2-D weight")
    }

    pub fn from_weight(name: &str, group: LayerGroup, w: Tensor<T>) -> Result<Self> {
        let (c_out, c_in) = w.dims2()?;
        Ok(Self {
            weight: ModulatedWeight::new(format!("{name}.weight"), group, w)?,
            c_in,
            c_out,
        })
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn forward(&self, x: &Tensor<T>, tape: &mut GradientTape<T>) -> Result<Tensor<T>> {
        let n = channel_matrix(x, self.c_in, "linear")?;
        let weight = self.weight.effective()?.into_owned();
        let mut y = vec![T::zero(); self.c_out * n];
        gemm(
            self.c_out,
            self.c_in,
            n,
            weight.data(),
            false,
            x.data(),
            false,
            &mut y,
            false,
        );
        let mut shape = x.shape().to_vec();
        shape[0] = self.c_out;
        tape.push(Record::Linear(LinearRecord { x: x.clone(), weight }))?;
        Ok(tensor_with_shape(&shape, y))
    }

    fn backward_step(&self, tape: &mut GradientTape<T>, dy: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        let Record::Linear(rec) = tape.pop("linear")? else {
            unreachable!()
        };
        let n = rec.x.len() / self.c_in;
        if dy.len() != self.c_out * n {
            return Err(Error::Dimension(format!("linear gradient shape {:?}", dy.shape())));
        }
        let mut dw = Tensor::zeros([self.c_out, self.c_in]);
        gemm(
            self.c_out,
            n,
            self.c_in,
            dy.data(),
            false,
            rec.x.data(),
            true,
            dw.data_mut(),
            false,
        );
        let mut dx = vec![T::zero(); self.c_in * n];
        gemm(
            self.c_in,
            self.c_out,
            n,
            rec.weight.data(),
            true,
            dy.data(),
            false,
            &mut dx,
            false,
        );
        self.weight.backprop(dw, grads)?;
        Ok(tensor_with_shape(rec.x.shape(), dx))
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.weight.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        self.weight.visit_mut(f);
    }

    fn weights_mut(&mut self) -> Vec<&mut ModulatedWeight<T>> {
        vec![&mut self.weight]
    }

    fn weights(&self) -> Vec<&ModulatedWeight<T>> {
        vec![&self.weight]
    }
}

// ---------------------------------------------------------------------------

/// Normalizes the channel vector at every spatial position.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub channels: usize,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Tensor::filled([channels], T::one()),
            beta: Tensor::zeros([channels]),
            channels,
        }
    }

    fn gamma_id(&self) -> ParamId {
        ParamId::backbone(format!("{}.gamma", self.name))
    }

    fn beta_id(&self) -> ParamId {
        ParamId::backbone(format!("{}.beta", self.name))
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn forward(&self, x: &Tensor<T>, tape: &mut GradientTape<T>) -> Result<Tensor<T>> {
        let n = channel_matrix(x, self.channels, "layernorm")?;
        let c = self.channels;
        let xd = x.data();
        let inv_c = T::lit(1.0 / c as f64);
        let eps = T::lit(LAYERNORM_EPS);
        let mut mean = vec![T::zero(); n];
        for ch in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xd[ch * n..(ch + 1) * n]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![T::zero(); n];
        for ch in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(&xd[ch * n..(ch + 1) * n]).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s * inv_c + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); c * n];
        let mut y = vec![T::zero(); c * n];
        for ch in 0..c {
            let (g, b) = (self.gamma.data()[ch], self.beta.data()[ch]);
            for i in 0..n {
                let h = (xd[ch * n + i] - mean[i]) * inv_std[i];
                xhat[ch * n + i] = h;
                y[ch * n + i] = g * h + b;
            }
        }
        tape.push(Record::Norm(NormRecord {
            xhat,
            inv_std,
            in_shape: x.shape().to_vec(),
        }))?;
        Ok(tensor_with_shape(x.shape(), y))
    }

    fn backward_step(&self, tape: &mut GradientTape<T>, dy: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        let Record::Norm(rec) = tape.pop("layernorm")? else {
            unreachable!()
        };
        if dy.shape() != rec.in_shape.as_slice() {
            return Err(Error::Dimension(format!("layernorm gradient shape {:?}", dy.shape())));
        }
        let c = self.channels;
        let n = dy.len() / c;
        let dyd = dy.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        // per position: Σ dxhat and Σ dxhat·xhat
        let mut s1 = vec![T::zero(); n];
        let mut s2 = vec![T::zero(); n];
        for ch in 0..c {
            let g = self.gamma.data()[ch];
            for i in 0..n {
                let d = dyd[ch * n + i];
                let h = rec.xhat[ch * n + i];
                dgamma[ch] += d * h;
                dbeta[ch] += d;
                let dh = d * g;
                s1[i] += dh;
                s2[i] += dh * h;
            }
        }
        let inv_c = T::lit(1.0 / c as f64);
        let mut dx = vec![T::zero(); c * n];
        for ch in 0..c {
            let g = self.gamma.data()[ch];
            for i in 0..n {
                let dh = dyd[ch * n + i] * g;
                let h = rec.xhat[ch * n + i];
                dx[ch * n + i] = rec.inv_std[i] * (dh - inv_c * s1[i] - h * inv_c * s2[i]);
            }
        }
        grads.accumulate(self.gamma_id(), Tensor::new([c], dgamma)?)?;
        grads.accumulate(self.beta_id(), Tensor::new([c], dbeta)?)?;
        Ok(tensor_with_shape(&rec.in_shape, dx))
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        f(ParamView {
            id: self.gamma_id(),
            group: LayerGroup::LayerNorm,
            tensor: &self.gamma,
        });
        f(ParamView {
            id: self.beta_id(),
            group: LayerGroup::LayerNorm,
            tensor: &self.beta,
        });
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        let (gid, bid) = (self.gamma_id(), self.beta_id());
        f(ParamViewMut {
            id: gid,
            group: LayerGroup::LayerNorm,
            tensor: &mut self.gamma,
        });
        f(ParamViewMut {
            id: bid,
            group: LayerGroup::LayerNorm,
            tensor: &mut self.beta,
        });
    }

    fn weights_mut(&mut self) -> Vec<&mut ModulatedWeight<T>> {
        Vec::new()
    }

    fn weights(&self) -> Vec<&ModulatedWeight<T>> {
        Vec::new()
    }
}

// ---------------------------------------------------------------------------

/// Single-head channel self-attention: a `C×C` attention map over per-channel descriptors.
///
/// `Q, K, V = split(W_qkv x)`, `A = softmax(Q Kᵀ / N)` row-wise, `y = W_proj (A V)`,
/// with `N` the number of spatial positions.
#[derive(Debug, Clone)]
pub struct ChannelAttention<T> {
    pub qkv: ModulatedWeight<T>,
    pub proj: ModulatedWeight<T>,
    pub channels: usize,
}

impl<T: Scalar> ChannelAttention<T> {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let c = channels;
        Self {
            qkv: ModulatedWeight::new(
                format!("{name}.qkv"),
                LayerGroup::QkvProjection,
                uniform_matrix(3 * c, c, c, rng),
            )
            .expect("2-D"),
            proj: ModulatedWeight::new(
                format!("{name}.proj"),
                LayerGroup::PostAttnProjection,
                uniform_matrix(c, c, c, rng),
            )
            .expect("2-D"),
            channels,
        }
    }

    fn attention_map(q: &[T], k: &[T], c: usize, n: usize) -> Vec<T> {
        let mut s = vec![T::zero(); c * c];
        gemm(c, n, c, q, false, k, true, &mut s, false);
        let scale = T::lit(1.0 / n as f64);
        for row in s.chunks_mut(c) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v * scale));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v * scale - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        s
    }

    /// Row-stochastic `C×C` attention matrix for input `x`.
    pub fn attention_weights(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = channel_matrix(x, self.channels, "channel_attention")?;
        let c = self.channels;
        let w_qkv = self.qkv.effective()?;
        let mut qkv = vec![T::zero(); 3 * c * n];
        gemm(3 * c, c, n, w_qkv.data(), false, x.data(), false, &mut qkv, false);
        let a = Self::attention_map(&qkv[..c * n], &qkv[c * n..2 * c * n], c, n);
        Tensor::new([c, c], a)
    }
}

impl<T: Scalar> Module<T> for ChannelAttention<T> {
    fn forward(&self, x: &Tensor<T>, tape: &mut GradientTape<T>) -> Result<Tensor<T>> {
        let n = channel_matrix(x, self.channels, "channel_attention")?;
        let c = self.channels;
        let w_qkv = self.qkv.effective()?.into_owned();
        let w_proj = self.proj.effective()?.into_owned();
        let mut qkv = vec![T::zero(); 3 * c * n];
        gemm(3 * c, c, n, w_qkv.data(), false, x.data(), false, &mut qkv, false);
        let attn = Self::attention_map(&qkv[..c * n], &qkv[c * n..2 * c * n], c, n);
        let mut mixed = vec![T::zero(); c * n];
        gemm(c, c, n, &attn, false, &qkv[2 * c * n..], false, &mut mixed, false);
        let mut y = vec![T::zero(); c * n];
        gemm(c, c, n, w_proj.data(), false, &mixed, false, &mut y, false);
        tape.push(Record::Attention(AttentionRecord {
            x: x.clone(),
            qkv,
            attn,
            mixed,
            w_qkv,
            w_proj,
        }))?;
        Ok(tensor_with_shape(x.shape(), y))
    }

    fn backward_step(&self, tape: &mut GradientTape<T>, dy: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        let Record::Attention(rec) = tape.pop("channel_attention")? else {
            unreachable!()
        };
        let c = self.channels;
        let n = rec.x.len() / c;
        if dy.len() != c * n {
            return Err(Error::Dimension(format!("attention gradient shape {:?}", dy.shape())));
        }
        let (q, k, v) = (&rec.qkv[..c * n], &rec.qkv[c * n..2 * c * n], &rec.qkv[2 * c * n..]);

        let mut d_proj = Tensor::zeros([c, c]);
        gemm(c, n, c, dy.data(), false, &rec.mixed, true, d_proj.data_mut(), false);
        let mut d_mixed = vec![T::zero(); c * n];
        gemm(c, c, n, rec.w_proj.data(), true, dy.data(), false, &mut d_mixed, false);

        let mut d_attn = vec![T::zero(); c * c];
        gemm(c, n, c, &d_mixed, false, v, true, &mut d_attn, false);
        let mut dqkv = vec![T::zero(); 3 * c * n];
        gemm(c, c, n, &rec.attn, true, &d_mixed, false, &mut dqkv[2 * c * n..], false);

        // softmax backward, folding in the 1/N logit scale
        let scale = T::lit(1.0 / n as f64);
        let mut d_logits = vec![T::zero(); c * c];
        for i in 0..c {
            let a = &rec.attn[i * c..(i + 1) * c];
            let da = &d_attn[i * c..(i + 1) * c];
            let dot: T = a.iter().zip(da).map(|(&x, &y)| x * y).sum();
            for j in 0..c {
                d_logits[i * c + j] = a[j] * (da[j] - dot) * scale;
            }
        }
        let (dq, rest) = dqkv.split_at_mut(c * n);
        let dk = &mut rest[..c * n];
        gemm(c, c, n, &d_logits, false, k, false, dq, false);
        gemm(c, c, n, &d_logits, true, q, false, dk, false);

        let mut d_qkv_w = Tensor::zeros([3 * c, c]);
        gemm(3 * c, n, c, &dqkv, false, rec.x.data(), true, d_qkv_w.data_mut(), false);
        let mut dx = vec![T::zero(); c * n];
        gemm(c, 3 * c, n, rec.w_qkv.data(), true, &dqkv, false, &mut dx, false);

        self.proj.backprop(d_proj, grads)?;
        self.qkv.backprop(d_qkv_w, grads)?;
        Ok(tensor_with_shape(rec.x.shape(), dx))
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.qkv.visit(f);
        self.proj.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        self.qkv.visit_mut(f);
        self.proj.visit_mut(f);
    }

    fn weights_mut(&mut self) -> Vec<&mut ModulatedWeight<T>> {
        vec![&mut self.qkv, &mut self.proj]
    }

    fn weights(&self) -> Vec<&ModulatedWeight<T>> {
        vec![&self.qkv, &self.proj]
    }
}

// ---------------------------------------------------------------------------

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let t = (T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x)).tanh();
    T::lit(0.5) * x * (T::one() + t)
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// `y = W2 · gelu(W1 x)` with hidden width `ratio · C`.
#[derive(Debug, Clone)]
pub struct Ffn<T> {
    pub fc1: ModulatedWeight<T>,
    pub fc2: ModulatedWeight<T>,
    pub channels: usize,
    pub hidden: usize,
}

impl<T: Scalar> Ffn<T> {
    pub fn new(name: &str, channels: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        let hidden = channels * ratio;
        Self {
            fc1: ModulatedWeight::new(
                format!("{name}.fc1"),
                LayerGroup::FfnProjection,
                uniform_matrix(hidden, channels, channels, rng),
            )
            .expect("2-D"),
            fc2: ModulatedWeight::new(
                format!("{name}.fc2"),
                LayerGroup::FfnProjection,
                uniform_matrix(channels, hidden, hidden, rng),
            )
            .expect("2-D"),
            channels,
            hidden,
        }
    }
}

impl<T: Scalar> Module<T> for Ffn<T> {
    fn forward(&self, x: &Tensor<T>, tape: &mut GradientTape<T>) -> Result<Tensor<T>> {
        let n = channel_matrix(x, self.channels, "ffn")?;
        let (c, hd) = (self.channels, self.hidden);
        let w1 = self.fc1.effective()?.into_owned();
        let w2 = self.fc2.effective()?.into_owned();
        let mut pre = vec![T::zero(); hd * n];
        gemm(hd, c, n, w1.data(), false, x.data(), false, &mut pre, false);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let mut y = vec![T::zero(); c * n];
        gemm(c, hd, n, w2.data(), false, &act, false, &mut y, false);
        tape.push(Record::Ffn(FfnRecord {
            x: x.clone(),
            pre,
            act,
            w1,
            w2,
        }))?;
        Ok(tensor_with_shape(x.shape(), y))
    }

    fn backward_step(&self, tape: &mut GradientTape<T>, dy: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        let Record::Ffn(rec) = tape.pop("ffn")? else {
            unreachable!()
        };
        let (c, hd) = (self.channels, self.hidden);
        let n = rec.x.len() / c;
        if dy.len() != c * n {
            return Err(Error::Dimension(format!("ffn gradient shape {:?}", dy.shape())));
        }
        let mut dw2 = Tensor::zeros([c, hd]);
        gemm(c, n, hd, dy.data(), false, &rec.act, true, dw2.data_mut(), false);
        let mut dh = vec![T::zero(); hd * n];
        gemm(hd, c, n, rec.w2.data(), true, dy.data(), false, &mut dh, false);
        for (d, &p) in dh.iter_mut().zip(&rec.pre) {
            *d *= gelu_grad(p);
        }
        let mut dw1 = Tensor::zeros([hd, c]);
        gemm(hd, n, c, &dh, false, rec.x.data(), true, dw1.data_mut(), false);
        let mut dx = vec![T::zero(); c * n];
        gemm(c, hd, n, rec.w1.data(), true, &dh, false, &mut dx, false);
        self.fc2.backprop(dw2, grads)?;
        self.fc1.backprop(dw1, grads)?;
        Ok(tensor_with_shape(rec.x.shape(), dx))
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }

    fn weights_mut(&mut self) -> Vec<&mut ModulatedWeight<T>> {
        vec![&mut self.fc1, &mut self.fc2]
    }

    fn weights(&self) -> Vec<&ModulatedWeight<T>> {
        vec![&self.fc1, &self.fc2]
    }
}

// ---------------------------------------------------------------------------

/// Strided 2×2 convolution: halves H and W.
#[derive(Debug, Clone)]
pub struct Downsample<T> {
    pub weight: ModulatedWeight<T>,
    pub c_in: usize,
    pub c_out: usize,
}

impl<T: Scalar> Downsample<T> {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: ModulatedWeight::new(
                format!("{name}.weight"),
                LayerGroup::UpDownSampling,
                uniform_matrix(c_out, 4 * c_in, 4 * c_in, rng),
            )
            .expect("2-D"),
            c_in,
            c_out,
        }
    }
}

impl<T: Scalar> Module<T> for Downsample<T> {
    fn forward(&self, x: &Tensor<T>, tape: &mut GradientTape<T>) -> Result<Tensor<T>> {
        let (c, h, w) = chw(x, self.c_in, "downsample")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("downsample needs even H and W, got {h}×{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let no = ho * wo;
        let xd = x.data();
        let mut cols = vec![T::zero(); 4 * c * no];
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let row = &mut cols[(ch * 4 + dy * 2 + dx) * no..][..no];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            row[oy * wo + ox] = xd[ch * h * w + (2 * oy + dy) * w + 2 * ox + dx];
                        }
                    }
                }
            }
        }
        let weight = self.weight.effective()?.into_owned();
        let mut y = vec![T::zero(); self.c_out * no];
        gemm(self.c_out, 4 * c, no, weight.data(), false, &cols, false, &mut y, false);
        tape.push(Record::Down(ConvRecord {
            cols,
            weight,
            in_shape: [c, h, w],
        }))?;
        Ok(tensor_with_shape(&[self.c_out, ho, wo], y))
    }

    fn backward_step(&self, tape: &mut GradientTape<T>, dy: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        let Record::Down(rec) = tape.pop("downsample")? else {
            unreachable!()
        };
        let [c, h, w] = rec.in_shape;
        let (ho, wo) = (h / 2, w / 2);
        let no = ho * wo;
        if dy.shape() != [self.c_out, ho, wo] {
            return Err(Error::Dimension(format!("downsample gradient shape {:?}", dy.shape())));
        }
        let mut dw = Tensor::zeros([self.c_out, 4 * c]);
        gemm(
            self.c_out,
            no,
            4 * c,
            dy.data(),
            false,
            &rec.cols,
            true,
            dw.data_mut(),
            false,
        );
        let mut dcols = vec![T::zero(); 4 * c * no];
        gemm(
            4 * c,
            self.c_out,
            no,
            rec.weight.data(),
            true,
            dy.data(),
            false,
            &mut dcols,
            false,
        );
        let mut dx = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for ddy in 0..2 {
                for ddx in 0..2 {
                    let row = &dcols[(ch * 4 + ddy * 2 + ddx) * no..][..no];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dx[ch * h * w + (2 * oy + ddy) * w + 2 * ox + ddx] = row[oy * wo + ox];
                        }
                    }
                }
            }
        }
        self.weight.backprop(dw, grads)?;
        Ok(tensor_with_shape(&[c, h, w], dx))
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.weight.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        self.weight.visit_mut(f);
    }

    fn weights_mut(&mut self) -> Vec<&mut ModulatedWeight<T>> {
        vec![&mut self.weight]
    }

    fn weights(&self) -> Vec<&ModulatedWeight<T>> {
        vec![&self.weight]
    }
}

// ---------------------------------------------------------------------------

/// Nearest-neighbour 2× upsampling followed by a 1×1 convolution.
///
/// The 1×1 convolution commutes with nearest resizing, so it runs at the low
/// resolution first.
#[derive(Debug, Clone)]
pub struct Upsample<T> {
    pub weight: ModulatedWeight<T>,
    pub c_in: usize,
    pub c_out: usize,
}

impl<T: Scalar> Upsample<T> {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: ModulatedWeight::new(
                format!("{name}.weight"),
                LayerGroup::UpDownSampling,
                uniform_matrix(c_out, c_in, c_in, rng),
            )
            .expect("2-D"),
            c_in,
            c_out,
        }
    }
}

impl<T: Scalar> Module<T> for Upsample<T> {
    fn forward(&self, x: &Tensor<T>, tape: &mut GradientTape<T>) -> Result<Tensor<T>> {
        let (_, h, w) = chw(x, self.c_in, "upsample")?;
        let n = h * w;
        let weight = self.weight.effective()?.into_owned();
        let mut low = vec![T::zero(); self.c_out * n];
        gemm(
            self.c_out,
            self.c_in,
            n,
            weight.data(),
            false,
            x.data(),
            false,
            &mut low,
            false,
        );
        let (h2, w2) = (2 * h, 2 * w);
        let mut y = vec![T::zero(); self.c_out * h2 * w2];
        for ch in 0..self.c_out {
            for yy in 0..h2 {
                for xx in 0..w2 {
                    y[ch * h2 * w2 + yy * w2 + xx] = low[ch * n + (yy / 2) * w + xx / 2];
                }
            }
        }
        tape.push(Record::Up(UpRecord { x: x.clone(), weight }))?;
        Ok(tensor_with_shape(&[self.c_out, h2, w2], y))
    }

    fn backward_step(&self, tape: &mut GradientTape<T>, dy: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        let Record::Up(rec) = tape.pop("upsample")? else {
            unreachable!()
        };
        let (h, w) = (rec.x.shape()[1], rec.x.shape()[2]);
        let n = h * w;
        let (h2, w2) = (2 * h, 2 * w);
        if dy.shape() != [self.c_out, h2, w2] {
            return Err(Error::Dimension(format!("upsample gradient shape {:?}", dy.shape())));
        }
        let dyd = dy.data();
        let mut dlow = vec![T::zero(); self.c_out * n];
        for ch in 0..self.c_out {
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dlow[ch * n + (yy / 2) * w + xx / 2] += dyd[ch * h2 * w2 + yy * w2 + xx];
                }
            }
        }
        let mut dw = Tensor::zeros([self.c_out, self.c_in]);
        gemm(
            self.c_out,
            n,
            self.c_in,
            &dlow,
            false,
            rec.x.data(),
            true,
            dw.data_mut(),
            false,
        );
        let mut dx = vec![T::zero(); self.c_in * n];
        gemm(
            self.c_in,
            self.c_out,
            n,
            rec.weight.data(),
            true,
            &dlow,
            false,
            &mut dx,
            false,
        );
        self.weight.backprop(dw, grads)?;
        Ok(tensor_with_shape(rec.x.shape(), dx))
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.weight.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        self.weight.visit_mut(f);
    }

    fn weights_mut(&mut self) -> Vec<&mut ModulatedWeight<T>> {
        vec![&mut self.weight]
    }

    fn weights(&self) -> Vec<&ModulatedWeight<T>> {
        vec![&self.weight]
    }
}
