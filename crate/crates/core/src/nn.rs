//! Small layer wrappers over the tape primitives.

use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorId};
use crate::Result;
use rand::Rng;
use rand_distr::StandardNormal;

pub const NORM_EPS: f64 = 1e-5;

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(format!("{name}.w"), kaiming(&[cout, cin, k, k], cin * k * k, rng));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv2dLayer { w, b, stride, pad }
    }

    /// 1x1 convolution with weights and bias at exactly zero.
    pub fn zero_1x1(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.register(format!("{name}.w"), Tensor::zeros(&[cout, cin, 1, 1]));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv2dLayer { w, b, stride: 1, pad: 0 }
    }

    /// 1x1 convolution with random (non-zero) init; the ablation variant.
    pub fn random_1x1(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.register(format!("{name}.w"), kaiming(&[cout, cin, 1, 1], cin, rng));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv2dLayer { w, b, stride: 1, pad: 0 }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        tape.conv2d(x, bind.id(self.w), bind.id(self.b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.register(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(&[channels]));
        ChannelNormLayer { gamma, beta }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        tape.channel_norm(x, bind.id(self.gamma), bind.id(self.beta), NORM_EPS)
    }
}

/// Depthwise k=3 mixing along the frame axis, initialized near identity.
#[derive(Debug, Clone, Copy)]
pub struct TemporalLayer {
    pub w: ParamId,
}

impl TemporalLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        let k = 3;
        let mut data = vec![0.0; channels * k];
        for c in 0..channels {
            for j in 0..k {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.02;
                data[c * k + j] = if j == k / 2 { 1.0 + noise } else { noise };
            }
        }
        let w = store.register(format!("{name}.w"), Tensor::new(vec![channels, k], data));
        TemporalLayer { w }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        tape.temporal_conv(x, bind.id(self.w))
    }
}

/// Fully connected layer on flat vectors, realized as a 1x1 convolution.
#[derive(Debug, Clone, Copy)]
pub struct LinearLayer {
    conv: Conv2dLayer,
    din: usize,
    dout: usize,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, din: usize, dout: usize) -> Self {
        let w = store.register(format!("{name}.w"), kaiming(&[dout, din, 1, 1], din, rng));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[dout]));
        LinearLayer { conv: Conv2dLayer { w, b, stride: 1, pad: 0 }, din, dout }
    }

    /// Apply to a `[D]` vector, returning a `[Dout]` vector.
    pub fn apply(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        let v = tape.reshape(x, &[1, self.din, 1, 1])?;
        let y = self.conv.apply(tape, bind, v)?;
        tape.reshape(y, &[self.dout])
    }
}
