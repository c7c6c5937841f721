//! Layers and optimizer built on the autodiff tape.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Init, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            &[input, output],
            Init::Scaled {
                fan_in: input,
                gain: 1.0,
            },
            rng,
        );
        let bias = store.add(&format!("{name}.bias"), &[output], Init::Zeros, rng);
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    /// `x: [m, input] -> [m, output]`. A 1-D input is treated as one row.
    pub fn forward<'a>(&self, t: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Var {
        let x = if t.shape(x).len() == 1 {
            t.reshape(x, &[1, self.input])
        } else {
            x
        };
        let w = t.param(store, self.weight);
        let b = t.param(store, self.bias);
        let y = t.matmul(x, w);
        t.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

/// Convolution blocks with ReLU, followed by global average pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvStack {
    pub layers: Vec<Conv>,
    pub out_channels: usize,
}

impl ConvStack {
    /// `channels[0]` is the input channel count; kernel is `kh x kw`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: &[usize],
        kernel: (usize, usize),
        strides: &[usize],
    ) -> Self {
        assert_eq!(channels.len(), strides.len() + 1);
        let layers = channels
            .windows(2)
            .zip(strides)
            .enumerate()
            .map(|(i, (io, &stride))| {
                let fan_in = io[0] * kernel.0 * kernel.1;
                let weight = store.add(
                    &format!("{name}.conv{i}.weight"),
                    &[io[1], io[0], kernel.0, kernel.1],
                    Init::Scaled { fan_in, gain: 2.0 },
                    rng,
                );
                let bias = store.add(&format!("{name}.conv{i}.bias"), &[io[1]], Init::Zeros, rng);
                Conv {
                    weight,
                    bias,
                    spec: ConvSpec {
                        stride,
                        pad_h: kernel.0 / 2,
                        pad_w: kernel.1 / 2,
                    },
                }
            })
            .collect();
        Self {
            layers,
            out_channels: *channels.last().unwrap(),
        }
    }

    /// `x: [N, C, H, W] -> [N, out_channels]`.
    pub fn forward<'a>(&self, t: &mut Tape<'a>, store: &'a ParamStore, mut x: Var) -> Var {
        for layer in &self.layers {
            let w = t.param(store, layer.weight);
            let b = t.param(store, layer.bias);
            x = t.conv2d(x, w, b, layer.spec);
            x = t.relu(x);
        }
        t.global_avg_pool(x)
    }
}

/// Per-image CNN followed by a linear projection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEncoder {
    pub convs: ConvStack,
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: &[usize],
        output: usize,
    ) -> Self {
        let strides = vec![2; channels.len() - 1];
        let convs = ConvStack::new(store, rng, name, channels, (3, 3), &strides);
        let proj = Linear::new(
            store,
            rng,
            &format!("{name}.proj"),
            convs.out_channels,
            output,
        );
        Self { convs, proj }
    }

    /// `images: [N, C, H, W] -> [N, output]`.
    pub fn forward<'a>(&self, t: &mut Tape<'a>, store: &'a ParamStore, images: Var) -> Var {
        let pooled = self.convs.forward(t, store, images);
        self.proj.forward(t, store, pooled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: store.zeros_like(),
            v: store.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (pi, entry) in store.entries_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[pi], &mut self.v[pi], &grads[pi]);
            for k in 0..entry.data.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                entry.data[k] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}
