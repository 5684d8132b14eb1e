//! Small feed-forward network with hand-written reverse mode.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::rng::Rng;
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Pre-activation `W x + b`.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.weight.matvec(x);
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        z
    }

    pub fn activate(&self, z: &mut [f64]) {
        let act = self.activation;
        z.iter_mut().for_each(|v| *v = act.apply(*v));
    }

    /// Turn `dL/dy` into `dL/dz` in place, given the layer output `y`.
    pub fn backprop_activation(&self, y: &[f64], dy: &mut [f64]) {
        let act = self.activation;
        for (g, &yv) in dy.iter_mut().zip(y) {
            *g *= act.grad_from_output(yv);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

/// Activations recorded by [`DenseNet::forward`]: `values[0]` is the input,
/// `values[i + 1]` the output of layer `i`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub values: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Matrix::zeros(l.output_dim(), l.input_dim()),
                    bias: vec![0.0; l.output_dim()],
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &NetGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(scale, &b.weight).expect("same net");
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

impl DenseNet {
    /// Tanh hidden layers, identity output; Xavier-uniform weights, zero biases.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "a network needs at least input and output dims".into(),
            ));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Matrix::from_fn(fan_out, fan_in, |_, _| rng.uniform_range(-bound, bound));
                Layer {
                    weight,
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Tanh
                    },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.layers.windows(2) {
            check_dim("layer composition", w[0].output_dim(), w[1].input_dim())?;
        }
        if let Some(last) = self.layers.last() {
            if last.activation != Activation::Identity {
                return Err(Error::InvalidArgument(
                    "final layer must use the identity activation".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        check_dim("net input", self.input_dim(), x.len())?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_vec());
        for layer in &self.layers {
            let mut z = layer.affine(values.last().unwrap());
            layer.activate(&mut z);
            values.push(z);
        }
        let y = values.last().unwrap().clone();
        Ok((y, ForwardCache { values }))
    }

    /// Forward pass without keeping the activation record.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("net input", self.input_dim(), x.len())?;
        let mut h = x.to_vec();
        for layer in &self.layers {
            let mut z = layer.affine(&h);
            layer.activate(&mut z);
            h = z;
        }
        Ok(h)
    }

    /// Reverse-mode gradients of `y · dy` with respect to all parameters and
    /// the input.
    pub fn backward(&self, cache: &ForwardCache, dy: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        if cache.values.len() != self.layers.len() + 1 {
            return Err(Error::StaleCache(format!(
                "cache has {} entries, net has {} layers",
                cache.values.len(),
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if cache.values[i].len() != layer.input_dim() || cache.values[i + 1].len() != layer.output_dim() {
                return Err(Error::StaleCache(format!("layer {i} shape differs")));
            }
        }
        check_dim("backward seed", self.output_dim(), dy.len())?;

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer.backprop_activation(&cache.values[i + 1], &mut delta);
            let input = &cache.values[i];
            let mut gw = Matrix::zeros(layer.output_dim(), layer.input_dim());
            gw.add_outer(1.0, &delta, input);
            let next = layer.weight.matvec_t(&delta);
            grads.push(LayerGrads {
                weight: gw,
                bias: delta,
            });
            delta = next;
        }
        grads.reverse();
        Ok((NetGrads { layers: grads }, delta))
    }

    /// Visit every parameter block as `(name, values)`.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.as_mut_slice()));
            out.push((format!("layer{i}.bias"), l.bias.as_mut_slice()));
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat params", self.param_count(), flat.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.rows() * l.weight.cols();
            l.weight.as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }
}
