//! Dense multilayer perceptrons over tape values.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::ops::Activation;
use super::params::{Binding, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub weight: String,
    pub bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

/// How a layer's parameters start out.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerInit {
    /// Uniform in `±√(1/fan_in)` for weights and biases.
    FanInUniform,
    Zero,
    /// Zero weights with the given bias.
    ZeroWithBias(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LayerSpec>,
}

impl Mlp {
    /// Layers `dims[0] → dims[1] → …` named `{prefix}/l{i}/w|b`. Every layer
    /// but the last uses `hidden`; the last uses `output`.
    pub fn new(prefix: &str, dims: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec {
                weight: format!("{prefix}/l{i}/w"),
                bias: format!("{prefix}/l{i}/b"),
                fan_in: dims[i],
                fan_out: dims[i + 1],
                activation: if i + 1 == n { output } else { hidden },
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    /// Writes freshly initialized parameters; `last` overrides the output
    /// layer's initialization.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, last: LayerInit) -> Result<()> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            let init = if i + 1 == n { last.clone() } else { LayerInit::FanInUniform };
            let (w, b) = match init {
                LayerInit::FanInUniform => {
                    let bound = libm::sqrt(1.0 / l.fan_in as f64);
                    let w = (0..l.fan_in * l.fan_out)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    let b = (0..l.fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                    (w, b)
                }
                LayerInit::Zero => (vec![0.0; l.fan_in * l.fan_out], vec![0.0; l.fan_out]),
                LayerInit::ZeroWithBias(b) => {
                    if b.len() != l.fan_out {
                        return Err(Error::ShapeMismatch(format!(
                            "bias init for {} has length {}, expected {}",
                            l.bias,
                            b.len(),
                            l.fan_out
                        )));
                    }
                    (vec![0.0; l.fan_in * l.fan_out], b)
                }
            };
            store.insert(&l.weight, Tensor::from_vec(l.fan_in, l.fan_out, w))?;
            store.insert(&l.bias, Tensor::row(b))?;
        }
        Ok(())
    }

    /// Row-wise forward pass of an `n × fan_in` input.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            let w = params.var(&l.weight)?;
            let b = params.var(&l.bias)?;
            let (wr, wc) = tape.value(w).shape();
            if (wr, wc) != (l.fan_in, l.fan_out) || tape.value(b).len() != l.fan_out {
                return Err(Error::ShapeMismatch(format!(
                    "layer {}: stored {wr}x{wc}, expected {}x{}",
                    l.weight, l.fan_in, l.fan_out
                )));
            }
            if tape.value(h).cols != l.fan_in {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} expects width {}, got {}",
                    l.weight,
                    l.fan_in,
                    tape.value(h).cols
                )));
            }
            h = tape.dense(h, w, b, l.activation);
        }
        Ok(h)
    }
}

/// Evaluates an explicit `(weight, bias, activation)` chain on one input
/// vector. Weights are `fan_in × fan_out`.
pub fn mlp_forward(layers: &[(Tensor, Tensor, Activation)], input: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut h = tape.constant(Tensor::row(input.to_vec()));
    for (i, (w, b, act)) in layers.iter().enumerate() {
        if w.rows != tape.value(h).cols || b.len() != w.cols {
            return Err(Error::ShapeMismatch(format!(
                "layer {i}: input width {}, weight {}x{}, bias {}",
                tape.value(h).cols,
                w.rows,
                w.cols,
                b.len()
            )));
        }
        let wv = tape.constant(w.clone());
        let bv = tape.constant(Tensor::row(b.data.clone()));
        h = tape.dense(h, wv, bv, *act);
    }
    Ok(tape.value(h).data.clone())
}
