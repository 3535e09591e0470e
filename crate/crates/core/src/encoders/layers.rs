use rand::Rng;

use crate::autodiff::{xavier, BnBuffers, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Affine map `x W + b` on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.w"), xavier(rng, in_dim, out_dim));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let h = tape.matmul(x, w)?;
        Ok(tape.add(h, b)?)
    }
}

#[derive(Clone, Debug)]
struct BatchNormLayer {
    gamma: ParamId,
    beta: ParamId,
    buffers: BnBuffers,
}

/// Dense stack: linear, optional batch norm, ReLU, dropout per layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(Linear, Option<BatchNormLayer>)>,
    dropout: f64,
}

pub const BN_MOMENTUM: f64 = 0.9;

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, hidden: &[usize], batch_norm: bool, dropout: f64) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            let lin = Linear::new(store, rng, &format!("{name}.{i}"), prev, h);
            let bn = batch_norm.then(|| BatchNormLayer {
                gamma: store.add(format!("{name}.{i}.bn.gamma"), Tensor::filled(&[h], 1.0)),
                beta: store.add(format!("{name}.{i}.bn.beta"), Tensor::zeros(&[h])),
                buffers: BnBuffers {
                    mean: store.add_buffer(format!("{name}.{i}.bn.running_mean"), Tensor::zeros(&[h])),
                    var: store.add_buffer(format!("{name}.{i}.bn.running_var"), Tensor::filled(&[h], 1.0)),
                    momentum: BN_MOMENTUM,
                },
            });
            layers.push((lin, bn));
            prev = h;
        }
        Self { layers, dropout }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        self.layers.last().map(|(l, _)| l.out_dim).unwrap_or(in_dim)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for (lin, bn) in &self.layers {
            x = lin.forward(tape, store, x)?;
            if let Some(bn) = bn {
                let g = tape.param(store, bn.gamma)?;
                let b = tape.param(store, bn.beta)?;
                x = tape.batch_norm(x, g, b, bn.buffers, store)?;
            }
            x = tape.relu(x)?;
            x = tape.dropout(x, self.dropout)?;
        }
        Ok(x)
    }
}
