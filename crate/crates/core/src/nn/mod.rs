//! Layer definitions and the forward-pass context that binds them to a tape.

mod params;

pub use params::{vector_shape, BatchNorm, BnUpdate, BufferId, Conv, Init, LayerNorm, Linear, ParamId, ParamStore};

use crate::autograd::{Tape, Var};
use crate::error::{reject, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics and records running-stat updates.
    Train,
    /// Batch norm uses the stored running statistics.
    Infer,
}

/// One forward pass: the tape, the parameters bound as leaves, and the mode.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    params: Vec<Var>,
    pub mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        let params = store.bind(tape);
        Fwd { tape, store, params, mode, bn_updates: Vec::new() }
    }

    /// Uses already-recorded variables as the parameters (one per store
    /// entry, in order); lets gradient checks treat weights as inputs.
    pub fn with_params(tape: &'a mut Tape, store: &'a ParamStore, params: Vec<Var>, mode: Mode) -> Result<Self> {
        if params.len() != store.len() {
            reject!("expected {} parameter variables, got {}", store.len(), params.len());
        }
        for (i, (&v, t)) in params.iter().zip(store.values()).enumerate() {
            if tape.shape(v) != t.shape() {
                reject!("parameter {} expects {}, got {}", store.names()[i], t.shape(), tape.shape(v));
            }
        }
        Ok(Fwd { tape, store, params, mode, bn_updates: Vec::new() })
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id_index(id, self.store)]
    }

    /// Tape variables of every parameter, in store order.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn input(&mut self, x: Tensor) -> Var {
        self.tape.constant(x)
    }

    pub fn conv(&mut self, x: Var, layer: &Conv) -> Result<Var> {
        let w = self.p(layer.weight);
        let b = layer.bias.map(|b| self.p(b));
        self.tape.conv2d(x, w, b, layer.spec)
    }

    pub fn batchnorm(&mut self, x: Var, layer: &BatchNorm) -> Result<Var> {
        let (g, b) = (self.p(layer.gamma), self.p(layer.beta));
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batchnorm_train(x, g, b, layer.eps)?;
                self.bn_updates.push(BnUpdate {
                    mean: layer.running_mean,
                    var: layer.running_var,
                    momentum: layer.momentum,
                    stats,
                });
                Ok(y)
            }
            Mode::Infer => {
                let mean = self.store.buffer(layer.running_mean).data();
                let var = self.store.buffer(layer.running_var).data();
                self.tape.batchnorm_infer(x, g, b, mean, var, layer.eps)
            }
        }
    }

    pub fn linear(&mut self, x: Var, layer: &Linear) -> Result<Var> {
        let w = self.p(layer.weight);
        let b = layer.bias.map(|b| self.p(b));
        self.tape.linear(x, w, b)
    }

    pub fn layer_norm(&mut self, x: Var, layer: &LayerNorm) -> Result<Var> {
        let (g, b) = (self.p(layer.gamma), self.p(layer.beta));
        self.tape.layer_norm(x, g, b, layer.eps)
    }

    /// conv → batch norm → ReLU.
    pub fn conv_bn_relu(&mut self, x: Var, conv: &Conv, bn: &BatchNorm) -> Result<Var> {
        let y = self.conv(x, conv)?;
        let y = self.batchnorm(y, bn)?;
        Ok(self.tape.relu(y))
    }
}

fn id_index(id: ParamId, store: &ParamStore) -> usize {
    let i = params::raw_index(id);
    debug_assert!(i < store.len());
    i
}
