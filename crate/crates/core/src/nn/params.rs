//! Parameter and buffer storage shared by all model components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, ConvSpec, Tape, Var};
use crate::error::{reject, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics). Ids index into insertion order, which is also checkpoint
/// order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0]
    }

    pub(crate) fn buffer_mut_at(&mut self, i: usize) -> &mut Tensor {
        &mut self.buffers[i]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    /// Replaces all parameter values, checking the count and every shape.
    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            reject!("expected {} parameter tensors, got {}", self.values.len(), values.len());
        }
        for (i, (old, new)) in self.values.iter().zip(&values).enumerate() {
            if old.shape() != new.shape() {
                reject!("parameter {} has shape {}, got {}", self.names[i], old.shape(), new.shape());
            }
        }
        self.values = values;
        Ok(())
    }

    /// Records every parameter on `tape` as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// Folds training-mode batch statistics into the running buffers:
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let m = u.momentum;
            for (r, b) in self.buffers[u.mean.0].data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.buffers[u.var.0].data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    pub fn round_to_f32(&mut self) {
        self.values.iter_mut().chain(self.buffers.iter_mut()).for_each(Tensor::round_to_f32);
    }
}

/// Pending running-statistics update from one training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// Per-channel vectors (biases, norm affines) are stored as `1×1×1×C`.
pub fn vector_shape(len: usize) -> Shape {
    Shape::new(1, 1, 1, len)
}

/// Deterministic initializer that registers parameters under a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: String::new() }
    }

    fn name(&self, local: &str) -> String {
        if self.prefix.is_empty() {
            local.to_string()
        } else {
            format!("{}.{local}", self.prefix)
        }
    }

    /// Runs `f` with `scope` appended to the name prefix.
    pub fn scoped<T>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = self.name(scope);
        let out = f(self);
        self.prefix = saved;
        out
    }

    /// Fan-in scaled uniform `U(−g·√(6/fan_in), g·√(6/fan_in))`.
    pub fn uniform(&mut self, local: &str, shape: Shape, fan_in: usize, gain: f64) -> ParamId {
        let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
        let value = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        let name = self.name(local);
        self.store.add(name, value)
    }

    pub fn constant(&mut self, local: &str, shape: Shape, value: f64) -> ParamId {
        let name = self.name(local);
        self.store.add(name, Tensor::full(shape, value))
    }

    pub fn buffer(&mut self, local: &str, shape: Shape, value: f64) -> BufferId {
        let name = self.name(local);
        self.store.add_buffer(name, Tensor::full(shape, value))
    }

    pub fn conv(&mut self, local: &str, cout: usize, cin: usize, kernel: (usize, usize), spec: ConvSpec, bias: bool) -> Conv {
        self.conv_with_gain(local, cout, cin, kernel, spec, bias, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_with_gain(
        &mut self,
        local: &str,
        cout: usize,
        cin: usize,
        (kh, kw): (usize, usize),
        spec: ConvSpec,
        bias: bool,
        gain: f64,
    ) -> Conv {
        self.scoped(local, |b| Conv {
            weight: b.uniform("weight", Shape::new(cout, cin, kh, kw), cin * kh * kw, gain),
            bias: bias.then(|| b.constant("bias", vector_shape(cout), 0.0)),
            spec,
        })
    }

    /// Conv with all-zero weights and bias, for residual branches that should
    /// start as the identity.
    pub fn conv_zeros(&mut self, local: &str, cout: usize, cin: usize, (kh, kw): (usize, usize), spec: ConvSpec, bias: bool) -> Conv {
        self.scoped(local, |b| Conv {
            weight: b.constant("weight", Shape::new(cout, cin, kh, kw), 0.0),
            bias: bias.then(|| b.constant("bias", vector_shape(cout), 0.0)),
            spec,
        })
    }

    pub fn batchnorm(&mut self, local: &str, channels: usize) -> BatchNorm {
        self.scoped(local, |b| BatchNorm {
            gamma: b.constant("gamma", vector_shape(channels), 1.0),
            beta: b.constant("beta", vector_shape(channels), 0.0),
            running_mean: b.buffer("running_mean", vector_shape(channels), 0.0),
            running_var: b.buffer("running_var", vector_shape(channels), 1.0),
            eps: BatchNorm::EPS,
            momentum: BatchNorm::MOMENTUM,
        })
    }

    pub fn linear(&mut self, local: &str, out: usize, inp: usize, bias: bool) -> Linear {
        self.scoped(local, |b| Linear {
            weight: b.uniform("weight", Shape::new(out, inp, 1, 1), inp, 1.0),
            bias: bias.then(|| b.constant("bias", vector_shape(out), 0.0)),
        })
    }

    pub fn layer_norm(&mut self, local: &str, channels: usize) -> LayerNorm {
        self.scoped(local, |b| LayerNorm {
            gamma: b.constant("gamma", vector_shape(channels), 1.0),
            beta: b.constant("beta", vector_shape(channels), 0.0),
            eps: BatchNorm::EPS,
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn gen_seed(&mut self) -> u64 {
        self.rng.gen()
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

/// Batch-norm layer: trainable affine plus running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_scoped() {
        let build = || {
            let mut s = ParamStore::new();
            let mut b = Init::new(&mut s, 42);
            let c = b.scoped("block", |b| b.conv("conv", 4, 3, (3, 3), ConvSpec::same(3, 3, 1), true));
            let bn = b.batchnorm("bn", 4);
            (s, c, bn)
        };
        let (s1, c, bn) = build();
        let (s2, _, _) = build();
        assert_eq!(s1.values(), s2.values());
        assert_eq!(s1.names(), &["block.conv.weight", "block.conv.bias", "bn.gamma", "bn.beta"]);
        assert_eq!(s1.get(c.weight).shape(), Shape::new(4, 3, 3, 3));
        let bound = (6.0f64 / 27.0).sqrt();
        assert!(s1.get(c.weight).data().iter().all(|v| v.abs() <= bound));
        assert_eq!(s1.buffer(bn.running_var).data(), &[1.0; 4]);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut s = ParamStore::new();
        let bn = Init::new(&mut s, 0).batchnorm("bn", 2);
        let stats = BatchStats { mean: vec![1.0, 2.0], var: vec![3.0, 5.0] };
        s.apply_bn_updates(&[BnUpdate { mean: bn.running_mean, var: bn.running_var, momentum: 0.1, stats }]);
        let m = s.buffer(bn.running_mean).data();
        assert!((m[0] - 0.1).abs() < 1e-15 && (m[1] - 0.2).abs() < 1e-15);
        let v = s.buffer(bn.running_var).data();
        assert!((v[0] - 1.2).abs() < 1e-15 && (v[1] - 1.4).abs() < 1e-15);
        assert!(v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn set_values_checks_shapes() {
        let mut s = ParamStore::new();
        Init::new(&mut s, 0).linear("fc", 2, 3, false);
        assert!(s.set_values(vec![Tensor::zeros(Shape::new(3, 2, 1, 1))]).is_err());
        assert!(s.set_values(vec![]).is_err());
        assert!(s.set_values(vec![Tensor::zeros(Shape::new(2, 3, 1, 1))]).is_ok());
    }
}

pub(super) fn raw_index(id: ParamId) -> usize {
    id.0
}
