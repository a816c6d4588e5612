//! Parameter storage and the small layers the network is assembled from.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Grads, RunningStats, Tape, Var};
use crate::tensor::Tensor;

/// Which part of the network a parameter belongs to. The fine-tuning phase
/// freezes [`Group::Backbone`] and keeps training the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Backbone,
    Cgt,
    Blt,
    Heads,
    Fusion,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Backbone, Group::Cgt, Group::Blt, Group::Heads, Group::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Cgt => "cgt",
            Group::Blt => "blt",
            Group::Heads => "heads",
            Group::Fusion => "fusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BnId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffer<T> {
    pub name: String,
    pub group: Group,
    pub stats: RunningStats<T>,
}

/// Named trainable tensors plus batch-norm running statistics, in
/// registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<BnBuffer<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[BnBuffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [BnBuffer<T>] {
        &mut self.buffers
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    /// Number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_scalars_in(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| BnBuffer {
                    name: b.name.clone(),
                    group: b.group,
                    stats: RunningStats {
                        mean: b.stats.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        var: b.stats.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    },
                })
                .collect(),
        }
    }

    /// Copies every parameter and buffer from `other`, which must have the
    /// same layout.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() || self.buffers.len() != other.buffers.len() {
            return Err(Error::Config("parameter layout differs".into()));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Config(alloc::format!("parameter {} does not match {}", a.name, b.name)));
            }
            a.value = b.value.clone();
        }
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            if a.name != b.name || a.stats.mean.len() != b.stats.mean.len() {
                return Err(Error::Config(alloc::format!("buffer {} does not match {}", a.name, b.name)));
            }
            a.stats = b.stats.clone();
        }
        Ok(())
    }

    /// Records every parameter on a fresh tape. Parameters whose group is
    /// rejected by `trainable` are recorded as constants.
    pub fn bind(&mut self, training: bool, trainable: impl Fn(Group) -> bool) -> Forward<'_, T> {
        let mut tape = Tape::new();
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable(p.group)))
            .collect();
        Forward {
            tape,
            vars,
            buffers: &mut self.buffers,
            training,
        }
    }
}

impl<T: Real> ParamStore<T> {
    /// Like [`ParamStore::bind`] but on an existing tape whose first entries
    /// already hold the parameter values, one `Var` per parameter.
    pub fn bind_vars(&mut self, tape: Tape<T>, vars: Vec<Var>, training: bool) -> Forward<'_, T> {
        assert_eq!(vars.len(), self.params.len(), "one var per parameter");
        Forward {
            tape,
            vars,
            buffers: &mut self.buffers,
            training,
        }
    }
}

/// One forward pass: the tape, parameter handles and mutable access to the
/// batch-norm running statistics.
pub struct Forward<'s, T: Real> {
    pub tape: Tape<T>,
    vars: Vec<Var>,
    buffers: &'s mut [BnBuffer<T>],
    pub training: bool,
}

impl<'s, T: Real> Forward<'s, T> {
    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, bn: BnId) -> Result<Var> {
        let (g, b) = (self.vars[gamma.0], self.vars[beta.0]);
        self.tape.batch_norm(x, g, b, &mut self.buffers[bn.0].stats, self.training)
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Gradients of every parameter, in store order (`None` when frozen or
    /// unreachable from the loss).
    pub fn param_grads(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Deterministic parameter initializer.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    group: Group,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            group: Group::Backbone,
        }
    }

    pub fn group(&mut self, group: Group) -> &mut Self {
        self.group = group;
        self
    }

    fn push(&mut self, name: String, value: Tensor<T>) -> ParamId {
        self.store.params.push(Param {
            name,
            group: self.group,
            value,
        });
        ParamId(self.store.params.len() - 1)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)));
        self.push(name, value)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.push(name, Tensor::full(shape, T::from_f64(v)))
    }

    fn bn_buffer(&mut self, name: String, channels: usize) -> BnId {
        self.store.buffers.push(BnBuffer {
            name,
            group: self.group,
            stats: RunningStats::new(channels),
        });
        BnId(self.store.buffers.len() - 1)
    }
}

/// Same-padded convolution with bias. Weights are fan-in scaled uniform
/// with bound `√(6/fan_in)`; biases start at zero.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = init.uniform(
            alloc::format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            libm::sqrt(6.0 / fan_in),
        );
        let bias = init.constant(alloc::format!("{name}.bias"), &[c_out], 0.0);
        Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape.conv2d(x, w, Some(b))
    }

    pub fn num_params(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }
}

/// Convolution (3×3 unless built otherwise), batch normalization and ReLU.
#[derive(Debug, Clone, Copy)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub bn: BnId,
}

impl ConvBnRelu {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c_in: usize, c_out: usize) -> Self {
        Self::with_kernel(init, name, c_in, c_out, 3)
    }

    pub fn with_kernel<T: Real>(init: &mut Init<'_, T>, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Self {
        let conv = Conv::new(init, &alloc::format!("{name}.conv"), c_in, c_out, kernel);
        let gamma = init.constant(alloc::format!("{name}.bn.gamma"), &[c_out], 1.0);
        let beta = init.constant(alloc::format!("{name}.bn.beta"), &[c_out], 0.0);
        let bn = init.bn_buffer(alloc::format!("{name}.bn"), c_out);
        Self { conv, gamma, beta, bn }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = f.batch_norm(y, self.gamma, self.beta, self.bn)?;
        f.tape.relu(y)
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + 2 * self.conv.c_out
    }
}

/// Token-wise linear map `x·W (+ b)` with `W: d_in×d_out`, uniform init
/// with bound `1/√d_in`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = init.uniform(
            alloc::format!("{name}.weight"),
            &[d_in, d_out],
            1.0 / libm::sqrt(d_in as f64),
        );
        let bias = bias.then(|| init.constant(alloc::format!("{name}.bias"), &[d_out], 0.0));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let y = f.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = f.param(b);
                f.tape.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

/// Per-pixel classifier: 1×1 convolution to the class count, then softmax
/// over the class axis.
#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub conv: Conv,
}

impl Head {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c_in: usize, classes: usize) -> Self {
        Self {
            conv: Conv::new(init, name, c_in, classes, 1),
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let logits = self.conv.forward(f, x)?;
        let axis = f.tape.shape(logits).len() - 3;
        f.tape.softmax(logits, axis)
    }
}

/// Position-wise feed-forward block `relu(x·W1 + b1)·W2 + b2 + x` with a
/// 4× hidden expansion.
#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, d: usize) -> Self {
        Self {
            up: Linear::new(init, &alloc::format!("{name}.w1"), d, 4 * d, true),
            down: Linear::new(init, &alloc::format!("{name}.w2"), 4 * d, d, true),
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(f, x)?;
        let h = f.tape.relu(h)?;
        let y = self.down.forward(f, h)?;
        f.tape.add(y, x)
    }
}

/// Flattens a `C×h×w` map into `(h·w)×C` row-major tokens.
pub fn tokenize<T: Real>(tape: &mut Tape<T>, map: Var) -> Result<Var> {
    let (c, hw) = match *tape.shape(map) {
        [c, h, w] => (c, h * w),
        ref s => return Err(crate::error::shape_err("tokenize", alloc::format!("expected CHW, got {s:?}"))),
    };
    let flat = tape.reshape(map, &[c, hw])?;
    tape.transpose(flat)
}

/// Inverse of [`tokenize`].
pub fn detokenize<T: Real>(tape: &mut Tape<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let (n, c) = match *tape.shape(tokens) {
        [n, c] => (n, c),
        ref s => return Err(crate::error::shape_err("detokenize", alloc::format!("expected tokens, got {s:?}"))),
    };
    if n != h * w {
        return Err(crate::error::shape_err(
            "detokenize",
            alloc::format!("{n} tokens for a {h}×{w} map"),
        ));
    }
    let t = tape.transpose(tokens)?;
    tape.reshape(t, &[c, h, w])
}
