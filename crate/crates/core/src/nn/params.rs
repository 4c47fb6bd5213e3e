//! Named parameter storage and the trainable layers built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv::ConvSpec;
use super::functional::update_running;
use super::tape::{BatchStats, BnMode, Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T: Real> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Flat, ordered collection of every tensor a network owns. Insertion order is
/// stable, so checkpoints and optimizer state can be indexed positionally.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<Entry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Replace a tensor's values, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::dim(
                "assign",
                format!("{}: shape {:?} != stored {:?}", e.name, value.shape(), e.value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.value.clear_grad();
        }
    }

    /// FNV-1a over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for &d in e.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Same layout with values converted to another scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// Batch-norm running-statistic update recorded during a training forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: T,
    pub stats: BatchStats<T>,
}

/// One forward (and optional backward) evaluation against a parameter store.
///
/// Parameters are bound to tape leaves lazily on first use.
pub struct Session<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    rng: Option<ChaCha8Rng>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'s, T: Real> Session<'s, T> {
    /// `rng` drives dropout masks; without one, dropout is skipped even in training.
    pub fn new(store: &'s ParamStore<T>, training: bool, rng: Option<ChaCha8Rng>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            training,
            rng,
            bn_updates: Vec::new(),
        }
    }

    /// Continue recording on an existing tape.
    pub fn with_tape(tape: Tape<T>, store: &'s ParamStore<T>, training: bool, rng: Option<ChaCha8Rng>) -> Self {
        Self {
            tape,
            ..Self::new(store, training, rng)
        }
    }

    /// Give up the tape, e.g. to hand it back to a caller that owns it.
    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Use `v` wherever parameter `id` is read.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.store.is_trainable(id) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout rate {p} outside [0, 1)")));
        }
        match (&mut self.rng, self.training && p > 0.0) {
            (Some(rng), true) => self.tape.dropout(x, p, rng),
            _ => Ok(x),
        }
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradients for every bound trainable parameter, in store order.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(ParamId, Vec<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = grads.get_raw(v)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

/// Apply recorded batch-norm updates to the running statistics.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    for u in updates {
        let mut mean = store.get(u.mean).data().to_vec();
        let mut var = store.get(u.var).data().to_vec();
        update_running(&mut mean, &mut var, &u.stats, u.momentum);
        store.get_mut(u.mean).data_mut().copy_from_slice(&mean);
        store.get_mut(u.var).data_mut().copy_from_slice(&var);
    }
}

fn kaiming<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)))
}

/// Convolution (or transposed convolution) with Kaiming-normal weights and zero bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub transposed: bool,
}

impl Conv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        bias: bool,
        transposed: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let shape = if transposed {
            spec.transposed_weight_shape()
        } else {
            spec.weight_shape()
        };
        let fan_in = spec.in_channels * spec.kernel_volume();
        let weight = store.add(format!("{name}.weight"), kaiming(&shape, fan_in, rng), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]), true));
        Ok(Self {
            spec,
            weight,
            bias,
            transposed,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        if self.transposed {
            s.tape.transposed_conv(x, w, b, &self.spec)
        } else {
            s.tape.conv(x, w, b, &self.spec)
        }
    }
}

/// Fully connected layer, weight `out x in`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming(&[outputs, inputs], inputs, rng), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true);
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.linear(x, w, Some(b))
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), Tensor::full(&[channels], T::one()), true),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
                false,
            ),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.scale);
        let b = s.param(self.shift);
        let eps = T::from_f64_lossy(self.eps);
        if s.training {
            let (y, stats) = s.tape.batch_norm(x, g, b, eps, BnMode::Batch)?;
            s.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                momentum: T::from_f64_lossy(self.momentum),
                stats: stats.expect("batch mode returns statistics"),
            });
            Ok(y)
        } else {
            let store = s.store;
            let mode = BnMode::Frozen {
                mean: store.get(self.running_mean).data(),
                var: store.get(self.running_var).data(),
            };
            Ok(s.tape.batch_norm(x, g, b, eps, mode)?.0)
        }
    }
}

/// Convolution, batch-norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let channels = spec.out_channels;
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), spec, true, false, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), channels),
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.tape.relu(y))
    }
}

/// Draw a seed for a child generator.
pub fn fork_rng(rng: &mut ChaCha8Rng) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(rng.random())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut store = ParamStore::<f32>::new();
            Conv::new(&mut store, "c", ConvSpec::same2d(3, 4, 3), true, false, &mut rng).unwrap();
            Dense::new(&mut store, "d", 5, 2, &mut rng);
            store
        };
        assert_eq!(build().checksum(), build().checksum());
        assert_eq!(build().trainable_count(), 4 * 3 * 9 + 4 + 10 + 2);
    }

    #[test]
    fn kaiming_scale_is_fan_in_based() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = kaiming(&[200, 50], 50, &mut rng);
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.004, "{var}");
    }

    #[test]
    fn training_batch_norm_records_running_update() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let updates = {
            let mut s = Session::new(&store, true, None);
            let x = s.tape.constant(Tensor::new(&[2, 1, 1], vec![1.0, 5.0]).unwrap());
            bn.forward(&mut s, x).unwrap();
            s.take_bn_updates()
        };
        apply_bn_updates(&mut store, &updates);
        assert!((store.get(bn.running_mean).item() - 0.3).abs() < 1e-12);
        assert!((store.get(bn.running_var).item() - 1.7).abs() < 1e-12);
    }
}
