//! Parameter storage and the per-pass forward context shared by every model.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Momentum of the running-statistics update used by eval-mode standardization.
pub const STATS_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StatId(usize);

/// Per-channel running mean / variance for eval-mode standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Network weights `W` plus the running statistics of every standardization.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    stats: Vec<RunningStats>,
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

    /// Kaiming-normal initialized weight: std `sqrt(2 / fan_in)`.
    pub fn add_kaiming<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.add(name, gaussian(shape, std, rng))
    }

    pub fn add_stats(&mut self, channels: usize) -> StatId {
        self.stats.push(RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        StatId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn stats(&self, id: StatId) -> &RunningStats {
        &self.stats[id.0]
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

pub(crate) fn gaussian<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Gradient buffers aligned with the parameters of a [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn new(len: usize) -> Self {
        Grads(vec![None; len])
    }

    pub fn from_vec(grads: Vec<Option<Tensor>>) -> Self {
        Grads(grads)
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(Option::as_ref)
    }

    pub fn as_mut_slice(&mut self) -> &mut [Option<Tensor>] {
        &mut self.0
    }

    pub fn as_slice(&self) -> &[Option<Tensor>] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Option<Tensor>> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Option<Tensor>> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(Option::is_none)
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; every sample is processed independently.
    Eval,
}

/// State for one forward (and optional backward) pass: a fresh tape plus the
/// binding of stored parameters to tape leaves.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a mut ParamStore,
    mode: Mode,
    weights_grad: bool,
    bound: Vec<Option<Var>>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a mut ParamStore, mode: Mode, weights_grad: bool) -> Self {
        let n = store.len();
        Ctx {
            tape: Tape::new(),
            store,
            mode,
            weights_grad,
            bound: vec![None; n],
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape leaf holding parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.values[id.0].clone(), self.weights_grad);
        self.bound[id.0] = Some(v);
        v
    }

    /// Channel standardization: batch statistics in train mode (updating
    /// the running estimate), running statistics in eval mode.
    pub fn standardize(&mut self, x: Var, stats: StatId) -> Result<Var> {
        let channels = self.store.stats[stats.0].mean.len();
        if self.tape.shape(x).get(1) != Some(&channels) {
            return Err(shape_err!(
                "standardize: slot has {channels} channels, input shape {:?}",
                self.tape.shape(x)
            ));
        }
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.tape.batch_standardize_with_stats(x)?;
                let shape = self.tape.shape(x);
                let n = (shape.iter().product::<usize>() / channels) as f64;
                let unbiased = n / (n - 1.0);
                let slot = &mut self.store.stats[stats.0];
                for c in 0..channels {
                    slot.mean[c] = (1.0 - STATS_MOMENTUM) * slot.mean[c] + STATS_MOMENTUM * mean[c];
                    slot.var[c] = (1.0 - STATS_MOMENTUM) * slot.var[c] + STATS_MOMENTUM * var[c] * unbiased;
                }
                Ok(y)
            }
            Mode::Eval => {
                let slot = self.store.stats[stats.0].clone();
                self.tape.standardize_fixed(x, &slot.mean, &slot.var)
            }
        }
    }

    /// Gradients accumulated on the bound parameter leaves.
    pub fn weight_grads(&self) -> Grads {
        Grads(
            self.bound
                .iter()
                .map(|b| b.and_then(|v| self.tape.grad(v).cloned()))
                .collect(),
        )
    }
}
