//! Parameters, forward-pass context and the layer zoo shared by every model
//! component.

mod layers;
mod optim;

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{grad_check_many, Coords, GradCheckReport, Tape, Tensor, Var};

pub use layers::{
    sinusoidal_positions, Conv1d, LayerNorm, Linear, MultiHeadAttention, TransformerBlock,
};
pub use optim::{clip_global_norm, Adam, AdamConfig, NoamSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter table. Insertion order is the canonical order
/// used by checkpoints and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), &**v))
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let old = &self.values[id.0];
        if old.shape() != value.shape() {
            return Err(Error::shapes("ParamStore::set", old.shape(), value.shape()));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}

/// Registers parameters under a dotted name prefix, drawing initial values
/// from a seeded generator.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::uniform(shape, bound, self.rng);
        let n = self.full_name(name);
        self.store.insert(n, t)
    }

    pub fn fill(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        let n = self.full_name(name);
        self.store.insert(n, Tensor::full(shape, value))
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        let n = self.full_name(name);
        self.store.insert(n, t)
    }
}

/// One forward pass: the tape, read-only parameters bound lazily onto it,
/// and the dropout generator (absent in inference mode).
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    /// Inference mode: dropout disabled.
    pub fn eval(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Ctx {
            tape,
            store,
            bound: vec![None; store.len()],
            dropout_rng: None,
        }
    }

    /// Training mode with a seeded dropout stream.
    pub fn train(tape: &'a mut Tape, store: &'a ParamStore, dropout_seed: u64) -> Self {
        Ctx {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            ..Ctx::eval(tape, store)
        }
    }

    /// Uses the given tape vars as the parameters instead of the store's
    /// values (one var per parameter, in store order). Lets gradient checks
    /// perturb weights.
    pub fn with_bindings(mut self, vars: &[Var]) -> Result<Self> {
        if vars.len() != self.store.len() {
            return Err(Error::usage(format!(
                "expected {} parameter bindings, got {}",
                self.store.len(),
                vars.len()
            )));
        }
        self.bound = vars.iter().copied().map(Some).collect();
        Ok(self)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf_shared(self.store.shared(id), true);
        self.bound[id.0] = Some(v);
        v
    }

    /// Inverted dropout; identity in inference mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        use rand::Rng;
        let shape = self.tape.shape(x).to_vec();
        let n = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::from_parts(shape, mask));
        self.tape.mul(x, m)
    }

    /// Gradients of every bound parameter after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                v.and_then(|v| self.tape.grad(v).cloned())
                    .map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

/// Gradient check of `f` with respect to every parameter in `store` and to
/// each `data` tensor. Parameters come first in the report's input index,
/// in store order.
pub fn grad_check_model<F>(
    store: &ParamStore,
    data: &[Tensor],
    h: f64,
    coords: Coords,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let np = store.len();
    let mut inputs: Vec<Arc<Tensor>> = store.ids().map(|id| store.shared(id)).collect();
    inputs.extend(data.iter().cloned().map(Arc::new));
    grad_check_many(
        |t, vars| {
            let mut ctx = Ctx::eval(t, store).with_bindings(&vars[..np])?;
            f(&mut ctx, &vars[np..])
        },
        &inputs,
        h,
        coords,
    )
}
