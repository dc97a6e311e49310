//! Named parameter manifests, parameter storage, and binding onto a tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of parameter specs; ids index into it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    specs: Vec<ParamSpec>,
    prefix: Vec<String>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Runs `f` with `name` pushed onto the naming scope.
    pub fn scope<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.specs.push(ParamSpec {
            name: full,
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn materialize(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let tensors = self
            .specs
            .iter()
            .map(|s| match s.init {
                Init::TruncNormal => Tensor::trunc_normal(s.shape.clone(), INIT_STD, rng),
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::ones(s.shape.clone()),
            })
            .collect();
        ParamStore {
            names: self.specs.iter().map(|s| s.name.clone()).collect(),
            tensors,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Contract("parameter names and tensors differ in count".into()));
        }
        Ok(Self { names, tensors })
    }

    /// Checks that names and shapes agree with `manifest`, in order.
    pub fn validate(&self, manifest: &Manifest) -> Result<()> {
        if self.len() != manifest.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                manifest.len(),
                self.len()
            )));
        }
        for (spec, (name, t)) in manifest.specs().iter().zip(self.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: config expects {} {:?}, checkpoint has {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Zero-filled buffers shaped like each parameter.
    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect()
    }
}

/// A tape plus the lazily bound parameter leaves of one forward pass.
pub struct Ctx<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p ParamStore, track: bool) -> Self {
        Self {
            tape: if track { Tape::new() } else { Tape::no_grad() },
            params,
            bound: vec![None; params.len()],
            dropout: None,
        }
    }

    /// Enables dropout with the given rate and generator.
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, rng));
        }
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// The tape leaf for `id`, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        match &mut self.dropout {
            Some((rate, rng)) => self.tape.dropout(x, *rate, rng),
            None => x,
        }
    }

    /// Gradients of every parameter after `backward`, zeros for unused ones.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.bound
            .iter()
            .zip(self.params.tensors())
            .map(|(v, t)| {
                v.and_then(|v| self.tape.grad(v))
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }
}

/// Draws a `u64` usable as a child seed.
pub fn child_seed<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.random()
}
