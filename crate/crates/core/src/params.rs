//! Named parameter storage and seeded initialisation.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

// Float supplies the math methods when std is not linked.
#[allow(unused_imports)]
use num_traits::Float;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    name: String,
    dims: Vec<usize>,
    data: Rc<Vec<T>>,
}

impl<T: Real> Param<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn shared_data(&self) -> Rc<Vec<T>> {
        self.data.clone()
    }
}

/// An ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: String, dims: &[usize], data: Vec<T>) -> ParamId {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "parameter {name}");
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, dims: dims.to_vec(), data: Rc::new(data) });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Mutable access; copies the buffer first if a graph still shares it.
    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        Rc::make_mut(&mut self.params[id.0].data).as_mut_slice()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Number of scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.data.len()).sum()
    }

    /// Same layout in another precision.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), dims: p.dims.clone(), data: Rc::new(p.data.iter().map(|v| U::of(v.as_f64())).collect()) })
                .collect(),
        }
    }
}

/// Registers parameters under a dotted name prefix, drawing initial values from a seeded RNG.
pub struct Init<'a, T> {
    set: &'a mut ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(set: &'a mut ParamSet<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Init { set, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_, T> {
        let prefix = if self.prefix.is_empty() { String::from(name) } else { format!("{}.{}", self.prefix, name) };
        Init { set: self.set, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn with(&mut self, name: &str, dims: &[usize], data: Vec<T>) -> ParamId {
        let full = self.full_name(name);
        self.set.add(full, dims, data)
    }

    pub fn uniform(&mut self, name: &str, dims: &[usize], bound: f64) -> ParamId {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.random_range(-bound..bound))).collect();
        self.with(name, dims, data)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in(&mut self, name: &str, dims: &[usize], fan_in: usize) -> ParamId {
        self.uniform(name, dims, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) -> ParamId {
        let n = dims.iter().product();
        self.with(name, dims, vec![T::zero(); n])
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], v: f64) -> ParamId {
        let n = dims.iter().product();
        self.with(name, dims, vec![T::of(v); n])
    }
}
