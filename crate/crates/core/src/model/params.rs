use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::{Graph, Mat, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter arrays in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Mat<T>> {
        self.values.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// SHA-256 over names, shapes and the little-endian f64 image of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update((v.rows() as u64).to_le_bytes());
            h.update((v.cols() as u64).to_le_bytes());
            for x in v.data() {
                h.update(x.f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal resampled until within two standard deviations.
    TruncNormal(f64),
    Const(f64),
}

impl Init {
    pub fn sample<T: Scalar>(self, rows: usize, cols: usize, rng: &mut impl Rng) -> Mat<T> {
        let n = rows * cols;
        let data: Vec<T> = match self {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Const(c) => vec![T::of(c); n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::of(z * std)
                })
                .collect(),
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break T::of(z * std);
                    }
                })
                .collect(),
        };
        Mat::from_vec(rows, cols, data)
    }
}

/// A graph together with lazily bound parameter leaves.
///
/// Each parameter becomes exactly one node the first time it is used, so
/// its gradient is the accumulated gradient over every use in the step.
pub struct Session<'p, T: Scalar> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p, T: Scalar> Session<'p, T> {
    /// Parameters are differentiable leaves.
    pub fn train(params: &'p ParamStore<T>) -> Self {
        Self { graph: Graph::new(), params, bound: vec![None; params.len()], trainable: true }
    }

    /// Parameters are constants; no gradient bookkeeping.
    pub fn eval(params: &'p ParamStore<T>) -> Self {
        Self { graph: Graph::new(), params, bound: vec![None; params.len()], trainable: false }
    }

    pub fn is_training(&self) -> bool {
        self.trainable
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.trainable { self.graph.param(value) } else { self.graph.constant(value) };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient per parameter (zeros for parameters the loss does not touch).
    pub fn param_grads(&self, loss: Var) -> Vec<Mat<T>> {
        let mut grads = self.graph.backward(loss);
        self.params
            .iter()
            .map(|(id, _, v)| {
                self.bound[id.0]
                    .and_then(|var| grads.take(var))
                    .unwrap_or_else(|| Mat::zeros(v.rows(), v.cols()))
            })
            .collect()
    }
}
