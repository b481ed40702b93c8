//! Dense row-major float64 tensors and the named parameter store.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::named_stream;

/// Dense n-dimensional array of f64 in row-major order.
///
/// `grad` is present exactly when `requires_grad` is set and always has the
/// same length as `data`. Tensors are plain values: cloning copies the data,
/// and shared read-only access from multiple threads is safe.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "shape {shape:?} expects {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// 2-D constructor from nested rows; rows must be equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    /// Marks the tensor as gradient-tracked and allocates a zero grad buffer.
    pub fn tracked(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Named map of learnable tensors.
///
/// Names are unique and iteration is lexicographic, so every walk over the
/// store (initialization, SGD updates, checkpointing) is deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    seed: u64,
    /// Set by gradient accumulation, cleared by an optimizer step or reset.
    pending_grads: bool,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { params: BTreeMap::new(), seed, pending_grads: false }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name.to_string(), tensor.tracked());
        Ok(())
    }

    /// Registers a parameter drawn uniformly from [-bound, bound], using a
    /// PRNG stream derived from (store seed, parameter name).
    pub fn insert_uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> Result<()> {
        let numel: usize = shape.iter().product();
        let mut rng = named_stream(self.seed, name);
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Lexicographic iteration over (name, tensor).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total learnable scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
        self.pending_grads = false;
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let t = self.get_mut(name)?;
        let buf = t.grad.as_mut().expect("parameters always carry a grad buffer");
        if buf.len() != grad.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match parameter {name:?} length {}",
                grad.len(),
                buf.len()
            )));
        }
        for (a, b) in buf.iter_mut().zip(grad) {
            *a += b;
        }
        self.pending_grads = true;
        Ok(())
    }

    pub fn has_pending_grads(&self) -> bool {
        self.pending_grads
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}
