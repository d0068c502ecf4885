use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a parameter was (or should be) initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `uniform(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    Zeros,
    Uniform(f64),
    /// Values supplied by the caller (e.g. pretrained embeddings).
    Given,
}

impl Init {
    pub fn sample(&self, rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        match *self {
            Init::Glorot => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
            }
            Init::Uniform(a) => Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-a..a)),
            Init::Zeros | Init::Given => Tensor::zeros(rows, cols),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub init: Init,
}

/// Named parameters with paired gradient buffers, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, init: Init) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.insert(name, Param { value, grad, init });
        Ok(())
    }

    /// Create and initialize a parameter from its init scheme.
    pub fn init(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let value = init.sample(rows, cols, rng);
        self.insert(name, value, init)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Add `grads` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, entry) in &grads.entries {
            let param = self.get_mut(name)?;
            match entry {
                GradEntry::Dense(g) => {
                    if g.shape() != param.grad.shape() {
                        return Err(Error::shape(
                            "accumulate",
                            format!("{name}: {:?} vs {:?}", g.shape(), param.grad.shape()),
                        ));
                    }
                    param.grad.add_assign(g);
                }
                GradEntry::Rows(rows) => {
                    for (&r, values) in rows {
                        for (dst, v) in param.grad.row_mut(r).iter_mut().zip(values) {
                            *dst += v;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params.values_mut() {
            p.grad.scale_in_place(factor);
        }
    }

    /// True when both stores hold the same names, shapes and bitwise-equal values.
    pub fn values_identical(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .as_slice()
                        .iter()
                        .zip(b.value.as_slice())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Gradient for one parameter: dense, or sparse rows for embedding gathers.
#[derive(Debug, Clone)]
pub enum GradEntry {
    Dense(Tensor),
    Rows(BTreeMap<usize, Vec<f64>>),
}

/// Gradients produced by one backward pass, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) entries: BTreeMap<String, GradEntry>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&GradEntry> {
        self.entries.get(name)
    }

    /// Dense view of the gradient for `name`, zero when unreachable.
    pub fn dense(&self, name: &str, store: &ParamStore) -> Result<Tensor> {
        let shape = store.value(name)?.shape();
        let mut out = Tensor::zeros(shape[0], shape[1]);
        match self.entries.get(name) {
            None => {}
            Some(GradEntry::Dense(g)) => out = g.clone(),
            Some(GradEntry::Rows(rows)) => {
                for (&r, values) in rows {
                    out.row_mut(r).copy_from_slice(values);
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn add_dense(&mut self, name: &str, g: &Tensor) {
        match self.entries.get_mut(name) {
            Some(GradEntry::Dense(acc)) => acc.add_assign(g),
            Some(GradEntry::Rows(_)) => unreachable!("parameter `{name}` used both dense and gathered"),
            None => {
                self.entries
                    .insert(name.to_string(), GradEntry::Dense(g.clone()));
            }
        }
    }

    pub(crate) fn add_row(&mut self, name: &str, row: usize, g: &[f64]) {
        let entry = self
            .entries
            .entry(name.to_string())
            .or_insert_with(|| GradEntry::Rows(BTreeMap::new()));
        match entry {
            GradEntry::Rows(rows) => {
                let acc = rows.entry(row).or_insert_with(|| vec![0.0; g.len()]);
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            GradEntry::Dense(acc) => {
                for (a, v) in acc.row_mut(row).iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|e| match e {
            GradEntry::Dense(t) => t.is_finite(),
            GradEntry::Rows(rows) => rows.values().flatten().all(|v| v.is_finite()),
        })
    }
}
