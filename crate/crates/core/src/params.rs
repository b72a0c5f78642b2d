use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    /// Whether decoupled weight decay applies (weights yes, biases/norm no).
    pub decay: bool,
}

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>, decay: bool) {
        self.entries.push(Param {
            name: name.into(),
            value,
            decay,
        });
    }

    /// Appends every entry of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for p in other.entries {
            self.entries.push(Param {
                name: format!("{prefix}.{}", p.name),
                ..p
            });
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.entries
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let lead = format!("{prefix}.");
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|p| {
                    p.name.strip_prefix(&lead).map(|rest| Param {
                        name: rest.to_string(),
                        value: p.value.clone(),
                        decay: p.decay,
                    })
                })
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// True when both sets have the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.dim() == b.value.dim())
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Array2::zeros(p.value.raw_dim()),
                    decay: p.decay,
                })
                .collect(),
        }
    }

    /// Euclidean distance between two sets with the same layout.
    pub fn distance(&self, other: &ParamSet) -> Result<f64> {
        if !self.same_layout(other) {
            return Err(Error::Shape("parameter sets differ in layout".into()));
        }
        let sq: f64 = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| {
                a.value
                    .iter()
                    .zip(b.value.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum();
        Ok(sq.sqrt())
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::with_capacity(self.entries.len());
        for (i, p) in self.entries.iter().enumerate() {
            vars.push(g.leaf(p.value.clone()));
            index.insert(p.name.clone(), i);
        }
        Bound { vars, index }
    }
}

/// Parameter leaves registered on a particular [`Graph`].
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name:?} is not bound"),
        }
    }

    /// Gradients in parameter order; parameters untouched by the pass get zeros.
    pub fn grads(&self, grads: &mut Grads, like: &ParamSet) -> Vec<Array2<f64>> {
        self.vars
            .iter()
            .zip(like.iter())
            .map(|(v, p)| {
                grads
                    .take(*v)
                    .unwrap_or_else(|| Array2::zeros(p.value.raw_dim()))
            })
            .collect()
    }
}

/// Uniform initialisation in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

/// `θ_k ← m·θ_k + (1−m)·θ_q`, elementwise over every entry.
pub fn momentum_update(key: &mut ParamSet, query: &ParamSet, m: f64) -> Result<()> {
    if !key.same_layout(query) {
        return Err(Error::Shape(
            "momentum update requires identical query/key layouts".into(),
        ));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidInput(format!(
            "momentum must lie in [0, 1], got {m}"
        )));
    }
    for (k, q) in key.entries.iter_mut().zip(&query.entries) {
        k.value.zip_mut_with(&q.value, |kv, &qv| *kv = m * *kv + (1.0 - m) * qv);
    }
    Ok(())
}
