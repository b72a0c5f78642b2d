use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamSet};

/// Linear map from encoder features (F) into the shared embedding space (D).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionHead {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim }
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        p.push("weight", uniform(rng, self.in_dim, self.out_dim, bound), true);
        p.push("bias", Array2::zeros((1, self.out_dim)), false);
        p
    }

    /// Pre-normalisation projection.
    pub fn forward(&self, g: &mut Graph, p: &Bound, prefix: &str, features: Var) -> Var {
        let w = p.var(&format!("{prefix}weight"));
        let b = p.var(&format!("{prefix}bias"));
        g.linear(features, w, b)
    }

    /// Projects `features [B, F]` and L2-normalises every row.
    pub fn project_and_normalize(&self, params: &ParamSet, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.in_dim {
            return Err(Error::Shape(format!(
                "head expects {} features, got {}",
                self.in_dim,
                features.ncols()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite features".into()));
        }
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.leaf(features.clone());
        let y = self.forward(&mut g, &bound, "", x);
        let z = g.l2_normalize(y)?;
        Ok(g.value(z).clone())
    }
}
