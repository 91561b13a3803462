use crate::error::{Error, Result};

/// Feature vectors indexed by a finite `(state, action)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureTable {
    /// `data` is laid out as `[s][a][k]`.
    pub fn new(n_states: usize, n_actions: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || dim == 0 {
            return Err(Error::invalid("feature table needs positive state, action and feature counts"));
        }
        if data.len() != n_states * n_actions * dim {
            return Err(Error::DimensionMismatch { expected: n_states * n_actions * dim, got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature table".into()));
        }
        Ok(FeatureTable { n_states, n_actions, dim, data })
    }

    /// One indicator per `(s, a)`: the fully tabular parameterization.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let dim = n_states * n_actions;
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        FeatureTable { n_states, n_actions, dim, data }
    }

    /// Two actions, one logit per state: ξ(s, 1) = e_s and ξ(s, 0) = 0.
    pub fn binary_logits(n_states: usize) -> Self {
        let dim = n_states;
        let mut data = vec![0.0; n_states * 2 * dim];
        for s in 0..n_states {
            data[(s * 2 + 1) * dim + s] = 1.0;
        }
        FeatureTable { n_states, n_actions: 2, dim, data }
    }

    /// Scalar feature per `(s, a)`, laid out as `[s][a]`.
    pub fn scalar(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(n_states, n_actions, 1, values)
    }

    pub fn zeros(n_states: usize, n_actions: usize, dim: usize) -> Self {
        FeatureTable { n_states, n_actions, dim, data: vec![0.0; n_states * n_actions * dim] }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Applies the same relabeling of states and actions to the table.
    pub fn relabeled(&self, state_perm: &[usize], action_perm: &[usize]) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let dst = (state_perm[s] * self.n_actions + action_perm[a]) * self.dim;
                data[dst..dst + self.dim].copy_from_slice(self.get(s, a));
            }
        }
        FeatureTable { data, ..self.clone() }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
