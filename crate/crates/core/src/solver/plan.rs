use ndarray::{ArrayD, Axis, Dimension, IxDyn};
use serde::Serialize;

use super::Marginals;
use crate::cost::CostTensor;
use crate::error::{invalid, Error, Result};

/// Coordinate list of nonzero plan entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePlan {
    shape: Vec<usize>,
    /// Flattened multi-indices, `shape.len()` per entry.
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparsePlan {
    pub fn new(shape: Vec<usize>, indices: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let n = shape.len();
        if n < 2 || indices.len() != n * weights.len() {
            return Err(Error::Shape(format!(
                "{} indices for {} entries of a {}-way plan",
                indices.len(),
                weights.len(),
                n
            )));
        }
        for (e, idx) in indices.chunks(n).enumerate() {
            if idx.iter().zip(&shape).any(|(i, m)| i >= m) {
                return Err(Error::Shape(format!("entry {e} index {idx:?} out of range")));
            }
        }
        if let Some(e) = weights.iter().position(|w| !(*w >= 0.0)) {
            return Err(invalid(format!("entry {e} has negative weight")));
        }
        Ok(Self {
            shape,
            indices,
            weights,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    pub fn index(&self, e: usize) -> &[usize] {
        let n = self.shape.len();
        &self.indices[e * n..(e + 1) * n]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Multiplies each entry by `factors[index along axis]`.
    pub fn scale_axis(&mut self, axis: usize, factors: &[f64]) {
        let n = self.shape.len();
        for (w, idx) in self.weights.iter_mut().zip(self.indices.chunks(n)) {
            *w *= factors[idx[axis]];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanStorage {
    Dense(ArrayD<f64>),
    Sparse(SparsePlan),
}

/// Discrete transport plan on `M_1 x ... x M_N` grid indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    storage: PlanStorage,
    epsilon: f64,
}

impl TransportPlan {
    pub fn dense(weights: ArrayD<f64>, epsilon: f64) -> Result<Self> {
        if weights.ndim() < 2 {
            return Err(Error::Shape("plans have at least two axes".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid("plan weights must be nonnegative"));
        }
        Ok(Self {
            storage: PlanStorage::Dense(weights),
            epsilon,
        })
    }

    pub fn sparse(plan: SparsePlan, epsilon: f64) -> Self {
        Self {
            storage: PlanStorage::Sparse(plan),
            epsilon,
        }
    }

    pub fn storage(&self) -> &PlanStorage {
        &self.storage
    }

    pub fn storage_mut(&mut self) -> &mut PlanStorage {
        &mut self.storage
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn shape(&self) -> Vec<usize> {
        match &self.storage {
            PlanStorage::Dense(a) => a.shape().to_vec(),
            PlanStorage::Sparse(s) => s.shape.clone(),
        }
    }

    pub fn n_marginals(&self) -> usize {
        self.shape().len()
    }

    pub fn as_dense(&self) -> Option<&ArrayD<f64>> {
        match &self.storage {
            PlanStorage::Dense(a) => Some(a),
            PlanStorage::Sparse(_) => None,
        }
    }

    pub fn as_sparse(&self) -> Option<&SparsePlan> {
        match &self.storage {
            PlanStorage::Dense(_) => None,
            PlanStorage::Sparse(s) => Some(s),
        }
    }

    pub fn to_dense(&self) -> ArrayD<f64> {
        match &self.storage {
            PlanStorage::Dense(a) => a.clone(),
            PlanStorage::Sparse(s) => {
                let mut a = ArrayD::zeros(IxDyn(&s.shape));
                for e in 0..s.nnz() {
                    a[IxDyn(s.index(e))] += s.weights[e];
                }
                a
            }
        }
    }

    /// Visits every stored entry (dense plans include zeros).
    pub fn for_each(&self, mut f: impl FnMut(&[usize], f64)) {
        match &self.storage {
            PlanStorage::Dense(a) => {
                for (idx, w) in a.indexed_iter() {
                    f(idx.slice(), *w);
                }
            }
            PlanStorage::Sparse(s) => {
                for e in 0..s.nnz() {
                    f(s.index(e), s.weights[e]);
                }
            }
        }
    }

    pub fn total_mass(&self) -> f64 {
        match &self.storage {
            PlanStorage::Dense(a) => a.iter().sum(),
            PlanStorage::Sparse(s) => s.weights.iter().sum(),
        }
    }

    /// Sum over all axes except `axis`.
    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        match &self.storage {
            PlanStorage::Dense(a) => a
                .axis_iter(Axis(axis))
                .map(|slice| slice.iter().sum())
                .collect(),
            PlanStorage::Sparse(s) => {
                let mut out = vec![0.0; s.shape[axis]];
                for e in 0..s.nnz() {
                    out[s.index(e)[axis]] += s.weights[e];
                }
                out
            }
        }
    }

    /// Multiplies all weights by `factor`.
    pub fn scale(&mut self, factor: f64) {
        match &mut self.storage {
            PlanStorage::Dense(a) => a.mapv_inplace(|w| w * factor),
            PlanStorage::Sparse(s) => s.weights.iter_mut().for_each(|w| *w *= factor),
        }
    }

    pub fn nnz(&self) -> usize {
        match &self.storage {
            PlanStorage::Dense(a) => a.iter().filter(|w| **w > 0.0).count(),
            PlanStorage::Sparse(s) => s.weights.iter().filter(|w| **w > 0.0).count(),
        }
    }
}

/// Per-marginal deviation of a plan from its prescribed marginals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalResidual {
    pub linf: Vec<f64>,
    pub l1: Vec<f64>,
}

impl MarginalResidual {
    pub fn from_marginals<'a>(
        actual: impl IntoIterator<Item = &'a [f64]>,
        target: &Marginals,
    ) -> Self {
        let mut linf = Vec::with_capacity(target.len());
        let mut l1 = Vec::with_capacity(target.len());
        for (m, rho) in actual.into_iter().zip(target.iter()) {
            let (mut a, mut b) = (0.0f64, 0.0);
            for (x, y) in m.iter().zip(rho) {
                let d = (x - y).abs();
                a = a.max(d);
                b += d;
            }
            linf.push(a);
            l1.push(b);
        }
        Self { linf, l1 }
    }

    pub fn max_linf(&self) -> f64 {
        self.linf.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_l1(&self) -> f64 {
        self.l1.iter().copied().fold(0.0, f64::max)
    }
}

/// Exact partial-sum deviations of `plan` from `marginals`.
pub fn residuals(plan: &TransportPlan, marginals: &Marginals) -> Result<MarginalResidual> {
    let shape = plan.shape();
    if shape.len() != marginals.len() {
        return Err(Error::Shape(format!(
            "{}-way plan against {} marginals",
            shape.len(),
            marginals.len()
        )));
    }
    for (k, (m, rho)) in shape.iter().zip(marginals.iter()).enumerate() {
        if *m != rho.len() {
            return Err(Error::Shape(format!(
                "axis {k} has {m} cells, marginal has {}",
                rho.len()
            )));
        }
    }
    let actual: Vec<Vec<f64>> = (0..shape.len()).map(|k| plan.marginal(k)).collect();
    Ok(MarginalResidual::from_marginals(
        actual.iter().map(|v| v.as_slice()),
        marginals,
    ))
}

/// Transport cost, entropy and regularized objective of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropicCost {
    pub transport_cost: f64,
    /// `sum gamma log gamma`.
    pub entropy: f64,
    pub objective: f64,
    /// Set when positive mass sits on an infinite-cost cell.
    pub infinite_cost_mass: bool,
}

/// `<c, gamma>` with `0 * inf = 0`, and `sum gamma log gamma` with
/// `0 log 0 = 0`.
pub fn entropic_cost(plan: &TransportPlan, cost: &dyn CostTensor) -> EntropicCost {
    let mut transport = 0.0;
    let mut entropy = 0.0;
    let mut infinite = false;
    plan.for_each(|idx, w| {
        if w > 0.0 {
            let c = cost.cost(idx);
            if c.is_infinite() {
                infinite = true;
            } else {
                transport += c * w;
            }
            entropy += w * w.ln();
        }
    });
    let transport_cost = if infinite { f64::INFINITY } else { transport };
    EntropicCost {
        transport_cost,
        entropy,
        objective: transport_cost + plan.epsilon() * entropy,
        infinite_cost_mass: infinite,
    }
}
