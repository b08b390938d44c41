//! IPFP on a kernel restricted to a sparse support.
//!
//! The support is a coordinate list of multi-indices. Per-entry terms are
//! computed in parallel and scattered sequentially in entry order, so the
//! result does not depend on the thread count.

use log::warn;
use rayon::prelude::*;

use super::ipfp::ScalingState;
use super::plan::{MarginalResidual, SparsePlan, TransportPlan};
use super::{sweep_order, EvaluationMode, Marginals, SolverConfig, SweepRecord};
use crate::cost::GibbsKernel;
use crate::error::{Error, Result};

const CHUNK: usize = 4096;

/// `-c_I / eps` on a list of multi-indices.
#[derive(Debug, Clone)]
pub struct SparseKernel {
    shape: Vec<usize>,
    indices: Vec<usize>,
    log_values: Vec<f64>,
    epsilon: f64,
}

impl SparseKernel {
    /// Entries with infinite cost are dropped.
    pub fn new(
        shape: Vec<usize>,
        indices: Vec<usize>,
        costs: &[f64],
        epsilon: f64,
    ) -> Result<Self> {
        let n = shape.len();
        if n < 2 || indices.len() != n * costs.len() {
            return Err(Error::Shape(format!(
                "{} indices for {} entries of a {n}-way kernel",
                indices.len(),
                costs.len()
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
        }
        let mut kept_idx = Vec::with_capacity(indices.len());
        let mut log_values = Vec::with_capacity(costs.len());
        for (e, &c) in costs.iter().enumerate() {
            let idx = &indices[e * n..(e + 1) * n];
            if idx.iter().zip(&shape).any(|(i, m)| i >= m) {
                return Err(Error::Shape(format!("entry {e} index {idx:?} out of range")));
            }
            if c.is_nan() {
                return Err(Error::InvalidParameter(format!("entry {e} has NaN cost")));
            }
            if c.is_finite() {
                kept_idx.extend_from_slice(idx);
                log_values.push(-c / epsilon);
            }
        }
        Ok(Self {
            shape,
            indices: kept_idx,
            log_values,
            epsilon,
        })
    }

    /// Restriction of a full kernel to the given multi-indices.
    pub fn from_kernel(kernel: &GibbsKernel, indices: Vec<usize>) -> Result<Self> {
        let n = kernel.n_marginals();
        if indices.len() % n != 0 {
            return Err(Error::Shape("index list length is not a multiple of N".into()));
        }
        let m = kernel.size();
        if indices.iter().any(|&i| i >= m) {
            return Err(Error::Shape("support index out of range".into()));
        }
        let costs: Vec<f64> = indices.par_chunks(n).map(|idx| kernel.cost(idx)).collect();
        Self::new(vec![m; n], indices, &costs, kernel.epsilon())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn n_marginals(&self) -> usize {
        self.shape.len()
    }

    pub fn nnz(&self) -> usize {
        self.log_values.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn index(&self, e: usize) -> &[usize] {
        let n = self.shape.len();
        &self.indices[e * n..(e + 1) * n]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    /// Log of each plan entry `log K_e + sum_k log a_k`, optionally skipping one axis.
    fn log_terms(&self, b: &[Vec<f64>], skip: Option<usize>) -> Vec<f64> {
        let n = self.shape.len();
        let mut out = vec![0.0; self.nnz()];
        out.par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| {
                for (o, t) in chunk.iter_mut().enumerate() {
                    let e = c * CHUNK + o;
                    let idx = &self.indices[e * n..(e + 1) * n];
                    let mut v = self.log_values[e];
                    for (k, &i) in idx.iter().enumerate() {
                        if Some(k) != skip {
                            v += b[k][i];
                        }
                    }
                    *t = v;
                }
            });
        out
    }

    fn lin_terms(&self, a: &[Vec<f64>], skip: Option<usize>) -> Vec<f64> {
        let n = self.shape.len();
        let mut out = vec![0.0; self.nnz()];
        out.par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| {
                for (o, t) in chunk.iter_mut().enumerate() {
                    let e = c * CHUNK + o;
                    let idx = &self.indices[e * n..(e + 1) * n];
                    let mut v = self.log_values[e].exp();
                    for (k, &i) in idx.iter().enumerate() {
                        if Some(k) != skip {
                            v *= a[k][i];
                        }
                    }
                    *t = v;
                }
            });
        out
    }

    /// Contraction onto `axis` in the given mode (log values in log mode).
    fn contract(&self, axis: usize, state: &[Vec<f64>], mode: EvaluationMode) -> Vec<f64> {
        let n = self.shape.len();
        let m = self.shape[axis];
        match mode {
            EvaluationMode::Linear => {
                let terms = self.lin_terms(state, Some(axis));
                let mut s = vec![0.0; m];
                for (e, t) in terms.iter().enumerate() {
                    s[self.indices[e * n + axis]] += t;
                }
                s
            }
            EvaluationMode::Log => {
                let terms = self.log_terms(state, Some(axis));
                let mut max = vec![f64::NEG_INFINITY; m];
                for (e, &t) in terms.iter().enumerate() {
                    let x = self.indices[e * n + axis];
                    if t > max[x] {
                        max[x] = t;
                    }
                }
                let mut s = vec![0.0; m];
                for (e, &t) in terms.iter().enumerate() {
                    let x = self.indices[e * n + axis];
                    if max[x] > f64::NEG_INFINITY {
                        s[x] += (t - max[x]).exp();
                    }
                }
                s.iter()
                    .zip(&max)
                    .map(|(v, mx)| if *mx == f64::NEG_INFINITY { *mx } else { mx + v.ln() })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SparseOutcome {
    pub state: ScalingState,
    pub residual: MarginalResidual,
    pub history: Vec<SweepRecord>,
    pub converged: bool,
    pub sweeps: usize,
    pub restarted_in_log_domain: bool,
}

impl SparseOutcome {
    /// The plan on the kernel support.
    pub fn plan(&self, kernel: &SparseKernel) -> TransportPlan {
        let b: Vec<Vec<f64>> = (0..self.state.n_marginals())
            .map(|k| self.state.log_vector(k))
            .collect();
        let weights: Vec<f64> = kernel
            .log_terms(&b, None)
            .into_iter()
            .map(|t| if t == f64::NEG_INFINITY { 0.0 } else { t.exp() })
            .collect();
        let sp = SparsePlan::new(kernel.shape.clone(), kernel.indices.clone(), weights)
            .expect("kernel indices are in range");
        TransportPlan::sparse(sp, kernel.epsilon)
    }
}

/// Sparse IPFP; `initial` defaults to `a_0 = rho`, others one.
pub fn sparse_ipfp_solve(
    kernel: &SparseKernel,
    marginals: &Marginals,
    config: &SolverConfig,
    initial: Option<ScalingState>,
) -> Result<SparseOutcome> {
    config.validate()?;
    let n = kernel.n_marginals();
    if marginals.len() != n || kernel.shape.iter().any(|&m| m != marginals.size()) {
        return Err(Error::Shape("sparse kernel and marginals disagree".into()));
    }
    let initial = initial.unwrap_or_else(|| ScalingState::initial(marginals, config.mode));
    if initial.n_marginals() != n || initial.size() != marginals.size() {
        return Err(Error::Shape("initial state does not match the kernel".into()));
    }
    // Every positive-weight point needs at least one support entry.
    for axis in 0..n {
        let mut hit = vec![false; marginals.size()];
        for e in 0..kernel.nnz() {
            hit[kernel.index(e)[axis]] = true;
        }
        if let Some(x) = (0..marginals.size()).find(|&x| marginals.get(axis)[x] > 0.0 && !hit[x]) {
            return Err(Error::Infeasible { axis, index: x });
        }
    }
    let start = initial.clone().into_mode(config.mode);
    match run(kernel, marginals, config, start, config.mode)? {
        Some(out) => Ok(out),
        None => {
            warn!("sparse linear-domain IPFP broke down; restarting in log domain");
            let start = initial.into_mode(EvaluationMode::Log);
            let mut out = run(kernel, marginals, config, start, EvaluationMode::Log)?
                .expect("log mode never breaks down");
            out.restarted_in_log_domain = true;
            Ok(out)
        }
    }
}

fn run(
    kernel: &SparseKernel,
    marginals: &Marginals,
    config: &SolverConfig,
    state: ScalingState,
    mode: EvaluationMode,
) -> Result<Option<SparseOutcome>> {
    let n = kernel.n_marginals();
    let m = marginals.size();
    let order = sweep_order(n);
    let sweep_base = state.sweep_count();
    let mut vectors = state.vectors().to_vec();
    let mut history = Vec::new();
    let mut residual = MarginalResidual {
        linf: vec![f64::INFINITY; n],
        l1: vec![f64::INFINITY; n],
    };
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < config.max_sweeps {
        let mut last_s = Vec::new();
        for &axis in &order {
            let s = kernel.contract(axis, &vectors, mode);
            let rho = marginals.get(axis);
            for x in 0..m {
                let v = match mode {
                    EvaluationMode::Linear => {
                        if rho[x] == 0.0 {
                            0.0
                        } else {
                            let a = rho[x] / s[x];
                            if !(s[x] > 0.0) || !a.is_finite() || a == 0.0 {
                                return Ok(None);
                            }
                            a
                        }
                    }
                    EvaluationMode::Log => {
                        if rho[x] == 0.0 {
                            f64::NEG_INFINITY
                        } else if s[x] == f64::NEG_INFINITY {
                            return Err(Error::Infeasible { axis, index: x });
                        } else {
                            rho[x].ln() - s[x]
                        }
                    }
                };
                vectors[axis][x] = v;
            }
            last_s = s;
        }
        sweeps += 1;
        let last = *order.last().unwrap();
        let margs: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                let s = if k == last {
                    last_s.clone()
                } else {
                    kernel.contract(k, &vectors, mode)
                };
                vectors[k]
                    .iter()
                    .zip(&s)
                    .map(|(a, s)| match mode {
                        EvaluationMode::Linear => {
                            if *a == 0.0 {
                                0.0
                            } else {
                                a * s
                            }
                        }
                        EvaluationMode::Log => {
                            if *a == f64::NEG_INFINITY {
                                0.0
                            } else {
                                (a + s).exp()
                            }
                        }
                    })
                    .collect()
            })
            .collect();
        residual = MarginalResidual::from_marginals(margs.iter().map(|v| v.as_slice()), marginals);
        if mode == EvaluationMode::Linear && !residual.max_linf().is_finite() {
            return Ok(None);
        }
        if config.record_history {
            let mut objective = 0.0;
            for (k, mk) in margs.iter().enumerate() {
                for (a, w) in vectors[k].iter().zip(mk) {
                    if *w > 0.0 {
                        let la = match mode {
                            EvaluationMode::Linear => a.ln(),
                            EvaluationMode::Log => *a,
                        };
                        objective += kernel.epsilon * la * w;
                    }
                }
            }
            history.push(SweepRecord {
                sweep: sweeps,
                residual_linf: residual.max_linf(),
                residual_l1: residual.max_l1(),
                objective,
            });
        }
        if residual.max_linf() < config.tolerance {
            converged = true;
            break;
        }
    }
    let mut state = ScalingState::from_vectors(vectors, mode)?;
    state.set_sweep_count(sweep_base + sweeps);
    Ok(Some(SparseOutcome {
        state,
        residual,
        history,
        converged,
        sweeps,
        restarted_in_log_domain: false,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{build_kernel, CoulombCostSpec};
    use crate::densities::make_uniform_interval;
    use crate::solver::{ipfp_solve, plan_from_scalings};

    fn cfg(eps: f64, mode: EvaluationMode) -> SolverConfig {
        SolverConfig {
            epsilon: eps,
            max_sweeps: 5000,
            tolerance: 1e-12,
            mode,
            record_history: false,
        }
    }

    fn full_support(n: usize, m: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for flat in 0..m.pow(n as u32) {
            let mut r = flat;
            let mut idx = vec![0; n];
            for k in (0..n).rev() {
                idx[k] = r % m;
                r /= m;
            }
            out.extend(idx);
        }
        out
    }

    #[test]
    fn full_support_matches_dense_ipfp() {
        let rho = make_uniform_interval(0.0, 1.0, 9).unwrap();
        let marg = Marginals::identical(&rho, 3);
        let k = build_kernel(CoulombCostSpec::full_1d(3).unwrap(), rho.grid(), 0.25).unwrap();
        let dense = ipfp_solve(&k, &marg, &cfg(0.25, EvaluationMode::Linear)).unwrap();
        assert!(dense.converged, "{:?}", dense.residual);
        let sk = SparseKernel::from_kernel(&k, full_support(3, 9)).unwrap();
        for mode in [EvaluationMode::Linear, EvaluationMode::Log] {
            let sp = sparse_ipfp_solve(&sk, &marg, &cfg(0.25, mode), None).unwrap();
            assert!(sp.converged, "{mode:?} {} {:?}", sp.sweeps, sp.residual);
            let p = sp.plan(&sk).to_dense();
            let q = plan_from_scalings(&k, &dense.state).to_dense();
            for (a, b) in p.iter().zip(q.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn diagonal_entries_are_dropped() {
        let rho = make_uniform_interval(0.0, 1.0, 4).unwrap();
        let k = build_kernel(CoulombCostSpec::full_1d(2).unwrap(), rho.grid(), 0.5).unwrap();
        let sk = SparseKernel::from_kernel(&k, full_support(2, 4)).unwrap();
        assert_eq!(sk.nnz(), 12);
    }

    #[test]
    fn uncovered_point_is_infeasible() {
        let rho = make_uniform_interval(0.0, 1.0, 3).unwrap();
        let marg = Marginals::identical(&rho, 2);
        let sk = SparseKernel::new(vec![3, 3], vec![0, 1, 1, 0], &[1.0, 1.0], 0.5).unwrap();
        assert!(matches!(
            sparse_ipfp_solve(&sk, &marg, &cfg(0.5, EvaluationMode::Log), None),
            Err(Error::Infeasible { axis: 0, index: 2 })
        ));
    }

    #[test]
    fn same_result_on_one_thread() {
        let rho = make_uniform_interval(0.0, 1.0, 30).unwrap();
        let marg = Marginals::identical(&rho, 2);
        let k = build_kernel(CoulombCostSpec::full_1d(2).unwrap(), rho.grid(), 0.05).unwrap();
        let sk = SparseKernel::from_kernel(&k, full_support(2, 30)).unwrap();
        let c = cfg(0.05, EvaluationMode::Log);
        let many = sparse_ipfp_solve(&sk, &marg, &c, None).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let one = pool.install(|| sparse_ipfp_solve(&sk, &marg, &c, None).unwrap());
        assert_eq!(many.state.vectors(), one.state.vectors());
    }
}
