//! Dense alternating KL projections on the full `M^N` plan.
//!
//! Memory is `M^N`; this route is the reference for small instances.

use ndarray::{ArrayD, Axis, Dimension, IxDyn};

use super::plan::{residuals, MarginalResidual, PlanStorage, TransportPlan};
use super::{sweep_order, Marginals, SolverConfig, SweepRecord};
use crate::cost::GibbsKernel;
use crate::error::{Error, Result};

/// The unscaled Gibbs plan `exp(-c/eps)` as a dense array.
pub fn gibbs_plan(kernel: &GibbsKernel) -> TransportPlan {
    let shape = vec![kernel.size(); kernel.n_marginals()];
    let a = ArrayD::from_shape_fn(IxDyn(&shape), |idx| kernel.value(idx.slice()));
    TransportPlan::dense(a, kernel.epsilon()).expect("kernel entries are nonnegative")
}

fn project_dense(a: &mut ArrayD<f64>, rho: &[f64], axis: usize) -> Result<()> {
    for (j, mut slice) in a.axis_iter_mut(Axis(axis)).enumerate() {
        let s: f64 = slice.iter().sum();
        if rho[j] == 0.0 {
            slice.fill(0.0);
        } else if s > 0.0 {
            let f = rho[j] / s;
            slice.mapv_inplace(|w| w * f);
        } else {
            return Err(Error::Infeasible { axis, index: j });
        }
    }
    Ok(())
}

fn project_in_place(plan: &mut TransportPlan, rho: &[f64], axis: usize) -> Result<()> {
    let shape = plan.shape();
    if axis >= shape.len() || shape[axis] != rho.len() {
        return Err(Error::Shape(format!(
            "cannot project axis {axis} of a {shape:?} plan onto {} weights",
            rho.len()
        )));
    }
    let sums = plan.marginal(axis);
    if let Some(j) = (0..rho.len()).find(|&j| rho[j] > 0.0 && sums[j] <= 0.0) {
        return Err(Error::Infeasible { axis, index: j });
    }
    match plan.storage_mut() {
        PlanStorage::Dense(a) => project_dense(a, rho, axis)?,
        PlanStorage::Sparse(sp) => {
            let factors: Vec<f64> = rho
                .iter()
                .zip(&sums)
                .map(|(r, s)| if *r == 0.0 { 0.0 } else { r / s })
                .collect();
            sp.scale_axis(axis, &factors);
        }
    }
    Ok(())
}

/// KL projection onto `{ gamma : marginal(axis) = rho }`: every fiber is
/// rescaled by `rho_j / (partial sum)_j`.
pub fn kl_project(plan: &TransportPlan, rho: &[f64], axis: usize) -> Result<TransportPlan> {
    let mut out = plan.clone();
    project_in_place(&mut out, rho, axis)?;
    Ok(out)
}

/// Generalized KL divergence `sum p log(p/q) - p + q`.
pub fn kl_divergence(p: &TransportPlan, q: &TransportPlan) -> f64 {
    let (p, q) = (p.to_dense(), q.to_dense());
    assert_eq!(p.shape(), q.shape());
    p.iter()
        .zip(q.iter())
        .map(|(&a, &b)| {
            if a == 0.0 {
                b
            } else if b == 0.0 {
                f64::INFINITY
            } else {
                a * (a / b).ln() - a + b
            }
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct BregmanOutcome {
    pub plan: TransportPlan,
    pub residual: MarginalResidual,
    pub history: Vec<SweepRecord>,
    pub converged: bool,
    /// Completed cycles over all marginals.
    pub sweeps: usize,
}

/// Alternating projections starting from the Gibbs kernel.
pub fn bregman_solve(
    kernel: &GibbsKernel,
    marginals: &Marginals,
    config: &SolverConfig,
) -> Result<BregmanOutcome> {
    config.check_epsilon(kernel.epsilon())?;
    bregman_solve_from(gibbs_plan(kernel), kernel, marginals, config)
}

/// Alternating projections from an arbitrary initial plan; `kernel` only
/// supplies the cost for the recorded objective.
pub fn bregman_solve_from(
    initial: TransportPlan,
    kernel: &GibbsKernel,
    marginals: &Marginals,
    config: &SolverConfig,
) -> Result<BregmanOutcome> {
    config.validate()?;
    let n = marginals.len();
    if initial.n_marginals() != n {
        return Err(Error::Shape(format!(
            "{}-way plan with {n} marginals",
            initial.n_marginals()
        )));
    }
    let order = sweep_order(n);
    let mut plan = initial;
    let mut history = Vec::new();
    let mut residual = residuals(&plan, marginals)?;
    let mut sweeps = 0;
    while sweeps < config.max_sweeps {
        for &axis in &order {
            project_in_place(&mut plan, marginals.get(axis), axis)?;
        }
        sweeps += 1;
        residual = residuals(&plan, marginals)?;
        if config.record_history {
            let e = super::entropic_cost(&plan, kernel);
            history.push(SweepRecord {
                sweep: sweeps,
                residual_linf: residual.max_linf(),
                residual_l1: residual.max_l1(),
                objective: e.objective,
            });
        }
        if residual.max_linf() < config.tolerance {
            break;
        }
    }
    let converged = residual.max_linf() < config.tolerance;
    Ok(BregmanOutcome {
        plan,
        residual,
        history,
        converged,
        sweeps,
    })
}
