//! Entropic multi-marginal solvers.
//!
//! Two routes reach the same regularized plan: dense alternating KL
//! projections on the full `M^N` array ([`bregman_solve`]) and the
//! scaling-vector recursion on the separable kernel ([`ipfp_solve`]). They
//! cycle over the marginals in the same order, so one sweep of either maps
//! identical states to identical plans.

mod bregman;
mod ipfp;
mod plan;
mod sparse;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::densities::DiscreteDensity;
use crate::error::{invalid, Error, Result};

pub use bregman::{bregman_solve, bregman_solve_from, gibbs_plan, kl_divergence, kl_project, BregmanOutcome};
pub use ipfp::{
    ipfp_solve, ipfp_solve_from, pair_projection, plan_from_scalings, sparse_plan_from_scalings,
    IpfpOutcome, ScalingState,
};
pub use plan::{entropic_cost, residuals, EntropicCost, MarginalResidual, PlanStorage, SparsePlan, TransportPlan};
pub use sparse::{sparse_ipfp_solve, SparseKernel, SparseOutcome};

/// Order in which a sweep visits the marginals: `1, 2, ..., N-1, 0`.
///
/// With the first scaling initialized to the marginal and the rest to one,
/// the two-marginal case is exactly the `b`-then-`a` recursion.
pub fn sweep_order(n: usize) -> Vec<usize> {
    (1..n).chain(std::iter::once(0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluationMode {
    /// Plain products with the Gibbs kernel.
    Linear,
    /// Log-sum-exp contractions with per-fiber max subtraction.
    Log,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub max_sweeps: usize,
    /// Absolute L∞ marginal violation at which iteration stops.
    pub tolerance: f64,
    pub mode: EvaluationMode,
    pub record_history: bool,
}

/// Default stopping tolerance relative to the largest marginal weight.
pub const DEFAULT_RELATIVE_TOLERANCE: f64 = 1e-10;

impl SolverConfig {
    /// Linear mode, 100 000 sweeps, tolerance `1e-10 * max(rho)`.
    pub fn for_density(epsilon: f64, rho: &DiscreteDensity) -> Self {
        Self {
            epsilon,
            max_sweeps: 100_000,
            tolerance: DEFAULT_RELATIVE_TOLERANCE * rho.max_weight(),
            mode: EvaluationMode::Linear,
            record_history: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_sweeps == 0 {
            return Err(invalid("max_sweeps must be at least 1"));
        }
        Ok(())
    }

    pub(crate) fn check_epsilon(&self, kernel_eps: f64) -> Result<()> {
        if (self.epsilon - kernel_eps).abs() > 1e-14 * kernel_eps {
            return Err(invalid(format!(
                "config epsilon {} differs from kernel epsilon {kernel_eps}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Prescribed marginal weights, one vector per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals(Vec<Vec<f64>>);

impl Marginals {
    pub fn new(weights: Vec<Vec<f64>>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(invalid("need at least two marginals"));
        }
        let m = weights[0].len();
        let mass: f64 = weights[0].iter().sum();
        for (k, w) in weights.iter().enumerate() {
            if w.len() != m {
                return Err(Error::Shape(format!(
                    "marginal {k} has {} entries, expected {m}",
                    w.len()
                )));
            }
            if let Some(i) = w.iter().position(|x| !(*x >= 0.0 && x.is_finite())) {
                return Err(invalid(format!("marginal {k} has invalid weight at index {i}")));
            }
            let s: f64 = w.iter().sum();
            if (s - mass).abs() > 1e-9 * mass.max(1.0) {
                return Err(invalid(format!(
                    "marginal {k} has mass {s}, marginal 0 has {mass}"
                )));
            }
        }
        if mass <= 0.0 {
            return Err(invalid("marginals have zero mass"));
        }
        Ok(Self(weights))
    }

    /// `n` copies of the same density (indistinguishable electrons).
    pub fn identical(rho: &DiscreteDensity, n: usize) -> Self {
        Self(vec![rho.weights().to_vec(); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, axis: usize) -> &[f64] {
        &self.0[axis]
    }

    pub fn size(&self) -> usize {
        self.0[0].len()
    }

    pub fn max_weight(&self) -> f64 {
        self.0.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.0.iter().map(|v| v.as_slice())
    }
}

/// One line of the convergence history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sweep: usize,
    pub residual_linf: f64,
    pub residual_l1: f64,
    /// `<c, gamma> + eps * sum gamma log gamma`.
    pub objective: f64,
}

/// Writes the history as JSON lines.
pub fn write_history_jsonl(history: &[SweepRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = std::io::BufWriter::new(file);
    for rec in history {
        let line = serde_json::to_string(rec).expect("plain record serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
