//! Coarse-to-fine sparse refinement.
//!
//! Each level thresholds the converged plan, refines the grid inside the
//! retained cells so that the number of active cells stays roughly
//! constant, interpolates the plan, drops small entries and re-solves on the
//! surviving cells only.

use std::collections::HashMap;

use log::{info, warn};
use petgraph::algo::{dinics, tarjan_scc};
use petgraph::graph::{DiGraph, NodeIndex};
use serde::Serialize;

use crate::cost::{build_kernel, CoulombCostSpec};
use crate::densities::{DiscreteDensity, Grid1D, Quantile};
use crate::error::{invalid, Error, Result};
use crate::solver::{
    entropic_cost, ipfp_solve, plan_from_scalings, sparse_ipfp_solve, EvaluationMode, Marginals, ScalingState,
    SolverConfig, SparseKernel, SparsePlan, SweepRecord, TransportPlan,
};

#[derive(Debug, Clone, Serialize)]
pub struct RefinementConfig {
    /// Threshold factor in `(0, 1)`.
    pub xi: f64,
    /// Number of solves, the coarse one included.
    pub levels: usize,
    /// Stop before a level whose active-cell count would exceed this.
    pub target_active_cells: Option<usize>,
    /// Per-level epsilon; the solver's epsilon is used for every level when absent.
    pub epsilon_ladder: Option<Vec<f64>>,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            xi: 0.9,
            levels: 3,
            target_active_cells: None,
            epsilon_ladder: None,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(invalid(format!("xi must lie in (0, 1), got {}", self.xi)));
        }
        if self.levels == 0 {
            return Err(invalid("levels must be at least 1"));
        }
        if let Some(l) = &self.epsilon_ladder {
            if l.len() < self.levels || l.iter().any(|e| !(*e > 0.0)) {
                return Err(invalid("epsilon ladder needs one positive value per level"));
            }
        }
        Ok(())
    }
}

/// Cells retained by the threshold, as flat multi-indices in increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportMask {
    pub n: usize,
    pub points_per_axis: usize,
    pub indices: Vec<usize>,
}

impl SupportMask {
    pub fn len(&self) -> usize {
        self.indices.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn index(&self, e: usize) -> &[usize] {
        &self.indices[e * self.n..(e + 1) * self.n]
    }
}

/// `m` = smallest fiber maximum over all axes (fibers with no mass are
/// skipped); the mask keeps entries `>= xi * m`.
pub fn threshold_support(plan: &TransportPlan, xi: f64) -> Result<(SupportMask, f64)> {
    if !(xi > 0.0 && xi < 1.0) {
        return Err(invalid(format!("xi must lie in (0, 1), got {xi}")));
    }
    let shape = plan.shape();
    let n = shape.len();
    let mut maxima: Vec<Vec<f64>> = shape.iter().map(|&m| vec![0.0; m]).collect();
    plan.for_each(|idx, w| {
        for (k, &i) in idx.iter().enumerate() {
            if w > maxima[k][i] {
                maxima[k][i] = w;
            }
        }
    });
    let m = maxima
        .iter()
        .flatten()
        .copied()
        .filter(|v| *v > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !m.is_finite() {
        return Err(Error::Refinement("plan has no positive entry".into()));
    }
    let mut entries: Vec<Vec<usize>> = Vec::new();
    plan.for_each(|idx, w| {
        if w >= xi * m {
            entries.push(idx.to_vec());
        }
    });
    entries.sort();
    Ok((
        SupportMask {
            n,
            points_per_axis: shape[0],
            indices: entries.into_iter().flatten().collect(),
        },
        m,
    ))
}

fn round_even(x: f64) -> usize {
    let k = (x / 2.0).round() as usize;
    (2 * k).max(2)
}

/// A plan on a uniform cell-centred grid, stored sparsely.
#[derive(Debug, Clone)]
pub struct LevelPlan {
    pub grid: Grid1D,
    pub n: usize,
    pub indices: Vec<usize>,
    /// Masses summing to the total mass.
    pub weights: Vec<f64>,
}

impl LevelPlan {
    pub fn from_plan(plan: &TransportPlan, grid: Grid1D) -> Self {
        let n = plan.n_marginals();
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        plan.for_each(|idx, w| {
            if w > 0.0 {
                indices.extend_from_slice(idx);
                weights.push(w);
            }
        });
        Self {
            grid,
            n,
            indices,
            weights,
        }
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    pub fn to_transport_plan(&self, epsilon: f64) -> Result<TransportPlan> {
        let sp = SparsePlan::new(vec![self.grid.len(); self.n], self.indices.clone(), self.weights.clone())?;
        Ok(TransportPlan::sparse(sp, epsilon))
    }
}

fn uniform_spacing(grid: &Grid1D) -> Result<f64> {
    let h = (grid.hi() - grid.lo()) / grid.len() as f64;
    if grid.cell_weights().iter().any(|w| (w - h).abs() > 1e-9 * h) {
        return Err(invalid("refinement needs a uniform grid"));
    }
    Ok(h)
}

fn flat(idx: &[usize], m: usize) -> u64 {
    idx.iter().fold(0u64, |acc, &i| acc * m as u64 + i as u64)
}

/// Result of one refinement step before solving.
#[derive(Debug, Clone)]
pub struct RefinedSupport {
    pub plan: LevelPlan,
    /// Fine cells kept only because they hold a fiber maximum.
    pub rescued: usize,
    pub refinement_ratio: f64,
}

/// Refines the grid inside the mask, interpolates plan densities
/// multilinearly, drops values below `xi * m` (keeping each fiber's
/// maximum so no fiber is empty) and renormalizes.
///
/// `active_cells` is the cell count the coarse plan was solved on; the
/// per-axis resolution grows by `1 / sqrt(|T| / active_cells)`.
pub fn plan_refine_step(
    coarse: &LevelPlan,
    mask: &SupportMask,
    m: f64,
    xi: f64,
    active_cells: usize,
    total_mass: f64,
) -> Result<RefinedSupport> {
    let n = coarse.n;
    let mc = coarse.grid.len();
    let h = uniform_spacing(&coarse.grid)?;
    if mask.is_empty() {
        return Err(Error::Refinement("empty support mask".into()));
    }
    let r = mask.len() as f64 / active_cells as f64;
    let mf = round_even(mc as f64 / r.sqrt()).max(mc);
    let fine = Grid1D::uniform(coarse.grid.lo(), coarse.grid.hi(), mf)?;
    let hf = (fine.hi() - fine.lo()) / mf as f64;
    let hn = h.powi(n as i32);

    let mut density: HashMap<u64, f64> = HashMap::with_capacity(coarse.nnz());
    for e in 0..coarse.nnz() {
        let idx = &coarse.indices[e * n..(e + 1) * n];
        density.insert(flat(idx, mc), coarse.weights[e] / hn);
    }

    // Coarse parent of each fine cell centre, in exact integer arithmetic.
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); mc];
    for j in 0..mf {
        let parent = ((2 * j + 1) * mc) / (2 * mf);
        children[parent.min(mc - 1)].push(j);
    }
    // Neighbouring coarse centres and weight for each fine centre.
    let stencil: Vec<(usize, usize, f64)> = (0..mf)
        .map(|j| {
            let s = (2 * j + 1) as f64 * mc as f64 / (2 * mf) as f64 - 0.5;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else if s >= (mc - 1) as f64 {
                (mc - 1, mc - 1, 0.0)
            } else {
                let c = s.floor() as usize;
                (c, c + 1, s - c as f64)
            }
        })
        .collect();

    let threshold = xi * m / hn;
    let mut cand_idx: Vec<usize> = Vec::new();
    let mut cand_val: Vec<f64> = Vec::new();
    let mut fine_idx = vec![0usize; n];
    let mut corner = vec![0usize; n];
    for e in 0..mask.len() {
        let cidx = mask.index(e);
        let lists: Vec<&Vec<usize>> = cidx.iter().map(|&i| &children[i]).collect();
        if lists.iter().any(|l| l.is_empty()) {
            continue;
        }
        let mut pos = vec![0usize; n];
        'cells: loop {
            for k in 0..n {
                fine_idx[k] = lists[k][pos[k]];
            }
            let mut value = 0.0;
            for bits in 0..(1usize << n) {
                let mut wgt = 1.0;
                for k in 0..n {
                    let (c0, c1, t) = stencil[fine_idx[k]];
                    if bits >> k & 1 == 1 {
                        corner[k] = c1;
                        wgt *= t;
                    } else {
                        corner[k] = c0;
                        wgt *= 1.0 - t;
                    }
                }
                if wgt > 0.0 {
                    if let Some(d) = density.get(&flat(&corner, mc)) {
                        value += wgt * d;
                    }
                }
            }
            cand_idx.extend_from_slice(&fine_idx);
            cand_val.push(value);
            let mut k = n;
            loop {
                if k == 0 {
                    break 'cells;
                }
                k -= 1;
                pos[k] += 1;
                if pos[k] < lists[k].len() {
                    break;
                }
                pos[k] = 0;
            }
        }
    }

    let count = cand_val.len();
    let mut keep: Vec<bool> = cand_val.iter().map(|v| *v >= threshold).collect();
    let mut rescued = 0;
    for k in 0..n {
        let mut best: Vec<Option<usize>> = vec![None; mf];
        for e in 0..count {
            let i = cand_idx[e * n + k];
            match best[i] {
                Some(b) if cand_val[b] >= cand_val[e] => {}
                _ => best[i] = Some(e),
            }
        }
        for e in best.into_iter().flatten() {
            if !keep[e] {
                keep[e] = true;
                rescued += 1;
            }
        }
    }
    let hfn = hf.powi(n as i32);
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    for e in 0..count {
        if keep[e] {
            indices.extend_from_slice(&cand_idx[e * n..(e + 1) * n]);
            weights.push(cand_val[e] * hfn);
        }
    }
    let mass: f64 = weights.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::Refinement("interpolated plan has no mass".into()));
    }
    let scale = total_mass / mass;
    for w in weights.iter_mut() {
        *w *= scale;
    }
    Ok(RefinedSupport {
        plan: LevelPlan {
            grid: fine,
            n,
            indices,
            weights,
        },
        rescued,
        refinement_ratio: r,
    })
}

/// Drops the cells of a two-marginal support that carry no mass in any plan
/// with the given (identical) marginals. Such cells make IPFP converge only
/// sublinearly while it drives them to zero; removing them leaves the
/// restricted problem unchanged. Returns the number of cells removed, or
/// `None` when the support admits no plan at all.
pub fn prune_to_total_support(plan: &mut LevelPlan, weights: &[f64]) -> Option<usize> {
    if plan.n != 2 {
        return Some(0);
    }
    let m = weights.len();
    // Integer capacities keep exact ties (equal-mass blocks) exactly tight.
    let total: f64 = weights.iter().sum();
    let scale = (1u64 << 40) as f64 / total;
    let cap: Vec<u64> = weights.iter().map(|w| (w * scale).round() as u64).collect();
    let demand: u64 = cap.iter().sum();

    let mut g: DiGraph<(), u64> = DiGraph::with_capacity(2 * m + 2, plan.nnz() + 2 * m);
    let rows: Vec<NodeIndex> = (0..m).map(|_| g.add_node(())).collect();
    let cols: Vec<NodeIndex> = (0..m).map(|_| g.add_node(())).collect();
    let source = g.add_node(());
    let sink = g.add_node(());
    for i in 0..m {
        g.add_edge(source, rows[i], cap[i]);
        g.add_edge(cols[i], sink, cap[i]);
    }
    let first_cell = g.edge_count();
    for e in 0..plan.nnz() {
        g.add_edge(rows[plan.indices[2 * e]], cols[plan.indices[2 * e + 1]], demand);
    }
    let (value, flows) = dinics(&g, source, sink);
    if value < demand {
        return None;
    }

    // Residual graph: every cell row -> col, cells with flow also col -> row.
    let mut residual: DiGraph<(), ()> = DiGraph::with_capacity(2 * m, 2 * plan.nnz());
    for _ in 0..2 * m {
        residual.add_node(());
    }
    for e in 0..plan.nnz() {
        let (i, j) = (plan.indices[2 * e], plan.indices[2 * e + 1]);
        residual.add_edge(NodeIndex::new(i), NodeIndex::new(m + j), ());
        if flows[first_cell + e] > 0 {
            residual.add_edge(NodeIndex::new(m + j), NodeIndex::new(i), ());
        }
    }
    let mut component = vec![0usize; 2 * m];
    for (c, scc) in tarjan_scc(&residual).into_iter().enumerate() {
        for v in scc {
            component[v.index()] = c;
        }
    }

    let before = plan.nnz();
    let mut indices = Vec::with_capacity(plan.indices.len());
    let mut kept = Vec::with_capacity(before);
    for e in 0..before {
        let (i, j) = (plan.indices[2 * e], plan.indices[2 * e + 1]);
        if flows[first_cell + e] > 0 || component[i] == component[m + j] {
            indices.extend_from_slice(&[i, j]);
            kept.push(plan.weights[e]);
        }
    }
    let mass_before: f64 = plan.weights.iter().sum();
    let mass_after: f64 = kept.iter().sum();
    if mass_after > 0.0 {
        let s = mass_before / mass_after;
        kept.iter_mut().for_each(|w| *w *= s);
    }
    plan.indices = indices;
    plan.weights = kept;
    Some(before - plan.nnz())
}

/// Cell masses of a density on another grid covering the same interval.
pub fn resample_density(quantile: &Quantile, grid: &Grid1D) -> Result<DiscreteDensity> {
    let edges = grid.edges();
    let weights: Vec<f64> = edges
        .windows(2)
        .map(|w| (quantile.cdf(w[1]) - quantile.cdf(w[0])).max(0.0))
        .collect();
    DiscreteDensity::from_weights(grid.clone(), weights, quantile.total_mass())
}

/// Linear interpolation through sorted points, constant beyond the ends.
fn interpolate_sorted(pts: &[(f64, f64)], x: f64) -> f64 {
    if pts.is_empty() {
        return 0.0;
    }
    let k = pts.partition_point(|p| p.0 < x);
    if k == 0 {
        return pts[0].1;
    }
    if k == pts.len() {
        return pts[k - 1].1;
    }
    let (x0, y0) = pts[k - 1];
    let (x1, y1) = pts[k];
    y0 + (x - x0) / (x1 - x0) * (y1 - y0)
}

/// Scalings on `fine` from interpolated potentials `log(a / h)`.
pub fn interpolate_scalings(
    state: &ScalingState,
    coarse: &Grid1D,
    fine: &Grid1D,
    mode: EvaluationMode,
) -> Result<ScalingState> {
    let vectors: Vec<Vec<f64>> = (0..state.n_marginals())
        .map(|k| {
            let la = state.log_vector(k);
            let u: Vec<f64> = la.iter().zip(coarse.cell_weights()).map(|(a, w)| a - w.ln()).collect();
            let pts: Vec<(f64, f64)> = coarse
                .points()
                .iter()
                .copied()
                .zip(u)
                .filter(|(_, y)| y.is_finite())
                .collect();
            fine.points()
                .iter()
                .zip(fine.cell_weights())
                .map(|(&x, w)| interpolate_sorted(&pts, x) + w.ln())
                .collect()
        })
        .collect();
    Ok(ScalingState::from_vectors(vectors, EvaluationMode::Log)?.into_mode(mode))
}

/// Per-level statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelReport {
    pub level: usize,
    pub grid_points_per_axis: usize,
    pub active_cells: usize,
    /// Threshold base `m` of the plan this level was refined from (`None` at level 0).
    pub m: Option<f64>,
    pub xi: f64,
    pub epsilon: f64,
    pub sweeps: usize,
    pub residual: f64,
    pub objective: f64,
    pub converged: bool,
    pub rescued_cells: usize,
    /// Factor actually applied to `m` when filtering interpolated cells.
    pub filter: f64,
}

/// Solution at one level.
#[derive(Debug, Clone)]
pub struct LevelResult {
    pub density: DiscreteDensity,
    pub state: ScalingState,
    pub plan: TransportPlan,
    pub epsilon: f64,
    pub report: LevelReport,
    pub history: Vec<SweepRecord>,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    /// Converged levels, coarsest first. Level 0 is always present and is
    /// the only entry when it failed to converge.
    pub levels: Vec<LevelResult>,
    /// Why the loop ended early, if it did.
    pub stopped: Option<String>,
}

impl RefineOutcome {
    pub fn finest(&self) -> &LevelResult {
        self.levels.last().expect("level 0 is always present")
    }

    pub fn reports(&self) -> Vec<LevelReport> {
        self.levels.iter().map(|l| l.report.clone()).collect()
    }
}

/// Solve, threshold, refine and re-solve for `config.levels` solves in total.
///
/// Level 0 is a plain dense-kernel IPFP. Later levels run sparse IPFP on the
/// filtered fine cells, warm-started from interpolated potentials. A level
/// that fails to converge ends the loop; the result holds the levels before it.
pub fn refine_solve(
    density: &DiscreteDensity,
    spec: CoulombCostSpec,
    solver: &SolverConfig,
    config: &RefinementConfig,
) -> Result<RefineOutcome> {
    config.validate()?;
    solver.validate()?;
    uniform_spacing(density.grid())?;
    let n = spec.n_marginals;
    let eps_at = |level: usize| {
        config
            .epsilon_ladder
            .as_ref()
            .map(|l| l[level])
            .unwrap_or(solver.epsilon)
    };
    let relative_tol = solver.tolerance / density.max_weight();

    let eps0 = eps_at(0);
    let kernel = build_kernel(spec, density.grid(), eps0)?;
    let mut cfg = solver.clone();
    cfg.epsilon = eps0;
    let out = ipfp_solve(&kernel, &Marginals::identical(density, n), &cfg)?;
    let plan = plan_from_scalings(&kernel, &out.state);
    let active0 = {
        let mut c = 0;
        plan.for_each(|idx, _| {
            if kernel.cost(idx).is_finite() {
                c += 1;
            }
        });
        c
    };
    let report = LevelReport {
        level: 0,
        grid_points_per_axis: density.len(),
        active_cells: active0,
        m: None,
        xi: config.xi,
        epsilon: eps0,
        sweeps: out.sweeps,
        residual: out.residual.max_linf(),
        objective: entropic_cost(&plan, &kernel).objective,
        converged: out.converged,
        rescued_cells: 0,
        filter: config.xi,
    };
    info!("refine level 0: {report:?}");
    let level0_converged = out.converged;
    let mut levels = vec![LevelResult {
        density: density.clone(),
        state: out.state,
        plan,
        epsilon: eps0,
        report,
        history: out.history,
    }];
    if !level0_converged {
        return Ok(RefineOutcome {
            levels,
            stopped: Some(format!("level 0 did not converge in {} sweeps", solver.max_sweeps)),
        });
    }
    let quantile = density.quantile();
    let mut stopped = None;

    for level in 1..config.levels {
        let prev = levels.last().unwrap();
        let (mask, m) = threshold_support(&prev.plan, config.xi)?;
        let coarse = LevelPlan::from_plan(&prev.plan, prev.density.grid().clone());
        // Relax the filter until the support carries a plan with the target
        // marginals; a factor of zero keeps every child of T.
        let mut filter = config.xi;
        let (step, fine_density) = loop {
            let mut step = plan_refine_step(
                &coarse,
                &mask,
                m,
                filter,
                prev.report.active_cells,
                density.total_mass(),
            )?;
            let fine_density = resample_density(&quantile, &step.plan.grid)?;
            match prune_to_total_support(&mut step.plan, fine_density.weights()) {
                Some(k) => {
                    if k > 0 {
                        info!("level {level}: pruned {k} cells outside every feasible plan");
                    }
                    break (Some(step), fine_density);
                }
                None if filter > 0.0 => {
                    filter = if filter < config.xi / 64.0 { 0.0 } else { filter / 2.0 };
                    info!("level {level}: filtered support admits no plan, filter factor now {filter}");
                }
                None => break (None, fine_density),
            }
        };
        let Some(step) = step else {
            warn!("level {level}: refined support admits no plan with the target marginals");
            stopped = Some(format!("level {level}: refined support admits no plan with the target marginals"));
            break;
        };
        let fine_grid = step.plan.grid.clone();
        if let Some(cap) = config.target_active_cells {
            if step.plan.nnz() > cap {
                stopped = Some(format!(
                    "level {level} would hold {} active cells, above the cap of {cap}",
                    step.plan.nnz()
                ));
                break;
            }
        }
        let eps = eps_at(level);
        let costs: Vec<f64> = step
            .plan
            .indices
            .chunks(n)
            .map(|idx| {
                let coords: Vec<f64> = idx.iter().map(|&i| fine_grid.points()[i]).collect();
                spec.evaluate(&coords)
            })
            .collect::<Result<_>>()?;
        let skernel = SparseKernel::new(vec![fine_grid.len(); n], step.plan.indices.clone(), &costs, eps)?;
        let start = interpolate_scalings(&prev.state, prev.density.grid(), &fine_grid, solver.mode)?;
        let mut cfg = solver.clone();
        cfg.epsilon = eps;
        cfg.tolerance = relative_tol * fine_density.max_weight();
        let marginals = Marginals::identical(&fine_density, n);
        let out = match sparse_ipfp_solve(&skernel, &marginals, &cfg, Some(start)) {
            Ok(o) => o,
            Err(Error::Infeasible { axis, index }) => {
                stopped = Some(format!("level {level} infeasible on axis {axis} at index {index}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let plan = out.plan(&skernel);
        let objective = entropic_cost(&plan, &spec_cost(spec, &fine_grid)).objective;
        let report = LevelReport {
            level,
            grid_points_per_axis: fine_grid.len(),
            active_cells: skernel.nnz(),
            m: Some(m),
            xi: config.xi,
            epsilon: eps,
            sweeps: out.sweeps,
            residual: out.residual.max_linf(),
            objective,
            converged: out.converged,
            rescued_cells: step.rescued,
            filter,
        };
        info!("refine level {level}: {report:?}");
        if !out.converged {
            stopped = Some(format!("level {level} did not converge in {} sweeps", out.sweeps));
            break;
        }
        levels.push(LevelResult {
            density: fine_density,
            state: out.state,
            plan,
            epsilon: eps,
            report,
            history: out.history,
        });
    }
    Ok(RefineOutcome { levels, stopped })
}

fn spec_cost(spec: CoulombCostSpec, grid: &Grid1D) -> crate::cost::GridCost<'_> {
    crate::cost::GridCost { spec, grid }
}

/// Writes the per-level reports as a JSON array.
pub fn write_reports_json(reports: &[LevelReport], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(reports).expect("reports serialize");
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::make_uniform;
    use ndarray::{Array2, ArrayD, Dimension, IxDyn};

    fn dense2(a: Array2<f64>) -> TransportPlan {
        TransportPlan::dense(a.into_dyn(), 0.1).unwrap()
    }

    #[test]
    fn diagonal_plan_keeps_diagonal() {
        let a = Array2::from_diag(&ndarray::arr1(&[0.25, 0.25, 0.25, 0.25]));
        let (mask, m) = threshold_support(&dense2(a), 0.9).unwrap();
        assert_eq!(m, 0.25);
        assert_eq!(mask.indices, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn uniform_plan_keeps_everything() {
        let a = Array2::from_elem((5, 5), 0.04);
        let (mask, _) = threshold_support(&dense2(a), 0.9).unwrap();
        assert_eq!(mask.len(), 25);
        let z = Array2::zeros((3, 3));
        assert!(threshold_support(&dense2(z), 0.9).is_err());
        assert!(threshold_support(&dense2(Array2::from_elem((2, 2), 0.25)), 1.0).is_err());
    }

    #[test]
    fn mask_holds_every_fiber_maximum() {
        let a = ArrayD::from_shape_fn(IxDyn(&[4, 4, 4]), |i| {
            1.0 + ((i[0] * 7 + i[1] * 3 + i[2] * 5) % 11) as f64
        });
        let plan = TransportPlan::dense(a.clone(), 0.1).unwrap();
        let (mask, _) = threshold_support(&plan, 0.9).unwrap();
        let kept: std::collections::HashSet<Vec<usize>> = (0..mask.len()).map(|e| mask.index(e).to_vec()).collect();
        for axis in 0..3 {
            for x in 0..4 {
                let slice = a.index_axis(ndarray::Axis(axis), x);
                let (best, _) = slice
                    .indexed_iter()
                    .fold((None, f64::MIN), |acc, (idx, v)| if *v > acc.1 { (Some(idx), *v) } else { acc });
                let rest = best.unwrap();
                let mut full = rest.as_array_view().to_vec();
                full.insert(axis, x);
                assert!(kept.contains(&full));
            }
        }
    }

    #[test]
    fn quarter_support_doubles_resolution() {
        let grid = Grid1D::uniform(0.0, 1.0, 8).unwrap();
        // A band covering a quarter of the 64 cells.
        let mut idx = Vec::new();
        let mut w = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                let d = (i as i64 - j as i64).abs();
                if d <= 1 || (i + j) % 7 == 0 && d == 2 {
                    idx.extend([i, j]);
                    w.push(1.0);
                }
            }
        }
        let band: Vec<usize> = idx.clone();
        let count = w.len();
        let sum: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|x| x / sum).collect();
        let plan = LevelPlan { grid, n: 2, indices: idx, weights: w.clone() };
        let mask = SupportMask { n: 2, points_per_axis: 8, indices: band[..32].to_vec() };
        assert_eq!(mask.len(), 16);
        let step = plan_refine_step(&plan, &mask, w[0], 0.5, 64, 1.0).unwrap();
        assert_eq!(step.plan.grid.len(), 16);
        assert!((step.refinement_ratio - 0.25).abs() < 1e-15);
        assert!((step.plan.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(count > 16);
    }

    #[test]
    fn resampling_preserves_mass() {
        let rho = make_uniform(2.0, 10).unwrap();
        let g = Grid1D::uniform(-1.0, 1.0, 36).unwrap();
        let fine = resample_density(&rho.quantile(), &g).unwrap();
        assert!((fine.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for w in fine.weights() {
            assert!((w - 1.0 / 36.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_level_is_plain_ipfp() {
        let rho = make_uniform(2.0, 30).unwrap();
        let spec = CoulombCostSpec::full_1d(2).unwrap();
        let mut solver = SolverConfig::for_density(0.05, &rho);
        solver.mode = EvaluationMode::Log;
        let cfg = RefinementConfig { levels: 1, ..Default::default() };
        let out = refine_solve(&rho, spec, &solver, &cfg).unwrap();
        let k = build_kernel(spec, rho.grid(), 0.05).unwrap();
        let plain = ipfp_solve(&k, &Marginals::identical(&rho, 2), &solver).unwrap();
        assert_eq!(out.levels.len(), 1);
        assert_eq!(out.finest().state, plain.state);
    }

    #[test]
    fn refined_levels_keep_mass_and_rows() {
        let rho = make_uniform(2.0, 40).unwrap();
        let spec = CoulombCostSpec::full_1d(2).unwrap();
        let mut solver = SolverConfig::for_density(0.02, &rho);
        solver.mode = EvaluationMode::Log;
        let cfg = RefinementConfig { levels: 3, ..Default::default() };
        let out = refine_solve(&rho, spec, &solver, &cfg).unwrap();
        assert!(out.stopped.is_none(), "{:?}", out.stopped);
        assert_eq!(out.levels.len(), 3);
        for l in &out.levels {
            assert!((l.plan.total_mass() - 1.0).abs() < 1e-9);
            let marg = l.plan.marginal(0);
            assert!(marg.iter().all(|v| *v > 0.0));
        }
        let a0 = out.levels[0].report.active_cells as f64;
        for l in &out.levels[1..] {
            assert!(l.report.grid_points_per_axis > 40);
            let ratio = l.report.active_cells as f64 / a0;
            assert!(ratio > 0.5 && ratio < 2.0, "{:?}", out.reports());
        }
    }

    fn level(grid_len: usize, cells: &[(usize, usize)]) -> LevelPlan {
        LevelPlan {
            grid: Grid1D::uniform(0.0, 1.0, grid_len).unwrap(),
            n: 2,
            indices: cells.iter().flat_map(|&(i, j)| [i, j]).collect(),
            weights: vec![1.0 / cells.len() as f64; cells.len()],
        }
    }

    #[test]
    fn pruning_drops_cells_off_every_plan() {
        // With equal weights, (0, 1) forces row 1 to have no partner.
        let mut p = level(2, &[(0, 0), (0, 1), (1, 1)]);
        assert_eq!(prune_to_total_support(&mut p, &[0.5, 0.5]), Some(1));
        assert_eq!(p.indices, vec![0, 0, 1, 1]);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Identical marginals force the triangle's corner to zero for any weights.
        let mut q = level(2, &[(0, 0), (1, 0), (1, 1)]);
        assert_eq!(prune_to_total_support(&mut q, &[0.3, 0.7]), Some(1));
        let mut r = level(2, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(prune_to_total_support(&mut r, &[0.3, 0.7]), Some(0));
    }

    #[test]
    fn pruning_detects_an_uncoverable_support() {
        let mut p = level(3, &[(0, 0), (1, 0), (2, 2)]);
        assert_eq!(prune_to_total_support(&mut p, &[1.0, 1.0, 1.0]), None);
    }
}
