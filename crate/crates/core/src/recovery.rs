//! Potentials, maps, projections and energies read off a solved problem.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cost::CostTensor;
use crate::densities::{fmt17, DiscreteDensity};
use crate::error::{Error, Result};
use crate::solver::{entropic_cost, ScalingState, TransportPlan};

/// How the additive constant of a potential was fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gauge {
    /// `int u rho` equals the mean of `int u_k rho` over the raw per-marginal potentials.
    ScalingMean,
    /// `N int u rho` equals a prescribed transport energy.
    Energy,
    /// Arbitrary prescribed `int u rho`.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Potential {
    pub points: Vec<f64>,
    pub values: Vec<f64>,
    pub epsilon: f64,
    pub gauge: Gauge,
    /// Value of `sum_j u_j rho_j` after anchoring.
    pub anchor: f64,
}

impl Potential {
    /// `sum_j u_j w_j`.
    pub fn integrate(&self, weights: &[f64]) -> f64 {
        self.values.iter().zip(weights).map(|(u, w)| u * w).sum()
    }

    /// Shifts so that `sum_j u_j w_j = anchor`.
    pub fn anchored(mut self, weights: &[f64], anchor: f64, gauge: Gauge) -> Self {
        let mass: f64 = weights.iter().sum();
        let shift = (anchor - self.integrate(weights)) / mass;
        for v in self.values.iter_mut() {
            *v += shift;
        }
        self.anchor = anchor;
        self.gauge = gauge;
        self
    }

    /// Anchors `N int u rho = energy`.
    pub fn anchored_to_energy(self, weights: &[f64], n: usize, energy: f64) -> Self {
        self.anchored(weights, energy / n as f64, Gauge::Energy)
    }
}

/// `u = eps log(a / w)` per marginal, averaged over the `N` scalings.
///
/// Each per-marginal potential is first shifted to the common mean of
/// `int u_k rho`, which keeps `sum_k int u_k rho` unchanged.
pub fn potential_from_scalings(state: &ScalingState, epsilon: f64, density: &DiscreteDensity) -> Result<Potential> {
    let m = density.len();
    if state.size() != m {
        return Err(Error::Shape(format!("{} scalings for {m} grid points", state.size())));
    }
    let n = state.n_marginals();
    let w = density.weights();
    let cells = density.grid().cell_weights();
    let mass = density.total_mass();
    let mut per: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let la = state.log_vector(k);
        let mut u = vec![0.0; m];
        for j in 0..m {
            if w[j] == 0.0 {
                continue;
            }
            if la[j] == f64::NEG_INFINITY || la[j].is_nan() {
                return Err(Error::Infeasible { axis: k, index: j });
            }
            u[j] = epsilon * (la[j] - cells[j].ln());
        }
        per.push(u);
    }
    let means: Vec<f64> = per
        .iter()
        .map(|u| u.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / mass)
        .collect();
    let target = means.iter().sum::<f64>() / n as f64;
    let mut values = vec![0.0; m];
    for (u, mean) in per.iter().zip(&means) {
        for j in 0..m {
            if w[j] > 0.0 {
                values[j] += (u[j] - mean + target) / n as f64;
            }
        }
    }
    // Zero-weight points carry no information; interpolate for output.
    fill_gaps(&mut values, w);
    let anchor = target * mass;
    Ok(Potential {
        points: density.points().to_vec(),
        values,
        epsilon,
        gauge: Gauge::ScalingMean,
        anchor,
    })
}

fn fill_gaps(values: &mut [f64], w: &[f64]) {
    let known: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 0.0).collect();
    if known.is_empty() {
        return;
    }
    for j in 0..w.len() {
        if w[j] > 0.0 {
            continue;
        }
        let right = known.partition_point(|&k| k < j);
        values[j] = match (right.checked_sub(1), known.get(right)) {
            (Some(l), Some(&r)) => {
                let l = known[l];
                let t = (j - l) as f64 / (r - l) as f64;
                values[l] + t * (values[r] - values[l])
            }
            (Some(l), None) => values[known[l]],
            (None, Some(&r)) => values[r],
            (None, None) => unreachable!(),
        };
    }
}

/// Largest relative violation `(sum_k u(x_{i_k}) - c_I) / eps` seen on the checked tuples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualFeasibility {
    pub kappa: f64,
    pub tuples_checked: usize,
    pub exhaustive: bool,
    pub seed: u64,
}

/// Checks all tuples when there are at most `samples` of them, otherwise
/// `samples` uniformly drawn ones. Tuples touching zero-weight points are skipped.
pub fn dual_feasibility(
    potential: &Potential,
    density: &DiscreteDensity,
    n: usize,
    cost: &dyn CostTensor,
    samples: usize,
    seed: u64,
) -> DualFeasibility {
    let m = potential.values.len();
    let w = density.weights();
    let support: Vec<usize> = (0..m).filter(|&j| w[j] > 0.0).collect();
    let s = support.len();
    let total = (s as f64).powi(n as i32);
    let exhaustive = total <= samples as f64;
    let mut worst = f64::NEG_INFINITY;
    let mut checked = 0;
    let mut idx = vec![0usize; n];
    let mut visit = |idx: &[usize]| {
        let c = cost.cost(idx);
        if c.is_finite() {
            let sum: f64 = idx.iter().map(|&i| potential.values[i]).sum();
            worst = worst.max(sum - c);
        }
    };
    if exhaustive {
        let count = total as usize;
        for flat in 0..count {
            let mut r = flat;
            for k in (0..n).rev() {
                idx[k] = support[r % s];
                r /= s;
            }
            visit(&idx);
        }
        checked = count;
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            for v in idx.iter_mut() {
                *v = support[rng.random_range(0..s)];
            }
            visit(&idx);
            checked += 1;
        }
    }
    DualFeasibility {
        kappa: worst / potential.epsilon,
        tuples_checked: checked,
        exhaustive,
        seed,
    }
}

/// Primal cost against the dual value of a potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeakDuality {
    /// `N sum_j u_j rho_j`.
    pub dual_value: f64,
    /// `<c, gamma>`.
    pub primal_value: f64,
    pub gap: f64,
    pub kappa: f64,
}

impl WeakDuality {
    pub fn new(potential: &Potential, density: &DiscreteDensity, n: usize, energy: f64, kappa: f64) -> Self {
        let dual_value = n as f64 * potential.integrate(density.weights());
        Self {
            dual_value,
            primal_value: energy,
            gap: energy - dual_value,
            kappa,
        }
    }

    /// `dual <= primal + kappa eps mass`, with a relative slack for round-off.
    pub fn holds(&self, epsilon: f64, mass: f64) -> bool {
        let bound = self.primal_value + self.kappa.max(0.0) * epsilon * mass;
        self.dual_value <= bound + 1e-9 * bound.abs().max(1.0)
    }
}

/// Conditional statistics of the target position given the source position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapEstimate {
    /// Source indices with positive row mass; other rows are gaps.
    pub rows: Vec<usize>,
    pub source: Vec<f64>,
    pub barycentric: Vec<f64>,
    pub argmax: Vec<f64>,
    /// Conditional standard deviation.
    pub spread: Vec<f64>,
}

/// Map estimate from a two-marginal array with rows on the source axis.
pub fn map_from_pair(pi: &Array2<f64>, source: &[f64], target: &[f64]) -> Result<MapEstimate> {
    if pi.nrows() != source.len() || pi.ncols() != target.len() {
        return Err(Error::Shape(format!(
            "{}x{} plan for {} source and {} target points",
            pi.nrows(),
            pi.ncols(),
            source.len(),
            target.len()
        )));
    }
    let rows: Vec<(usize, f64, f64, f64)> = (0..pi.nrows())
        .into_par_iter()
        .filter_map(|i| {
            let row = pi.row(i);
            let mass: f64 = row.iter().sum();
            if !(mass > 0.0) {
                return None;
            }
            let mean = row.iter().zip(target).map(|(p, y)| p * y).sum::<f64>() / mass;
            let var = row
                .iter()
                .zip(target)
                .map(|(p, y)| p * (y - mean).powi(2))
                .sum::<f64>()
                / mass;
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            Some((i, mean, target[best], var.max(0.0).sqrt()))
        })
        .collect();
    Ok(MapEstimate {
        rows: rows.iter().map(|r| r.0).collect(),
        source: rows.iter().map(|r| source[r.0]).collect(),
        barycentric: rows.iter().map(|r| r.1).collect(),
        argmax: rows.iter().map(|r| r.2).collect(),
        spread: rows.iter().map(|r| r.3).collect(),
    })
}

/// Map estimate from any plan on a common grid.
pub fn map_from_plan(plan: &TransportPlan, points: &[f64], source: usize, target: usize) -> Result<MapEstimate> {
    let pi = project_pair(plan, source, target)?;
    map_from_pair(&pi, points, points)
}

/// Sum over every axis other than `i` and `j`; rows follow axis `i`.
pub fn project_pair(plan: &TransportPlan, i: usize, j: usize) -> Result<Array2<f64>> {
    let shape = plan.shape();
    let n = shape.len();
    if i >= n || j >= n || i == j {
        return Err(Error::Shape(format!("invalid axis pair ({i}, {j}) for a {n}-way plan")));
    }
    let mut out = Array2::zeros((shape[i], shape[j]));
    plan.for_each(|idx, w| out[[idx[i], idx[j]]] += w);
    Ok(out)
}

/// Fraction of the mass of `pi` lying within `half_width` target cells of
/// the graph of `f`. Rows where `f` is undefined count as outside.
pub fn graph_band_mass(
    pi: &Array2<f64>,
    source: &[f64],
    target: &[f64],
    f: impl Fn(f64) -> Option<f64> + Sync,
    half_width: usize,
) -> f64 {
    let total: f64 = pi.iter().sum();
    let inside: f64 = (0..pi.nrows())
        .into_par_iter()
        .map(|i| {
            let Some(y) = f(source[i]) else { return 0.0 };
            let c = nearest_index(target, y);
            let lo = c.saturating_sub(half_width);
            let hi = (c + half_width).min(target.len() - 1);
            (lo..=hi).map(|j| pi[[i, j]]).sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    inside / total
}

/// Index of the sorted grid point closest to `y`.
pub fn nearest_index(points: &[f64], y: f64) -> usize {
    let k = points.partition_point(|&p| p < y);
    if k == 0 {
        0
    } else if k == points.len() {
        points.len() - 1
    } else if (points[k] - y).abs() < (y - points[k - 1]).abs() {
        k
    } else {
        k - 1
    }
}

/// `<c, gamma>`.
pub fn sce_energy(plan: &TransportPlan, cost: &dyn CostTensor) -> f64 {
    entropic_cost(plan, cost).transport_cost
}

/// `max |d - s| / max |exact|` with `d = u - exact` and the best constant `s`,
/// over points of positive weight.
pub fn relative_linf_error(values: &[f64], exact: &[f64], weights: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut scale = 0.0f64;
    for ((u, e), w) in values.iter().zip(exact).zip(weights) {
        if *w > 0.0 {
            let d = u - e;
            lo = lo.min(d);
            hi = hi.max(d);
            scale = scale.max(e.abs());
        }
    }
    if scale == 0.0 {
        return (hi - lo) / 2.0;
    }
    (hi - lo) / 2.0 / scale
}

/// Relative L1 error after the same constant shift as [`relative_linf_error`].
pub fn relative_l1_error(values: &[f64], exact: &[f64], weights: &[f64]) -> f64 {
    let d: Vec<f64> = values.iter().zip(exact).map(|(u, e)| u - e).collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, w) in d.iter().zip(weights) {
        if *w > 0.0 {
            lo = lo.min(*x);
            hi = hi.max(*x);
        }
    }
    let s = (lo + hi) / 2.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((x, e), w) in d.iter().zip(exact).zip(weights) {
        num += (x - s).abs() * w;
        den += e.abs() * w;
    }
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(std::io::BufWriter::new(f))
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `x,u`
pub fn write_potential_csv(potential: &Potential, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    writeln!(out, "x,u").map_err(io(path))?;
    for (x, u) in potential.points.iter().zip(&potential.values) {
        writeln!(out, "{},{}", fmt17(*x), fmt17(*u)).map_err(io(path))?;
    }
    out.flush().map_err(io(path))
}

/// `x,barycentric,argmax,spread`
pub fn write_map_csv(map: &MapEstimate, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    writeln!(out, "x,barycentric,argmax,spread").map_err(io(path))?;
    for k in 0..map.rows.len() {
        writeln!(
            out,
            "{},{},{},{}",
            fmt17(map.source[k]),
            fmt17(map.barycentric[k]),
            fmt17(map.argmax[k]),
            fmt17(map.spread[k])
        )
        .map_err(io(path))?;
    }
    out.flush().map_err(io(path))
}

/// `i,j[,k],weight` for entries strictly above `min_weight`, in index order.
pub fn write_plan_triplets(plan: &TransportPlan, min_weight: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    let n = plan.n_marginals();
    let names = ["i", "j", "k", "l", "m", "n"];
    let header: Vec<String> = (0..n)
        .map(|a| names.get(a).map(|s| s.to_string()).unwrap_or(format!("i{a}")))
        .chain(std::iter::once("weight".to_string()))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io(path))?;
    let mut entries: Vec<(Vec<usize>, f64)> = Vec::new();
    plan.for_each(|idx, w| {
        if w > min_weight {
            entries.push((idx.to_vec(), w));
        }
    });
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    for (idx, w) in entries {
        let cols: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
        writeln!(out, "{},{}", cols.join(","), fmt17(w)).map_err(io(path))?;
    }
    out.flush().map_err(io(path))
}

/// Headline numbers of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub epsilon: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub residual: f64,
    pub energy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub potential_error_vs_oracle: Option<f64>,
    pub error_metric: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duality: Option<WeakDuality>,
    /// The fully resolved run configuration.
    pub config: serde_json::Value,
}

pub const ERROR_METRIC: &str = "relative-linf-after-optimal-constant-shift";

pub fn write_summary_json(summary: &RunSummary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, summary).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    writeln!(out).map_err(io(path))?;
    out.flush().map_err(io(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{build_kernel, CoulombCostSpec, GibbsKernel};
    use crate::densities::{make_uniform, make_uniform_interval};
    use crate::solver::{ipfp_solve, plan_from_scalings, EvaluationMode, Marginals, SolverConfig};
    use ndarray::{ArrayD, IxDyn};

    fn solve(rho: &DiscreteDensity, n: usize, eps: f64) -> (GibbsKernel, ScalingState) {
        let k = build_kernel(CoulombCostSpec::full_1d(n).unwrap(), rho.grid(), eps).unwrap();
        let mut cfg = SolverConfig::for_density(eps, rho);
        cfg.mode = EvaluationMode::Log;
        let out = ipfp_solve(&k, &Marginals::identical(rho, n), &cfg).unwrap();
        assert!(out.converged);
        (k, out.state)
    }

    #[test]
    fn equal_scalings_give_constant_potential() {
        let rho = make_uniform(2.0, 10).unwrap();
        let state = ScalingState::from_vectors(vec![vec![0.3; 10]; 2], EvaluationMode::Linear).unwrap();
        let u = potential_from_scalings(&state, 0.1, &rho).unwrap();
        for v in &u.values {
            assert!((v - u.values[0]).abs() < 1e-15);
        }
        assert!((u.integrate(rho.weights()) - u.anchor).abs() < 1e-12);
        assert!((u.values[0] - 0.1 * (0.3f64 / 0.2).ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_scaling_on_support_is_infeasible() {
        let rho = make_uniform(2.0, 4).unwrap();
        let state =
            ScalingState::from_vectors(vec![vec![1.0, 0.0, 1.0, 1.0], vec![1.0; 4]], EvaluationMode::Linear).unwrap();
        assert!(matches!(
            potential_from_scalings(&state, 0.1, &rho),
            Err(Error::Infeasible { axis: 0, index: 1 })
        ));
    }

    #[test]
    fn gauge_is_satisfied_after_anchoring() {
        let rho = make_uniform(2.0, 40).unwrap();
        let (_, state) = solve(&rho, 2, 0.05);
        let u = potential_from_scalings(&state, 0.05, &rho).unwrap();
        assert!((u.integrate(rho.weights()) - u.anchor).abs() < 1e-10);
        let u = u.anchored_to_energy(rho.weights(), 2, 1.7);
        assert!((2.0 * u.integrate(rho.weights()) - 1.7).abs() < 1e-10);
    }

    #[test]
    fn weak_duality_on_small_run() {
        let rho = make_uniform(2.0, 30).unwrap();
        let (k, state) = solve(&rho, 2, 0.05);
        let plan = plan_from_scalings(&k, &state);
        let energy = sce_energy(&plan, &k);
        let u = potential_from_scalings(&state, 0.05, &rho).unwrap();
        let feas = dual_feasibility(&u, &rho, 2, &k, 1_000_000, 7);
        assert!(feas.exhaustive && feas.tuples_checked == 900);
        let wd = WeakDuality::new(&u, &rho, 2, energy, feas.kappa);
        assert!(wd.holds(0.05, 1.0), "{wd:?}");
    }

    #[test]
    fn concentrated_plan_gives_exact_map() {
        let pts = [0.0, 1.0, 2.0, 3.0];
        let mut pi = Array2::zeros((4, 4));
        for (i, j) in [(0, 3), (1, 2), (2, 1), (3, 0)] {
            pi[[i, j]] = 0.25;
        }
        let m = map_from_pair(&pi, &pts, &pts).unwrap();
        assert_eq!(m.barycentric, vec![3.0, 2.0, 1.0, 0.0]);
        assert_eq!(m.argmax, m.barycentric);
        assert!(m.spread.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn empty_rows_are_gaps() {
        let pts = [0.0, 1.0];
        let pi = ndarray::array![[0.0, 0.0], [0.5, 0.5]];
        let m = map_from_pair(&pi, &pts, &pts).unwrap();
        assert_eq!(m.rows, vec![1]);
        assert!((m.spread[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn product_plan_projects_to_product() {
        let rho = [0.2, 0.3, 0.5];
        let a = ArrayD::from_shape_fn(IxDyn(&[3, 3, 3]), |i| rho[i[0]] * rho[i[1]] * rho[i[2]]);
        let plan = TransportPlan::dense(a, 1.0).unwrap();
        let p = project_pair(&plan, 0, 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((p[[i, j]] - rho[i] * rho[j]).abs() < 1e-15);
            }
        }
        assert!(project_pair(&plan, 1, 1).is_err());
    }

    #[test]
    fn symmetric_three_marginal_projections_agree() {
        let rho = make_uniform_interval(0.0, 1.0, 9).unwrap();
        let (k, state) = solve(&rho, 3, 0.2);
        let plan = plan_from_scalings(&k, &state);
        let p01 = project_pair(&plan, 0, 1).unwrap();
        let p02 = project_pair(&plan, 0, 2).unwrap();
        let p12 = project_pair(&plan, 1, 2).unwrap();
        for (a, (b, c)) in p01.iter().zip(p02.iter().zip(p12.iter())) {
            assert!((a - b).abs() < 1e-10 && (a - c).abs() < 1e-10);
        }
    }

    #[test]
    fn point_plan_energy() {
        let g = crate::densities::Grid1D::from_points(vec![0.0, 1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let k = build_kernel(CoulombCostSpec::full_1d(3).unwrap(), &g, 1.0).unwrap();
        let mut a = ArrayD::zeros(IxDyn(&[3, 3, 3]));
        a[IxDyn(&[0, 1, 2])] = 1.0;
        let plan = TransportPlan::dense(a, 1.0).unwrap();
        assert!((sce_energy(&plan, &k) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn error_metric_ignores_constants() {
        let exact = [1.0, 0.5, 0.0, 0.5];
        let u: Vec<f64> = exact.iter().map(|e| e + 3.0).collect();
        assert_eq!(relative_linf_error(&u, &exact, &[1.0; 4]), 0.0);
        let v = [1.1, 0.5, 0.0, 0.5];
        assert!((relative_linf_error(&v, &exact, &[1.0; 4]) - 0.05).abs() < 1e-12);
        assert_eq!(relative_linf_error(&v, &exact, &[0.0, 1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn csv_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let u = Potential {
            points: vec![0.0, 1.0],
            values: vec![0.5, 0.25],
            epsilon: 0.1,
            gauge: Gauge::Explicit,
            anchor: 0.75,
        };
        write_potential_csv(&u, dir.path().join("u.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("u.csv")).unwrap();
        assert_eq!(text.lines().next(), Some("x,u"));
        assert_eq!(text.lines().count(), 3);
        let a = ArrayD::from_shape_fn(IxDyn(&[2, 2]), |i| if i[0] != i[1] { 0.5 } else { 0.0 });
        let plan = TransportPlan::dense(a, 0.1).unwrap();
        write_plan_triplets(&plan, 0.0, dir.path().join("p.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "i,j,weight");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,1,"));
    }
}
