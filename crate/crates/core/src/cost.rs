//! Coulomb cost, its radial reduction and the Gibbs kernel `exp(-c/eps)`.
//!
//! Full-space costs are pairwise separable, so the kernel is stored as one
//! `M x M` factor per unordered pair of marginals. The reduced three-body
//! radial cost is not separable; it is tabulated once per sorted radius
//! triple.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;

use crate::densities::Grid1D;
use crate::error::{invalid, Result};

/// `1 / |x - y|`, `+inf` on coincidence.
pub fn coulomb_pair(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    if d2 == 0.0 {
        f64::INFINITY
    } else {
        1.0 / d2.sqrt()
    }
}

/// Sum of `coulomb_pair` over unordered pairs.
///
/// Pair terms are summed in ascending order, which makes the result
/// bit-identical under any permutation of `points`.
pub fn coulomb_total<P: AsRef<[f64]>>(points: &[P]) -> f64 {
    let n = points.len();
    let mut terms = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            terms.push(coulomb_pair(points[i].as_ref(), points[j].as_ref()));
        }
    }
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Coulomb cost of points on the line.
pub fn coulomb_total_1d(xs: &[f64]) -> f64 {
    let mut terms = Vec::with_capacity(xs.len() * xs.len().saturating_sub(1) / 2);
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let d = (xs[i] - xs[j]).abs();
            terms.push(if d == 0.0 { f64::INFINITY } else { 1.0 / d });
        }
    }
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    /// Coulomb cost between positions on a one-dimensional grid.
    FullSpace,
    /// Reduced cost over radii, minimized over angles.
    RadialReduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CoulombCostSpec {
    pub n_marginals: usize,
    pub dimension: usize,
    pub mode: CostMode,
}

impl CoulombCostSpec {
    pub fn new(n_marginals: usize, dimension: usize, mode: CostMode) -> Result<Self> {
        let spec = Self {
            n_marginals,
            dimension,
            mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn full_1d(n_marginals: usize) -> Result<Self> {
        Self::new(n_marginals, 1, CostMode::FullSpace)
    }

    pub fn radial(n_marginals: usize, dimension: usize) -> Result<Self> {
        Self::new(n_marginals, dimension, CostMode::RadialReduced)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_marginals < 2 {
            return Err(invalid(format!(
                "need at least 2 marginals, got {}",
                self.n_marginals
            )));
        }
        if !(1..=3).contains(&self.dimension) {
            return Err(invalid(format!(
                "dimension must be 1, 2 or 3, got {}",
                self.dimension
            )));
        }
        if self.mode == CostMode::RadialReduced && self.dimension < 2 {
            return Err(invalid("radial reduction requires d >= 2"));
        }
        Ok(())
    }

    /// Cost of a tuple of grid coordinates (positions or radii).
    pub fn evaluate(&self, coords: &[f64]) -> Result<f64> {
        match self.mode {
            CostMode::FullSpace => Ok(coulomb_total_1d(coords)),
            CostMode::RadialReduced => reduced_cost(coords, self.dimension),
        }
    }
}

/// Anything that prices a multi-index of grid cells.
pub trait CostTensor: Sync {
    fn cost(&self, idx: &[usize]) -> f64;
}

/// Cost evaluated directly from grid coordinates.
#[derive(Debug, Clone)]
pub struct GridCost<'a> {
    pub spec: CoulombCostSpec,
    pub grid: &'a Grid1D,
}

impl CostTensor for GridCost<'_> {
    fn cost(&self, idx: &[usize]) -> f64 {
        let x = self.grid.points();
        let coords: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        self.spec.evaluate(&coords).unwrap_or(f64::NAN)
    }
}

/// Minimizer of the three-electron angular problem at fixed radii.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularMinimum {
    pub value: f64,
    /// Polar angle of electron 2, in `[0, pi]`.
    pub theta2: f64,
    /// Planar angle of electron 3, in `[0, 2 pi)`.
    pub theta3: f64,
}

const COARSE_STEPS: usize = 64;
const ANGLE_TOL: f64 = 1e-8;

fn three_body_energy(r: [f64; 3], theta2: f64, theta3: f64) -> f64 {
    let p1 = [0.0, r[0]];
    let p2 = [r[1] * theta2.sin(), r[1] * theta2.cos()];
    let p3 = [r[2] * theta3.sin(), r[2] * theta3.cos()];
    coulomb_pair(&p1, &p2) + coulomb_pair(&p1, &p3) + coulomb_pair(&p2, &p3)
}

fn wrap_angle(t: f64) -> f64 {
    let w = t.rem_euclid(2.0 * PI);
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

/// Minimum Coulomb energy of three electrons on spheres of radii `r`.
///
/// Electron 1 sits on the z-axis and the optimum is planar, so the search
/// runs over `theta2 in [0, pi]` and `theta3 in [0, 2 pi)`: a 64 x 64 grid
/// followed by compass search down to `1e-8` in angle.
pub fn minimize_three_body(r: [f64; 3]) -> AngularMinimum {
    let zeros = r.iter().filter(|x| **x == 0.0).count();
    if zeros >= 2 {
        return AngularMinimum {
            value: f64::INFINITY,
            theta2: PI,
            theta3: PI,
        };
    }
    let d2 = PI / (COARSE_STEPS - 1) as f64;
    let d3 = 2.0 * PI / COARSE_STEPS as f64;
    let mut best = (f64::INFINITY, PI, PI);
    for i in 0..COARSE_STEPS {
        let t2 = i as f64 * d2;
        for j in 0..COARSE_STEPS {
            let t3 = j as f64 * d3;
            let e = three_body_energy(r, t2, t3);
            if e < best.0 {
                best = (e, t2, t3);
            }
        }
    }

    let (mut e, mut t2, mut t3) = best;
    let mut step = d3;
    while step > ANGLE_TOL {
        let mut improved = false;
        for (dt2, dt3) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let c2 = (t2 + dt2).clamp(0.0, PI);
            let c3 = wrap_angle(t3 + dt3);
            let ce = three_body_energy(r, c2, c3);
            if ce < e {
                e = ce;
                t2 = c2;
                t3 = c3;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    AngularMinimum {
        value: e,
        theta2: t2,
        theta3: t3,
    }
}

/// Reduced cost `inf { c(x) : |x_i| = r_i }`.
///
/// Two electrons: antipodal placement, `1 / (r1 + r2)`. Three electrons:
/// numerical angular minimization. Larger `N` is not supported.
pub fn reduced_cost(r: &[f64], d: usize) -> Result<f64> {
    if d < 2 {
        return Err(invalid("radial reduction requires d >= 2"));
    }
    if let Some(x) = r.iter().find(|x| !(**x >= 0.0)) {
        return Err(invalid(format!("negative radius {x}")));
    }
    match r.len() {
        2 => {
            let s = r[0] + r[1];
            Ok(if s == 0.0 { f64::INFINITY } else { 1.0 / s })
        }
        3 => Ok(minimize_three_body([r[0], r[1], r[2]]).value),
        n => Err(invalid(format!(
            "reduced cost implemented for N = 2, 3; got N = {n}"
        ))),
    }
}

/// Argmin angles of the reduced-cost problem: `[theta2]` for two electrons,
/// `[theta2, theta3]` for three.
pub fn reduced_cost_angles(r: &[f64], d: usize) -> Result<Vec<f64>> {
    reduced_cost(r, d)?;
    match r.len() {
        2 => Ok(vec![PI]),
        _ => {
            let m = minimize_three_body([r[0], r[1], r[2]]);
            Ok(vec![m.theta2, m.theta3])
        }
    }
}

/// Index of the unordered pair `(i, j)`, `i < j`, in lexicographic order.
pub fn pair_index(i: usize, j: usize, n: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

/// Kernel entry for a cost value; `+inf` and underflowing entries are 0.
fn gibbs(cost: f64, epsilon: f64) -> f64 {
    let v = (-cost / epsilon).exp();
    if v < f64::MIN_POSITIVE {
        0.0
    } else {
        v
    }
}

fn tet(k: usize) -> usize {
    k * (k + 1) * (k + 2) / 6
}

fn tri(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Reduced three-body cost tabulated on sorted index triples.
#[derive(Debug, Clone)]
pub struct TripleCostTable {
    m: usize,
    costs: Vec<f64>,
}

impl TripleCostTable {
    /// Angular minimization for every sorted radius triple of `grid`.
    pub fn build(grid: &Grid1D) -> Self {
        let m = grid.len();
        let r = grid.points();
        let costs: Vec<f64> = (0..m)
            .into_par_iter()
            .flat_map_iter(|k| {
                (0..=k).flat_map(move |j| {
                    (0..=j).map(move |i| minimize_three_body([r[i], r[j], r[k]]).value)
                })
            })
            .collect();
        debug_assert_eq!(costs.len(), tet(m));
        Self { m, costs }
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    fn packed(&self, mut a: usize, mut b: usize, mut c: usize) -> usize {
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        if b > c {
            std::mem::swap(&mut b, &mut c);
        }
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        tet(c) + tri(b) + a
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.costs[self.packed(i, j, k)]
    }
}

#[derive(Debug, Clone)]
pub enum KernelStructure {
    /// One `M x M` cost and Gibbs factor per unordered pair, indexed by
    /// [`pair_index`].
    Pairwise {
        costs: Vec<Arc<Array2<f64>>>,
        factors: Vec<Arc<Array2<f64>>>,
    },
    /// Non-separable three-marginal kernel over sorted triples.
    Triple {
        table: Arc<TripleCostTable>,
        factors: Arc<Vec<f64>>,
    },
}

/// Gibbs kernel `exp(-c/eps)` on a grid shared by all marginals.
#[derive(Debug, Clone)]
pub struct GibbsKernel {
    epsilon: f64,
    grid: Grid1D,
    spec: CoulombCostSpec,
    structure: KernelStructure,
}

fn pair_cost_matrix(grid: &Grid1D, pair: impl Fn(f64, f64) -> f64 + Sync) -> Array2<f64> {
    let x = grid.points();
    let m = x.len();
    let data: Vec<f64> = (0..m)
        .into_par_iter()
        .flat_map_iter(|i| {
            let pair = &pair;
            (0..m).map(move |j| pair(x[i], x[j]))
        })
        .collect();
    Array2::from_shape_vec((m, m), data).expect("square matrix")
}

fn gibbs_matrix(costs: &Array2<f64>, epsilon: f64) -> Array2<f64> {
    let m = costs.nrows();
    let data: Vec<f64> = costs
        .as_slice()
        .expect("standard layout")
        .par_chunks(m)
        .flat_map_iter(|row| row.iter().map(|c| gibbs(*c, epsilon)))
        .collect();
    Array2::from_shape_vec((m, m), data).expect("square matrix")
}

/// Builds the kernel for `spec` on `grid`.
pub fn build_kernel(spec: CoulombCostSpec, grid: &Grid1D, epsilon: f64) -> Result<GibbsKernel> {
    spec.validate()?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = spec.n_marginals;
    let structure = match spec.mode {
        CostMode::FullSpace => {
            if spec.dimension != 1 {
                return Err(invalid(
                    "full-space kernels live on 1D grids; use radial mode for d > 1",
                ));
            }
            let costs = Arc::new(pair_cost_matrix(grid, |x, y| {
                let d = (x - y).abs();
                if d == 0.0 {
                    f64::INFINITY
                } else {
                    1.0 / d
                }
            }));
            let factors = Arc::new(gibbs_matrix(&costs, epsilon));
            let pairs = n * (n - 1) / 2;
            KernelStructure::Pairwise {
                costs: vec![costs; pairs],
                factors: vec![factors; pairs],
            }
        }
        CostMode::RadialReduced => {
            if let Some(r) = grid.points().iter().find(|r| **r < 0.0) {
                return Err(invalid(format!("radial grid has negative radius {r}")));
            }
            match n {
                2 => {
                    let costs = Arc::new(pair_cost_matrix(grid, |r, s| {
                        if r + s == 0.0 {
                            f64::INFINITY
                        } else {
                            1.0 / (r + s)
                        }
                    }));
                    let factors = Arc::new(gibbs_matrix(&costs, epsilon));
                    KernelStructure::Pairwise {
                        costs: vec![costs],
                        factors: vec![factors],
                    }
                }
                3 => {
                    let table = Arc::new(TripleCostTable::build(grid));
                    let factors = Arc::new(table.costs.iter().map(|c| gibbs(*c, epsilon)).collect());
                    KernelStructure::Triple { table, factors }
                }
                _ => {
                    return Err(invalid(format!(
                        "radial kernels implemented for N = 2, 3; got N = {n}"
                    )))
                }
            }
        }
    };
    Ok(GibbsKernel {
        epsilon,
        grid: grid.clone(),
        spec,
        structure,
    })
}

impl CostTensor for GibbsKernel {
    fn cost(&self, idx: &[usize]) -> f64 {
        GibbsKernel::cost(self, idx)
    }
}

impl GibbsKernel {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn spec(&self) -> CoulombCostSpec {
        self.spec
    }

    pub fn n_marginals(&self) -> usize {
        self.spec.n_marginals
    }

    /// Grid size `M`.
    pub fn size(&self) -> usize {
        self.grid.len()
    }

    pub fn structure(&self) -> &KernelStructure {
        &self.structure
    }

    /// Same cost tables, different regularization.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        let structure = match &self.structure {
            KernelStructure::Pairwise { costs, .. } => {
                let mut cache: Vec<(*const Array2<f64>, Arc<Array2<f64>>)> = Vec::new();
                let factors = costs
                    .iter()
                    .map(|c| {
                        let key = Arc::as_ptr(c);
                        if let Some((_, f)) = cache.iter().find(|(k, _)| *k == key) {
                            return f.clone();
                        }
                        let f = Arc::new(gibbs_matrix(c, epsilon));
                        cache.push((key, f.clone()));
                        f
                    })
                    .collect();
                KernelStructure::Pairwise {
                    costs: costs.clone(),
                    factors,
                }
            }
            KernelStructure::Triple { table, .. } => KernelStructure::Triple {
                table: table.clone(),
                factors: Arc::new(table.costs.iter().map(|c| gibbs(*c, epsilon)).collect()),
            },
        };
        Ok(Self {
            epsilon,
            grid: self.grid.clone(),
            spec: self.spec,
            structure,
        })
    }

    /// Pairwise Gibbs factor for marginals `i < j`.
    pub fn pair_factor(&self, i: usize, j: usize) -> Option<&Array2<f64>> {
        match &self.structure {
            KernelStructure::Pairwise { factors, .. } => {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                Some(&factors[pair_index(a, b, self.n_marginals())])
            }
            KernelStructure::Triple { .. } => None,
        }
    }

    pub fn pair_cost(&self, i: usize, j: usize) -> Option<&Array2<f64>> {
        match &self.structure {
            KernelStructure::Pairwise { costs, .. } => {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                Some(&costs[pair_index(a, b, self.n_marginals())])
            }
            KernelStructure::Triple { .. } => None,
        }
    }

    /// Cost of the multi-index `idx` (one grid index per marginal).
    pub fn cost(&self, idx: &[usize]) -> f64 {
        let n = self.n_marginals();
        debug_assert_eq!(idx.len(), n);
        match &self.structure {
            KernelStructure::Pairwise { costs, .. } => {
                let mut terms = Vec::with_capacity(costs.len());
                for i in 0..n {
                    for j in i + 1..n {
                        terms.push(costs[pair_index(i, j, n)][[idx[i], idx[j]]]);
                    }
                }
                terms.sort_by(f64::total_cmp);
                terms.iter().sum()
            }
            KernelStructure::Triple { table, .. } => table.get(idx[0], idx[1], idx[2]),
        }
    }

    /// Kernel value of the multi-index `idx`.
    pub fn value(&self, idx: &[usize]) -> f64 {
        let n = self.n_marginals();
        match &self.structure {
            KernelStructure::Pairwise { factors, .. } => {
                let mut v = 1.0;
                for i in 0..n {
                    for j in i + 1..n {
                        v *= factors[pair_index(i, j, n)][[idx[i], idx[j]]];
                    }
                }
                v
            }
            KernelStructure::Triple { table, factors } => {
                factors[table.packed(idx[0], idx[1], idx[2])]
            }
        }
    }

    /// `-c(idx)/eps`, `-inf` on infinite cost.
    pub fn log_value(&self, idx: &[usize]) -> f64 {
        -self.cost(idx) / self.epsilon
    }
}
