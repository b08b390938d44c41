//! Scaling-vector IPFP.
//!
//! The plan is never stored: `gamma_I = (prod_j a_j[i_j]) * K_I`. Updating
//! scaling `j` divides the marginal by the contraction of the kernel against
//! all other scalings. For two marginals that is a matrix-vector product; for
//! three marginals with a separable kernel it is the nested sum
//!
//! ```text
//! s(x) = sum_y K_jp[x,y] a_p[y] ( sum_z K_jq[x,z] K_pq[y,z] a_q[z] )
//! ```
//!
//! at `O(M^3)` per vector.

use std::sync::Arc;

use log::warn;
use ndarray::{Array2, ArrayD, Dimension, IxDyn};
use rayon::prelude::*;

use super::plan::{MarginalResidual, SparsePlan, TransportPlan};
use super::{sweep_order, EvaluationMode, Marginals, SolverConfig, SweepRecord};
use crate::cost::{GibbsKernel, KernelStructure};
use crate::error::{Error, Result};

/// The `N` scaling vectors. In linear mode entries are `a >= 0`; in log mode
/// they are `log a` (`-inf` where the marginal vanishes).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingState {
    vectors: Vec<Vec<f64>>,
    mode: EvaluationMode,
    sweep_count: usize,
}

impl ScalingState {
    /// `a_0 = rho`, `a_j = 1` for `j >= 1`.
    pub fn initial(marginals: &Marginals, mode: EvaluationMode) -> Self {
        let m = marginals.size();
        let mut vectors = vec![vec![1.0; m]; marginals.len()];
        vectors[0] = marginals.get(0).to_vec();
        let state = Self {
            vectors,
            mode: EvaluationMode::Linear,
            sweep_count: 0,
        };
        state.into_mode(mode)
    }

    /// All scalings equal to one.
    pub fn ones(n: usize, m: usize, mode: EvaluationMode) -> Self {
        Self {
            vectors: vec![vec![1.0; m]; n],
            mode: EvaluationMode::Linear,
            sweep_count: 0,
        }
        .into_mode(mode)
    }

    pub fn from_vectors(vectors: Vec<Vec<f64>>, mode: EvaluationMode) -> Result<Self> {
        if vectors.len() < 2 {
            return Err(Error::Shape("need at least two scaling vectors".into()));
        }
        let m = vectors[0].len();
        if vectors.iter().any(|v| v.len() != m) {
            return Err(Error::Shape("scaling vectors differ in length".into()));
        }
        let bad = match mode {
            EvaluationMode::Linear => vectors.iter().flatten().any(|a| !(*a >= 0.0 && a.is_finite())),
            EvaluationMode::Log => vectors.iter().flatten().any(|a| a.is_nan() || *a == f64::INFINITY),
        };
        if bad {
            return Err(Error::InvalidParameter("invalid scaling entry".into()));
        }
        Ok(Self {
            vectors,
            mode,
            sweep_count: 0,
        })
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn mode(&self) -> EvaluationMode {
        self.mode
    }

    pub fn sweep_count(&self) -> usize {
        self.sweep_count
    }

    pub(crate) fn set_sweep_count(&mut self, n: usize) {
        self.sweep_count = n;
    }

    pub fn n_marginals(&self) -> usize {
        self.vectors.len()
    }

    pub fn size(&self) -> usize {
        self.vectors[0].len()
    }

    /// `log a_k`, whatever the storage mode.
    pub fn log_vector(&self, k: usize) -> Vec<f64> {
        match self.mode {
            EvaluationMode::Log => self.vectors[k].clone(),
            EvaluationMode::Linear => self.vectors[k].iter().map(|a| a.ln()).collect(),
        }
    }

    pub fn into_mode(self, mode: EvaluationMode) -> Self {
        if mode == self.mode {
            return self;
        }
        let vectors = (0..self.vectors.len())
            .map(|k| match mode {
                EvaluationMode::Log => self.log_vector(k),
                EvaluationMode::Linear => self.vectors[k].iter().map(|b| b.exp()).collect(),
            })
            .collect();
        Self {
            vectors,
            mode,
            sweep_count: self.sweep_count,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IpfpOutcome {
    pub state: ScalingState,
    pub residual: MarginalResidual,
    pub history: Vec<SweepRecord>,
    pub converged: bool,
    pub sweeps: usize,
    /// Set when linear mode broke down and the solve was redone in log mode.
    pub restarted_in_log_domain: bool,
}

fn lse(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Kernel views oriented for each ordered pair of axes.
struct Engine<'k> {
    kernel: &'k GibbsKernel,
    n: usize,
    m: usize,
    /// `lin[j][p]` has rows indexed by axis `j` and columns by axis `p`.
    lin: Vec<Vec<Option<Arc<Array2<f64>>>>>,
    log: Vec<Vec<Option<Arc<Array2<f64>>>>>,
}

fn is_symmetric(a: &Array2<f64>) -> bool {
    let m = a.nrows();
    (0..m).all(|i| (i + 1..m).all(|j| a[[i, j]] == a[[j, i]]))
}

fn orient(
    n: usize,
    get: impl Fn(usize, usize) -> Arc<Array2<f64>>,
) -> Vec<Vec<Option<Arc<Array2<f64>>>>> {
    let mut out = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let f = get(i, j);
            let t = if is_symmetric(&f) {
                f.clone()
            } else {
                Arc::new(f.t().as_standard_layout().into_owned())
            };
            out[i][j] = Some(f);
            out[j][i] = Some(t);
        }
    }
    out
}

impl<'k> Engine<'k> {
    fn new(kernel: &'k GibbsKernel, mode: EvaluationMode) -> Self {
        let n = kernel.n_marginals();
        let m = kernel.size();
        let (lin, log) = match kernel.structure() {
            KernelStructure::Pairwise { .. } => {
                let lin = orient(n, |i, j| Arc::new(kernel.pair_factor(i, j).unwrap().clone()));
                let log = if mode == EvaluationMode::Log {
                    let eps = kernel.epsilon();
                    orient(n, |i, j| Arc::new(kernel.pair_cost(i, j).unwrap().mapv(|c| -c / eps)))
                } else {
                    Vec::new()
                };
                (lin, log)
            }
            KernelStructure::Triple { .. } => (Vec::new(), Vec::new()),
        };
        Self {
            kernel,
            n,
            m,
            lin,
            log,
        }
    }

    fn lin(&self, j: usize, p: usize) -> &Array2<f64> {
        self.lin[j][p].as_deref().expect("pairwise kernel")
    }

    fn logk(&self, j: usize, p: usize) -> &Array2<f64> {
        self.log[j][p].as_deref().expect("pairwise kernel in log mode")
    }

    fn others(&self, axis: usize) -> Vec<usize> {
        (0..self.n).filter(|&k| k != axis).collect()
    }

    /// Linear contraction `s(x) = sum_{I: i_axis = x} K_I prod_{k != axis} a_k[i_k]`.
    fn contract_linear(&self, axis: usize, a: &[Vec<f64>]) -> Vec<f64> {
        let m = self.m;
        let others = self.others(axis);
        match (self.kernel.structure(), self.n) {
            (KernelStructure::Pairwise { .. }, 2) => {
                let p = others[0];
                let k = self.lin(axis, p);
                let ap = &a[p];
                (0..m)
                    .into_par_iter()
                    .map(|x| {
                        k.row(x)
                            .iter()
                            .zip(ap)
                            .map(|(kv, av)| kv * av)
                            .sum::<f64>()
                    })
                    .collect()
            }
            (KernelStructure::Pairwise { .. }, 3) => {
                let (p, q) = (others[0], others[1]);
                let (kjp, kjq, kpq) = (self.lin(axis, p), self.lin(axis, q), self.lin(p, q));
                let (ap, aq) = (&a[p], &a[q]);
                (0..m)
                    .into_par_iter()
                    .map_init(
                        || vec![0.0; m],
                        |v, x| {
                            for ((vz, kz), az) in v.iter_mut().zip(kjq.row(x)).zip(aq) {
                                *vz = kz * az;
                            }
                            let mut s = 0.0;
                            for y in 0..m {
                                let w = kjp[[x, y]] * ap[y];
                                if w == 0.0 {
                                    continue;
                                }
                                let inner: f64 =
                                    kpq.row(y).iter().zip(v.iter()).map(|(k, vz)| k * vz).sum();
                                s += w * inner;
                            }
                            s
                        },
                    )
                    .collect()
            }
            (KernelStructure::Triple { .. }, _) => {
                let (p, q) = (others[0], others[1]);
                let (ap, aq) = (&a[p], &a[q]);
                (0..m)
                    .into_par_iter()
                    .map(|x| {
                        let mut idx = [0usize; 3];
                        idx[axis] = x;
                        let mut s = 0.0;
                        for y in 0..m {
                            if ap[y] == 0.0 {
                                continue;
                            }
                            idx[p] = y;
                            let mut inner = 0.0;
                            for z in 0..m {
                                idx[q] = z;
                                inner += self.kernel.value(&idx) * aq[z];
                            }
                            s += ap[y] * inner;
                        }
                        s
                    })
                    .collect()
            }
            _ => self.contract_generic(axis, a, EvaluationMode::Linear),
        }
    }

    /// Log-domain contraction: `log s(x)` with `b = log a`.
    fn contract_log(&self, axis: usize, b: &[Vec<f64>]) -> Vec<f64> {
        let m = self.m;
        let others = self.others(axis);
        match (self.kernel.structure(), self.n) {
            (KernelStructure::Pairwise { .. }, 2) => {
                let p = others[0];
                let l = self.logk(axis, p);
                let bp = &b[p];
                (0..m)
                    .into_par_iter()
                    .map_init(
                        || vec![0.0; m],
                        |buf, x| {
                            for ((t, lv), bv) in buf.iter_mut().zip(l.row(x)).zip(bp) {
                                *t = lv + bv;
                            }
                            lse(buf)
                        },
                    )
                    .collect()
            }
            (KernelStructure::Pairwise { .. }, 3) => {
                let (p, q) = (others[0], others[1]);
                let (ljp, ljq, lpq) = (self.logk(axis, p), self.logk(axis, q), self.logk(p, q));
                let (bp, bq) = (&b[p], &b[q]);
                (0..m)
                    .into_par_iter()
                    .map_init(
                        || (vec![0.0; m], vec![0.0; m], vec![0.0; m]),
                        |(v, buf, outer), x| {
                            for ((vz, lz), bz) in v.iter_mut().zip(ljq.row(x)).zip(bq) {
                                *vz = lz + bz;
                            }
                            for y in 0..m {
                                let head = ljp[[x, y]] + bp[y];
                                if head == f64::NEG_INFINITY {
                                    outer[y] = head;
                                    continue;
                                }
                                for ((t, l), vz) in buf.iter_mut().zip(lpq.row(y)).zip(v.iter()) {
                                    *t = l + vz;
                                }
                                outer[y] = head + lse(buf);
                            }
                            lse(outer)
                        },
                    )
                    .collect()
            }
            (KernelStructure::Triple { .. }, _) => {
                let (p, q) = (others[0], others[1]);
                let (bp, bq) = (&b[p], &b[q]);
                (0..m)
                    .into_par_iter()
                    .map_init(
                        || (vec![0.0; m], vec![0.0; m]),
                        |(buf, outer), x| {
                            let mut idx = [0usize; 3];
                            idx[axis] = x;
                            for y in 0..m {
                                if bp[y] == f64::NEG_INFINITY {
                                    outer[y] = f64::NEG_INFINITY;
                                    continue;
                                }
                                idx[p] = y;
                                for z in 0..m {
                                    idx[q] = z;
                                    buf[z] = self.kernel.log_value(&idx) + bq[z];
                                }
                                outer[y] = bp[y] + lse(buf);
                            }
                            lse(outer)
                        },
                    )
                    .collect()
            }
            _ => self.contract_generic(axis, b, EvaluationMode::Log),
        }
    }

    /// Brute-force contraction over all `M^(N-1)` complementary indices.
    fn contract_generic(&self, axis: usize, a: &[Vec<f64>], mode: EvaluationMode) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let total = m.pow((n - 1) as u32);
        (0..m)
            .into_par_iter()
            .map(|x| {
                let mut idx = vec![0usize; n];
                idx[axis] = x;
                let mut terms = Vec::with_capacity(if mode == EvaluationMode::Log { total } else { 0 });
                let mut s = 0.0;
                for flat in 0..total {
                    let mut rem = flat;
                    for k in (0..n).rev() {
                        if k == axis {
                            continue;
                        }
                        idx[k] = rem % m;
                        rem /= m;
                    }
                    match mode {
                        EvaluationMode::Linear => {
                            let mut v = self.kernel.value(&idx);
                            for k in 0..n {
                                if k != axis {
                                    v *= a[k][idx[k]];
                                }
                            }
                            s += v;
                        }
                        EvaluationMode::Log => {
                            let mut v = self.kernel.log_value(&idx);
                            for k in 0..n {
                                if k != axis {
                                    v += a[k][idx[k]];
                                }
                            }
                            terms.push(v);
                        }
                    }
                }
                match mode {
                    EvaluationMode::Linear => s,
                    EvaluationMode::Log => lse(&terms),
                }
            })
            .collect()
    }

    fn contract(&self, axis: usize, state: &[Vec<f64>], mode: EvaluationMode) -> Vec<f64> {
        match mode {
            EvaluationMode::Linear => self.contract_linear(axis, state),
            EvaluationMode::Log => self.contract_log(axis, state),
        }
    }
}

/// Linear mode hit zero, infinite or NaN values.
struct Breakdown;

fn update(
    axis: usize,
    rho: &[f64],
    s: &[f64],
    mode: EvaluationMode,
    out: &mut [f64],
) -> Result<std::result::Result<(), Breakdown>> {
    match mode {
        EvaluationMode::Linear => {
            for (x, (o, (&r, &sv))) in out.iter_mut().zip(rho.iter().zip(s)).enumerate() {
                if r == 0.0 {
                    *o = 0.0;
                    continue;
                }
                let _ = x;
                let a = r / sv;
                if !(sv > 0.0) || !a.is_finite() || a == 0.0 {
                    return Ok(Err(Breakdown));
                }
                *o = a;
            }
        }
        EvaluationMode::Log => {
            for (x, (o, (&r, &sv))) in out.iter_mut().zip(rho.iter().zip(s)).enumerate() {
                if r == 0.0 {
                    *o = f64::NEG_INFINITY;
                    continue;
                }
                if sv == f64::NEG_INFINITY {
                    return Err(Error::Infeasible { axis, index: x });
                }
                if !sv.is_finite() {
                    return Err(Error::Singular(format!(
                        "non-finite log contraction on axis {axis} at index {x}"
                    )));
                }
                *o = r.ln() - sv;
            }
        }
    }
    Ok(Ok(()))
}

/// Marginal of axis `k` from its scaling and contraction.
fn marginal_from(a: &[f64], s: &[f64], mode: EvaluationMode) -> Vec<f64> {
    match mode {
        EvaluationMode::Linear => a.iter().zip(s).map(|(x, y)| if *x == 0.0 { 0.0 } else { x * y }).collect(),
        EvaluationMode::Log => a
            .iter()
            .zip(s)
            .map(|(x, y)| if *x == f64::NEG_INFINITY { 0.0 } else { (x + y).exp() })
            .collect(),
    }
}

/// Rows with positive weight but no finite-cost partner can never be fed.
fn check_structural_feasibility(kernel: &GibbsKernel, marginals: &Marginals) -> Result<()> {
    if let KernelStructure::Pairwise { .. } = kernel.structure() {
        let n = kernel.n_marginals();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let c = kernel.pair_cost(i, j).unwrap();
                let (ri, rj) = (marginals.get(i), marginals.get(j));
                for x in 0..kernel.size() {
                    if ri[x] == 0.0 {
                        continue;
                    }
                    let feasible = (0..kernel.size()).any(|y| {
                        let cost = if i < j { c[[x, y]] } else { c[[y, x]] };
                        rj[y] > 0.0 && cost.is_finite()
                    });
                    if !feasible {
                        return Err(Error::Infeasible { axis: i, index: x });
                    }
                }
            }
        }
    }
    Ok(())
}

/// IPFP from the default initialization.
pub fn ipfp_solve(
    kernel: &GibbsKernel,
    marginals: &Marginals,
    config: &SolverConfig,
) -> Result<IpfpOutcome> {
    ipfp_solve_from(kernel, marginals, config, ScalingState::initial(marginals, config.mode))
}

/// IPFP from a given state (warm start).
pub fn ipfp_solve_from(
    kernel: &GibbsKernel,
    marginals: &Marginals,
    config: &SolverConfig,
    initial: ScalingState,
) -> Result<IpfpOutcome> {
    config.validate()?;
    config.check_epsilon(kernel.epsilon())?;
    let n = kernel.n_marginals();
    if marginals.len() != n || marginals.size() != kernel.size() {
        return Err(Error::Shape(format!(
            "kernel is {n} x {} but marginals are {} x {}",
            kernel.size(),
            marginals.len(),
            marginals.size()
        )));
    }
    if initial.n_marginals() != n || initial.size() != kernel.size() {
        return Err(Error::Shape("initial state does not match the kernel".into()));
    }
    check_structural_feasibility(kernel, marginals)?;

    let start = initial.clone().into_mode(config.mode);
    match run(kernel, marginals, config, start, config.mode)? {
        Ok(outcome) => Ok(outcome),
        Err(Breakdown) => {
            warn!(
                "linear-domain IPFP broke down at eps = {}; restarting in log domain",
                kernel.epsilon()
            );
            let start = initial.into_mode(EvaluationMode::Log);
            match run(kernel, marginals, config, start, EvaluationMode::Log)? {
                Ok(mut outcome) => {
                    outcome.restarted_in_log_domain = true;
                    Ok(outcome)
                }
                Err(Breakdown) => unreachable!("log mode never reports breakdown"),
            }
        }
    }
}

fn run(
    kernel: &GibbsKernel,
    marginals: &Marginals,
    config: &SolverConfig,
    mut state: ScalingState,
    mode: EvaluationMode,
) -> Result<std::result::Result<IpfpOutcome, Breakdown>> {
    let n = kernel.n_marginals();
    let engine = Engine::new(kernel, mode);
    let order = sweep_order(n);
    let eps = kernel.epsilon();
    let mut history = Vec::new();
    let mut cached: Option<(usize, Vec<f64>)> = None;
    let mut residual = MarginalResidual {
        linf: vec![f64::INFINITY; n],
        l1: vec![f64::INFINITY; n],
    };
    let mut sweeps = 0;
    let mut converged = false;

    while sweeps < config.max_sweeps {
        let mut last_s = Vec::new();
        for &axis in &order {
            let s = match cached.take() {
                Some((k, s)) if k == axis => s,
                _ => engine.contract(axis, &state.vectors, mode),
            };
            let mut next = vec![0.0; kernel.size()];
            if let Err(b) = update(axis, marginals.get(axis), &s, mode, &mut next)? {
                return Ok(Err(b));
            }
            state.vectors[axis] = next;
            last_s = s;
        }
        sweeps += 1;
        state.sweep_count += 1;

        // Marginals of the current plan; the last-updated axis reuses its
        // contraction, the first axis of the next sweep is cached.
        let last = *order.last().unwrap();
        let mut margs: Vec<Vec<f64>> = vec![Vec::new(); n];
        for k in 0..n {
            if k == last {
                margs[k] = marginal_from(&state.vectors[k], &last_s, mode);
            } else {
                let s = engine.contract(k, &state.vectors, mode);
                if mode == EvaluationMode::Linear && s.iter().any(|v| !v.is_finite()) {
                    return Ok(Err(Breakdown));
                }
                margs[k] = marginal_from(&state.vectors[k], &s, mode);
                if k == order[0] {
                    cached = Some((k, s));
                }
            }
        }
        residual = MarginalResidual::from_marginals(margs.iter().map(|v| v.as_slice()), marginals);
        if mode == EvaluationMode::Linear && !residual.max_linf().is_finite() {
            return Ok(Err(Breakdown));
        }
        if config.record_history {
            let mut objective = 0.0;
            for (k, m) in margs.iter().enumerate() {
                let la = state.log_vector(k);
                for (l, w) in la.iter().zip(m) {
                    if *w > 0.0 {
                        objective += eps * l * w;
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

    Ok(Ok(IpfpOutcome {
        state,
        residual,
        history,
        converged,
        sweeps,
        restarted_in_log_domain: false,
    }))
}

fn log_scalings(state: &ScalingState) -> Vec<Vec<f64>> {
    (0..state.n_marginals()).map(|k| state.log_vector(k)).collect()
}

fn entry(kernel: &GibbsKernel, b: &[Vec<f64>], idx: &[usize]) -> f64 {
    let mut v = kernel.log_value(idx);
    for (k, &i) in idx.iter().enumerate() {
        v += b[k][i];
    }
    if v == f64::NEG_INFINITY || v.is_nan() {
        0.0
    } else {
        v.exp()
    }
}

/// Dense plan `gamma_I = exp(sum_k log a_k[i_k] - c_I / eps)`.
pub fn plan_from_scalings(kernel: &GibbsKernel, state: &ScalingState) -> TransportPlan {
    let b = log_scalings(state);
    let shape = vec![kernel.size(); kernel.n_marginals()];
    let a = ArrayD::from_shape_fn(IxDyn(&shape), |idx| entry(kernel, &b, idx.slice()));
    TransportPlan::dense(a, kernel.epsilon()).expect("entries are nonnegative")
}

/// Plan entries at or above `min_weight`, as a coordinate list.
pub fn sparse_plan_from_scalings(
    kernel: &GibbsKernel,
    state: &ScalingState,
    min_weight: f64,
) -> TransportPlan {
    let b = log_scalings(state);
    let (n, m) = (kernel.n_marginals(), kernel.size());
    let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|x| {
            let mut idx = vec![0usize; n];
            idx[0] = x;
            let mut indices = Vec::new();
            let mut weights = Vec::new();
            let rest = m.pow((n - 1) as u32);
            for flat in 0..rest {
                let mut r = flat;
                for k in (1..n).rev() {
                    idx[k] = r % m;
                    r /= m;
                }
                let w = entry(kernel, &b, &idx);
                if w >= min_weight && w > 0.0 {
                    indices.extend_from_slice(&idx);
                    weights.push(w);
                }
            }
            (indices, weights)
        })
        .collect();
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    for (i, w) in rows {
        indices.extend(i);
        weights.extend(w);
    }
    let sp = SparsePlan::new(vec![m; n], indices, weights).expect("indices in range");
    TransportPlan::sparse(sp, kernel.epsilon())
}

/// Two-marginal projection `pi_ij` of the plan, without materializing it.
pub fn pair_projection(
    kernel: &GibbsKernel,
    state: &ScalingState,
    i: usize,
    j: usize,
) -> Result<Array2<f64>> {
    let (n, m) = (kernel.n_marginals(), kernel.size());
    if i >= n || j >= n || i == j {
        return Err(Error::Shape(format!("invalid axis pair ({i}, {j}) for N = {n}")));
    }
    let b = log_scalings(state);
    let rest: Vec<usize> = (0..n).filter(|k| *k != i && *k != j).collect();
    let inner = m.pow(rest.len() as u32);
    let data: Vec<f64> = (0..m)
        .into_par_iter()
        .flat_map_iter(|x| {
            let b = &b;
            let rest = &rest;
            (0..m).map(move |y| {
                let mut idx = vec![0usize; n];
                idx[i] = x;
                idx[j] = y;
                let mut terms = Vec::with_capacity(inner);
                for flat in 0..inner {
                    let mut r = flat;
                    for &k in rest.iter().rev() {
                        idx[k] = r % m;
                        r /= m;
                    }
                    let mut v = kernel.log_value(&idx);
                    for (k, &ik) in idx.iter().enumerate() {
                        v += b[k][ik];
                    }
                    terms.push(v);
                }
                let l = lse(&terms);
                if l == f64::NEG_INFINITY || l.is_nan() {
                    0.0
                } else {
                    l.exp()
                }
            })
        })
        .collect();
    Ok(Array2::from_shape_vec((m, m), data).expect("square"))
}
