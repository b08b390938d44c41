//! Exact co-motion maps and Kantorovich potentials used as ground truth.

use std::sync::Arc;

use crate::cost::coulomb_total_1d;
use crate::densities::{DiscreteDensity, Quantile};
use crate::error::{invalid, Error, Result};

/// A transport map `x -> f(x)` with a closed form or a quantile construction.
#[derive(Debug, Clone)]
pub enum ComotionMap {
    /// Uniform density on `[-a/2, a/2]`, two electrons.
    UniformN2 { a: f64 },
    /// Tent density on `[-a, a]`, two electrons.
    Triangular { a: f64 },
    /// `steps`-fold composition of the cyclic quantile shift by `1/n` of the mass.
    QuantileShift {
        quantile: Arc<Quantile>,
        n: usize,
        steps: usize,
    },
    /// Radial two-electron map `a(r) = R^-1(total - R(r))`.
    RadialN2 { quantile: Arc<Quantile> },
}

impl ComotionMap {
    pub fn label(&self) -> String {
        match self {
            ComotionMap::UniformN2 { a } => format!("uniform-n2(a={a})"),
            ComotionMap::Triangular { a } => format!("triangular(a={a})"),
            ComotionMap::QuantileShift { n, steps, .. } => format!("quantile-shift(N={n}, i={})", steps + 1),
            ComotionMap::RadialN2 { .. } => "radial-n2".to_string(),
        }
    }

    /// Closed interval on which the map is defined.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            ComotionMap::UniformN2 { a } => (-a / 2.0, a / 2.0),
            ComotionMap::Triangular { a } => (-a, *a),
            ComotionMap::QuantileShift { quantile, .. } | ComotionMap::RadialN2 { quantile } => {
                let g = quantile.density().grid();
                (g.lo(), g.hi())
            }
        }
    }

    fn check(&self, x: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        if !(lo..=hi).contains(&x) {
            return Err(Error::Domain { value: x, lo, hi });
        }
        Ok(())
    }

    pub fn evaluate(&self, x: f64) -> Result<f64> {
        self.check(x)?;
        match self {
            ComotionMap::UniformN2 { a } => Ok(if x < 0.0 { x + a / 2.0 } else { x - a / 2.0 }),
            ComotionMap::Triangular { a } => {
                if x == 0.0 {
                    return Ok(-*a);
                }
                let r = x.abs();
                Ok(x.signum() * ((2.0 * a * r - r * r).max(0.0).sqrt() - a))
            }
            ComotionMap::QuantileShift { quantile, n, steps } => {
                let mut y = x;
                for _ in 0..*steps {
                    y = quantile_shift(quantile, *n, y)?;
                }
                Ok(y)
            }
            ComotionMap::RadialN2 { quantile } => {
                // Invert from whichever end holds the smaller mass.
                let left = quantile.cdf(x);
                let right = quantile.survival(x);
                if right <= left {
                    quantile.inverse_cdf(right)
                } else {
                    quantile.inverse_survival(left)
                }
            }
        }
    }

    /// `k`-fold composition `f(f(...f(x)))`.
    pub fn iterate(&self, x: f64, k: usize) -> Result<f64> {
        let mut y = x;
        for _ in 0..k {
            y = self.evaluate(y)?;
        }
        Ok(y)
    }

    pub fn evaluate_all(&self, xs: &[f64]) -> Result<Vec<f64>> {
        xs.iter().map(|&x| self.evaluate(x)).collect()
    }
}

/// One step of the cyclic map: `F(f(x)) = F(x) + 1/N`, wrapping on the last interval.
fn quantile_shift(q: &Quantile, n: usize, x: f64) -> Result<f64> {
    let total = q.total_mass();
    let w = q.cdf(x);
    let step = total / n as f64;
    let target = if w <= total - step {
        w + step
    } else {
        w - (total - step)
    };
    q.inverse_cdf(target.clamp(0.0, total))
}

pub fn comotion_uniform_n2(a: f64) -> Result<ComotionMap> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(invalid(format!("a must be positive, got {a}")));
    }
    Ok(ComotionMap::UniformN2 { a })
}

/// `f(x) = sign(x) (sqrt(2a|x| - x^2) - a)`; at 0 the left limit `-a`.
pub fn comotion_triangular(a: f64) -> Result<ComotionMap> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(invalid(format!("a must be positive, got {a}")));
    }
    Ok(ComotionMap::Triangular { a })
}

/// Maps `f_2, ..., f_N` for `N` electrons on the line, `f_i` being the
/// `(i-1)`-fold composition of the quantile shift.
pub fn comotion_multi_1d(density: &DiscreteDensity, n: usize) -> Result<Vec<ComotionMap>> {
    if n < 2 {
        return Err(invalid(format!("need N >= 2, got {n}")));
    }
    let share = density.total_mass() / n as f64;
    if let Some(k) = density.weights().iter().position(|w| *w > share) {
        return Err(invalid(format!(
            "cell {k} holds more than 1/N of the mass; the construction needs a diffuse density"
        )));
    }
    let quantile = Arc::new(density.quantile());
    Ok((1..n)
        .map(|steps| ComotionMap::QuantileShift {
            quantile: quantile.clone(),
            n,
            steps,
        })
        .collect())
}

/// Piecewise-linear function on consecutive intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePotential {
    breakpoints: Vec<f64>,
    slopes: Vec<f64>,
    intercepts: Vec<f64>,
}

impl PiecewisePotential {
    /// `breakpoints` has one more entry than `slopes`; piece `k` is
    /// `slopes[k] * x + intercepts[k]` on `[b_k, b_{k+1}]`.
    pub fn new(breakpoints: Vec<f64>, slopes: Vec<f64>, intercepts: Vec<f64>) -> Result<Self> {
        if slopes.is_empty() || breakpoints.len() != slopes.len() + 1 || intercepts.len() != slopes.len() {
            return Err(Error::Shape("breakpoints must outnumber pieces by one".into()));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("breakpoints must increase"));
        }
        Ok(Self {
            breakpoints,
            slopes,
            intercepts,
        })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.intercepts
    }

    pub fn evaluate(&self, x: f64) -> Result<f64> {
        let (lo, hi) = (self.breakpoints[0], *self.breakpoints.last().unwrap());
        if !(lo..=hi).contains(&x) {
            return Err(Error::Domain { value: x, lo, hi });
        }
        let k = self.breakpoints[1..self.breakpoints.len() - 1].partition_point(|&b| b < x);
        Ok(self.slopes[k] * x + self.intercepts[k])
    }

    /// Largest jump between the two one-sided values at interior breakpoints.
    pub fn max_discontinuity(&self) -> f64 {
        (1..self.slopes.len())
            .map(|k| {
                let b = self.breakpoints[k];
                let left = self.slopes[k - 1] * b + self.intercepts[k - 1];
                let right = self.slopes[k] * b + self.intercepts[k];
                (left - right).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Potential for three electrons with uniform density on `[0, 1]`.
pub fn potential_uniform_n3() -> PiecewisePotential {
    PiecewisePotential::new(
        vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
        vec![45.0 / 4.0, 0.0, -45.0 / 4.0],
        vec![0.0, 15.0 / 4.0, 45.0 / 4.0],
    )
    .expect("static pieces")
}

/// Potential for two electrons with uniform density on `[-a/2, a/2]`:
/// `u(x) = 2/a - 4|x|/a^2`, normalized so that `u(x) + u(f(x)) = c(x, f(x))`.
pub fn potential_uniform_n2(a: f64) -> Result<PiecewisePotential> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(invalid(format!("a must be positive, got {a}")));
    }
    let s = 4.0 / (a * a);
    PiecewisePotential::new(vec![-a / 2.0, 0.0, a / 2.0], vec![s, -s], vec![2.0 / a, 2.0 / a])
}

/// A potential sampled on grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPotential {
    pub points: Vec<f64>,
    pub values: Vec<f64>,
}

/// Trapezoid sub-steps per grid interval; resolves the jumps of `u'`.
const SUBSTEPS: usize = 32;

/// Integrates `u'(x) = -sum_i (x - f_i(x)) / |x - f_i(x)|^3` along the grid.
///
/// The constant is fixed by `N sum_j u_j rho_j = sum_j c(x_j, f_2(x_j), ...) rho_j`.
pub fn potential_from_maps(maps: &[ComotionMap], density: &DiscreteDensity) -> Result<SampledPotential> {
    if maps.is_empty() {
        return Err(invalid("need at least one map"));
    }
    let n = maps.len() + 1;
    let xs = density.points();
    let weights = density.weights();
    let derivative = |x: f64| -> Result<f64> {
        let mut d = 0.0;
        for f in maps {
            let diff = x - f.evaluate(x)?;
            if diff.abs() < 1e-12 {
                return Err(Error::Singular(format!("map {} touches the identity at x = {x}", f.label())));
            }
            d -= diff.signum() / (diff * diff);
        }
        Ok(d)
    };
    let mut values = Vec::with_capacity(xs.len());
    let mut u = 0.0;
    values.push(u);
    for w in xs.windows(2) {
        let h = (w[1] - w[0]) / SUBSTEPS as f64;
        let mut prev = derivative(w[0])?;
        for s in 1..=SUBSTEPS {
            let x = if s == SUBSTEPS { w[1] } else { w[0] + s as f64 * h };
            let next = derivative(x)?;
            u += 0.5 * h * (prev + next);
            prev = next;
        }
        values.push(u);
    }
    let mass = density.total_mass();
    let mut energy = 0.0;
    for (&x, &w) in xs.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let mut pts = vec![x];
        for f in maps {
            pts.push(f.evaluate(x)?);
        }
        energy += coulomb_total_1d(&pts) * w;
    }
    let current: f64 = values.iter().zip(weights).map(|(u, w)| u * w).sum();
    let shift = (energy / n as f64 - current) / mass;
    for v in values.iter_mut() {
        *v += shift;
    }
    Ok(SampledPotential {
        points: xs.to_vec(),
        values,
    })
}

/// `|sum phi(f(x)) w - sum phi(y) w|` on the density's grid.
pub fn pushforward_defect(map: &ComotionMap, density: &DiscreteDensity, phi: impl Fn(f64) -> f64) -> Result<f64> {
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for (&x, &w) in density.points().iter().zip(density.weights()) {
        lhs += phi(map.evaluate(x)?) * w;
        rhs += phi(x) * w;
    }
    Ok((lhs - rhs).abs())
}
