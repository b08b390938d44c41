//! Reduction of spherically symmetric problems to a transport problem over radii.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::analytic::ComotionMap;
use crate::cost::{build_kernel, reduced_cost_angles, CoulombCostSpec, GibbsKernel};
use crate::densities::{radialize, sphere_measure, DiscreteDensity, Grid1D};
use crate::error::{invalid, Error, Result};
use crate::solver::Marginals;

/// The radial marginal `lambda = |.| # rho` with its reduced cost.
#[derive(Debug, Clone)]
pub struct RadialProblem {
    lambda: DiscreteDensity,
    spec: CoulombCostSpec,
}

impl RadialProblem {
    pub fn lambda(&self) -> &DiscreteDensity {
        &self.lambda
    }

    pub fn spec(&self) -> CoulombCostSpec {
        self.spec
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension
    }

    pub fn n_marginals(&self) -> usize {
        self.spec.n_marginals
    }

    pub fn kernel(&self, epsilon: f64) -> Result<GibbsKernel> {
        build_kernel(self.spec, self.lambda.grid(), epsilon)
    }

    pub fn marginals(&self) -> Marginals {
        Marginals::identical(&self.lambda, self.spec.n_marginals)
    }
}

/// Builds `lambda(r) = |S^{d-1}| r^{d-1} rho(r)` from a radial profile.
pub fn reduce_problem(rho_radial: &DiscreteDensity, d: usize, n: usize) -> Result<RadialProblem> {
    if rho_radial.grid().lo() < 0.0 {
        return Err(invalid("radial grid must start at r >= 0"));
    }
    let lambda = radialize(rho_radial, d)?;
    let spec = CoulombCostSpec::radial(n, d)?;
    Ok(RadialProblem { lambda, spec })
}

/// Wraps an already radialized density (for example one read from file).
pub fn problem_from_lambda(lambda: DiscreteDensity, d: usize, n: usize) -> Result<RadialProblem> {
    if lambda.grid().lo() < 0.0 {
        return Err(invalid("radial grid must start at r >= 0"));
    }
    let spec = CoulombCostSpec::radial(n, d)?;
    Ok(RadialProblem { lambda, spec })
}

/// `a(r) = R^-1(total - R(r))` with `R` the cdf of `lambda`.
pub fn radial_comotion_n2(lambda: &DiscreteDensity) -> Result<ComotionMap> {
    if lambda.grid().lo() < 0.0 {
        return Err(invalid("radial density must live on r >= 0"));
    }
    Ok(ComotionMap::RadialN2 {
        quantile: Arc::new(lambda.quantile()),
    })
}

/// Full-space map `f(x) = -(x/|x|) a(|x|)`; the origin maps to the outer edge.
pub fn full_space_map(radial: &ComotionMap, x: &[f64]) -> Result<Vec<f64>> {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let a = radial.evaluate(r)?;
    if r == 0.0 {
        let mut out = vec![0.0; x.len()];
        if let Some(first) = out.first_mut() {
            *first = a;
        }
        return Ok(out);
    }
    Ok(x.iter().map(|v| -v / r * a).collect())
}

/// Optimal relative angles at fixed radii: `[theta2]` for two electrons
/// (always `pi`), `[theta2, theta3]` for three.
pub fn angular_report(radii: &[f64], d: usize) -> Result<Vec<f64>> {
    reduced_cost_angles(radii, d)
}

/// Smallest `r_max` with `int_{r_max}^inf lambda < tail * int_0^inf lambda`
/// for `lambda(r) = |S^{d-1}| r^{d-1} rho(r)`.
pub fn choose_r_max(rho: impl Fn(f64) -> f64, d: usize, tail: f64) -> Result<f64> {
    if !(tail > 0.0 && tail < 1.0) {
        return Err(invalid(format!("tail fraction must lie in (0, 1), got {tail}")));
    }
    let c = sphere_measure(d)?;
    let lambda = |r: f64| c * r.powi(d as i32 - 1) * rho(r);
    const STEPS: usize = 1 << 14;
    let integrate = |hi: f64| -> Vec<f64> {
        // Cumulative trapezoid on [0, hi].
        let h = hi / STEPS as f64;
        let mut acc = vec![0.0; STEPS + 1];
        let mut prev = lambda(0.0);
        for k in 1..=STEPS {
            let next = lambda(k as f64 * h);
            acc[k] = acc[k - 1] + 0.5 * h * (prev + next);
            prev = next;
        }
        acc
    };
    let mut hi = 1.0;
    for _ in 0..40 {
        let acc = integrate(hi);
        let total = acc[STEPS];
        if !(total.is_finite()) {
            return Err(invalid("radial density is not integrable"));
        }
        let half = acc[STEPS / 2];
        if total > 0.0 && total - half < 1e-3 * tail * total {
            let k = acc.partition_point(|&v| v < (1.0 - tail) * total);
            return Ok(hi * k.min(STEPS) as f64 / STEPS as f64);
        }
        hi *= 2.0;
    }
    Err(Error::Domain {
        value: hi,
        lo: 0.0,
        hi: f64::INFINITY,
    })
}

/// Uniform cell-centred radial grid on `[0, r_max]`.
pub fn radial_grid(r_max: f64, m: usize) -> Result<Grid1D> {
    Grid1D::uniform(0.0, r_max, m)
}

/// The two-electron answer the three-electron angles approach as one radius grows.
pub const ANTIPODAL: f64 = PI;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::pushforward_defect;
    use crate::cost::{coulomb_pair, reduced_cost};
    use crate::densities::make_ball_profile;

    fn ball_lambda(m: usize) -> DiscreteDensity {
        reduce_problem(&make_ball_profile(m).unwrap(), 3, 2).unwrap().lambda().clone()
    }

    #[test]
    fn ball_map_matches_cube_root() {
        let lambda = ball_lambda(2000);
        let a = radial_comotion_n2(&lambda).unwrap();
        let exact = (1.0f64 - 0.125).cbrt();
        assert!((exact - 0.956466).abs() < 1e-6);
        assert!((a.evaluate(0.5).unwrap() - exact).abs() < 1e-3);
        let median = lambda.quantile().inverse_cdf(0.5).unwrap();
        assert!((a.evaluate(median).unwrap() - median).abs() < 1e-12);
    }

    #[test]
    fn ball_map_is_decreasing_involution() {
        let lambda = ball_lambda(1000);
        let a = radial_comotion_n2(&lambda).unwrap();
        let q = lambda.quantile();
        let mut prev = f64::INFINITY;
        for &r in lambda.points() {
            let y = a.evaluate(r).unwrap();
            assert!(y < prev);
            prev = y;
            // Near r = 0 one ulp of a(r) ~ 1 is worth more than 1e-10 in r.
            if q.cdf(r) > 1e-6 && q.survival(r) > 1e-6 {
                assert!((a.iterate(r, 2).unwrap() - r).abs() < 1e-10, "r = {r}");
            }
        }
        for p in 1..4 {
            assert!(pushforward_defect(&a, &lambda, |r| r.powi(p)).unwrap() < 2e-3);
        }
    }

    #[test]
    fn two_electron_convention_scales() {
        // Mass-two normalization: a(r) = R^-1(2 - R(r)) gives the same map.
        let lambda = ball_lambda(500);
        let doubled = lambda.with_total_mass(2.0).unwrap();
        let a1 = radial_comotion_n2(&lambda).unwrap();
        let a2 = radial_comotion_n2(&doubled).unwrap();
        for &r in lambda.points().iter().step_by(37) {
            assert!((a1.evaluate(r).unwrap() - a2.evaluate(r).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn full_space_map_is_antipodal() {
        let a = radial_comotion_n2(&ball_lambda(400)).unwrap();
        let y = full_space_map(&a, &[0.0, 0.3, 0.4]).unwrap();
        let ar = a.evaluate(0.5).unwrap();
        assert!((y[1] + 0.6 * ar).abs() < 1e-12 && (y[2] + 0.8 * ar).abs() < 1e-12);
    }

    #[test]
    fn angles() {
        assert_eq!(angular_report(&[0.3, 0.9], 3).unwrap(), vec![PI]);
        let t = angular_report(&[1.0, 1.0, 1.0], 3).unwrap();
        // Equilateral: the other two electrons sit 120 degrees away.
        assert!((t[0] - 2.0 * PI / 3.0).abs() < 1e-6, "{t:?}");
        let far = angular_report(&[1.0, 1.0, 1e4], 3).unwrap();
        assert!((far[0] - ANTIPODAL).abs() < 1e-2, "{far:?}");
    }

    #[test]
    fn antipodal_lift_has_reduced_cost_and_projection_lowers_cost() {
        let lambda = ball_lambda(20);
        let r = lambda.points();
        // Lift: (r, s) -> (r e, -s e) has Coulomb cost 1 / (r + s).
        for i in 0..20 {
            for j in 0..20 {
                let lifted = coulomb_pair(&[r[i], 0.0, 0.0], &[-r[j], 0.0, 0.0]);
                assert!((lifted - reduced_cost(&[r[i], r[j]], 3).unwrap()).abs() < 1e-12);
            }
        }
        // Any placement costs at least the reduced cost of its radii.
        for k in 0..50 {
            let t = k as f64 * 0.13;
            let x = [r[3] * t.cos(), r[3] * t.sin(), 0.0];
            let y = [0.0, r[11] * (2.0 * t).sin(), r[11] * (2.0 * t).cos()];
            assert!(coulomb_pair(&x, &y) >= reduced_cost(&[r[3], r[11]], 3).unwrap() - 1e-14);
        }
    }

    #[test]
    fn r_max_for_exponential_tail() {
        // rho = exp(-2r) in 3D: lambda ~ r^2 exp(-2r), Gamma(3, 1/2).
        let r = choose_r_max(|r| (-2.0 * r).exp(), 3, 1e-8).unwrap();
        let tail = |r: f64| (-2.0 * r).exp() * (1.0 + 2.0 * r + 2.0 * r * r);
        assert!(tail(r) < 1.05e-8 && tail(r) > 0.5e-8, "r_max = {r}, tail = {}", tail(r));
        assert!(choose_r_max(|r| (-r).exp(), 3, 1.5).is_err());
    }
}
