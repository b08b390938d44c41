mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use mmot::analytic::{
    comotion_multi_1d, comotion_triangular, comotion_uniform_n2, potential_from_maps, ComotionMap,
};
use mmot::cost::{build_kernel, CoulombCostSpec, GibbsKernel, GridCost};
use mmot::densities::{
    make_ball_profile, make_triangular, make_uniform, make_uniform_interval, radialize, DiscreteDensity, Grid1D,
};
use mmot::radial::{radial_comotion_n2, reduce_problem};
use mmot::recovery::{dual_feasibility, map_from_plan, potential_from_scalings, project_pair, sce_energy, WeakDuality};
use mmot::refine::{prune_to_total_support, refine_solve, resample_density, LevelPlan, RefinementConfig};
use mmot::solver::{
    bregman_solve, gibbs_plan, ipfp_solve, kl_project, plan_from_scalings, EvaluationMode, Marginals, SolverConfig,
    TransportPlan,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn solve_potential_error(
    density: &DiscreteDensity,
    n: usize,
    eps: f64,
    exact: impl Fn(f64) -> f64,
) -> (f64, usize, bool) {
    let kernel = build_kernel(CoulombCostSpec::full_1d(n).unwrap(), density.grid(), eps).unwrap();
    let solver = SolverConfig::for_density(eps, density);
    let out = ipfp_solve(&kernel, &Marginals::identical(density, n), &solver).unwrap();
    let u = potential_from_scalings(&out.state, eps, density).unwrap();
    let ex: Vec<f64> = density.points().iter().map(|&x| exact(x)).collect();
    (shifted_linf(&u.values, &ex, density.weights()), out.sweeps, out.converged)
}

fn nonincreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn table1() -> Verdict {
    let rho = make_uniform(2.0, 1000).unwrap();
    let mut errors = Vec::new();
    let mut ok = true;
    let mut rows = Vec::new();
    for (eps, paper) in TABLE1 {
        let (err, sweeps, converged) = solve_potential_error(&rho, 2, eps, |x| pair_potential(2.0, x));
        let ratio = err / paper;
        ok &= converged && (0.5..=2.0).contains(&ratio);
        rows.push(format!("eps={eps} err={err:.4} paper={paper} sweeps={sweeps}"));
        errors.push(err);
    }
    let mono = nonincreasing(&errors);
    verdict(ok && mono, format!("factor 2 of paper, monotone={mono}; {}", rows.join("; ")))
}

fn table2() -> Verdict {
    let rho = make_uniform_interval(0.0, 1.0, 200).unwrap();
    let mut errors = Vec::new();
    let mut rows = Vec::new();
    let mut converged_all = true;
    for (eps, _) in TABLE2 {
        let (err, sweeps, converged) = solve_potential_error(&rho, 3, eps, triple_potential);
        converged_all &= converged;
        rows.push(format!("eps={eps} err={err:.4} sweeps={sweeps}"));
        errors.push(err);
    }
    let mono = errors.windows(2).all(|w| w[1] < w[0]);
    let last = *errors.last().unwrap();
    verdict(
        converged_all && mono && last < 0.02,
        format!("M=200, decreasing={mono}, err(0.02)={last:.4} < 0.02; {}", rows.join("; ")),
    )
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (Grid1D, Vec<Vec<f64>>) {
    let mut pts: Vec<f64> = (0..m).map(|k| k as f64 + rng.random_range(0.1..0.9)).collect();
    pts.iter_mut().for_each(|p| *p /= m as f64);
    let grid = Grid1D::from_points(pts).unwrap();
    let weights = (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.8..1.2)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
        .collect();
    (grid, weights)
}

fn max_abs_diff(a: &TransportPlan, b: &TransportPlan) -> f64 {
    let (a, b) = (a.to_dense(), b.to_dense());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn bregman_vs_ipfp() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst = 0.0f64;
    let mut all_converged = true;
    for t in 0..20 {
        let n = 2 + t % 2;
        let m = rng.random_range(6..=10);
        let eps = rng.random_range(0.05..0.5);
        let (grid, weights) = random_instance(&mut rng, n, m);
        let kernel = build_kernel(CoulombCostSpec::full_1d(n).unwrap(), &grid, eps).unwrap();
        let marginals = Marginals::new(weights).unwrap();
        let cfg = SolverConfig {
            epsilon: eps,
            max_sweeps: 100_000,
            tolerance: 1e-13,
            mode: EvaluationMode::Linear,
            record_history: false,
        };
        let b = bregman_solve(&kernel, &marginals, &cfg).unwrap();
        let i = ipfp_solve(&kernel, &marginals, &cfg).unwrap();
        all_converged &= b.converged && i.converged;
        worst = worst.max(max_abs_diff(&b.plan, &plan_from_scalings(&kernel, &i.state)));
    }
    verdict(
        all_converged && worst <= 1e-8,
        format!("20 instances, max entrywise difference {worst:.2e} <= 1e-8"),
    )
}

fn lp_limit() -> Verdict {
    let rho = make_uniform(2.0, 8).unwrap();
    let x = rho.points();
    let cost: Vec<Vec<f64>> = (0..8)
        .map(|i| (0..8).map(|j| if i == j { f64::INFINITY } else { 1.0 / (x[i] - x[j]).abs() }).collect())
        .collect();
    let lp = assignment_brute_force(&cost);
    let mut values = Vec::new();
    for eps in [0.1, 0.05, 0.02, 0.01] {
        let kernel = build_kernel(CoulombCostSpec::full_1d(2).unwrap(), rho.grid(), eps).unwrap();
        let mut cfg = SolverConfig::for_density(eps, &rho);
        cfg.tolerance = 1e-14;
        let out = ipfp_solve(&kernel, &Marginals::identical(&rho, 2), &cfg).unwrap();
        let plan = plan_from_scalings(&kernel, &out.state).to_dense();
        let mut c = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    c += cost[i][j] * plan[[i, j]];
                }
            }
        }
        values.push(c);
    }
    let decreasing = values.windows(2).all(|w| w[1] < w[0]);
    let gap = values.last().unwrap() - lp;
    verdict(
        decreasing && gap.abs() <= 1e-3,
        format!("<c,gamma> = {values:.6?}, LP optimum {lp:.6}, final gap {gap:.2e} <= 1e-3"),
    )
}

struct MapCase {
    name: &'static str,
    build: fn(usize) -> (Vec<ComotionMap>, DiscreteDensity),
    involution: bool,
}

fn map_cases() -> Vec<MapCase> {
    vec![
        MapCase {
            name: "uniform N=2",
            build: |m| {
                let rho = make_uniform(2.0, m).unwrap();
                (vec![comotion_uniform_n2(2.0).unwrap()], rho)
            },
            involution: true,
        },
        MapCase {
            name: "triangular N=2",
            build: |m| {
                let rho = make_triangular(1.0, m).unwrap();
                (vec![comotion_triangular(1.0).unwrap()], rho)
            },
            involution: true,
        },
        MapCase {
            name: "uniform01 N=3",
            build: |m| {
                let rho = make_uniform_interval(0.0, 1.0, m).unwrap();
                (comotion_multi_1d(&rho, 3).unwrap(), rho)
            },
            involution: false,
        },
        MapCase {
            name: "ball radial N=2",
            build: |m| {
                let lambda = radialize(&make_ball_profile(m).unwrap(), 3).unwrap();
                (vec![radial_comotion_n2(&lambda).unwrap()], lambda)
            },
            involution: true,
        },
    ]
}

fn analytic_maps() -> Verdict {
    let phi = |x: f64| (3.0 * x).sin() + x * x;
    let c = 1.0;
    let mut ok = true;
    let mut rows = Vec::new();
    for case in map_cases() {
        let (maps100, rho100) = (case.build)(100);
        let (maps1000, rho1000) = (case.build)(1000);
        for (k, (f100, f1000)) in maps100.iter().zip(&maps1000).enumerate() {
            let eval = |f: &ComotionMap, x: f64| f.evaluate(x).unwrap();
            let d100 = pushforward_gap(rho100.points(), rho100.weights(), |x| eval(f100, x), phi);
            let d1000 = pushforward_gap(rho1000.points(), rho1000.weights(), |x| eval(f1000, x), phi);
            let exact = d100 <= 1e-12 && d1000 <= 1e-12;
            let pass = d100 <= c / 100.0 && d1000 <= c / 1000.0 && (exact || d100 / d1000 >= 5.0);
            ok &= pass;
            rows.push(format!("{} f{}: {d100:.1e}->{d1000:.1e}", case.name, k + 2));
        }
        let cdf = rho1000.quantile();
        let total = rho1000.total_mass();
        let inner = |x: f64| {
            let r = cdf.cdf(x) / total;
            r > 1e-6 && r < 1.0 - 1e-6
        };
        let order = if case.involution { 2 } else { 3 };
        let mut worst = 0.0f64;
        for f in &maps1000 {
            for &x in rho1000.points().iter().filter(|&&x| inner(x)) {
                worst = worst.max((f.iterate(x, order).unwrap() - x).abs());
            }
        }
        ok &= worst <= 1e-10;
        rows.push(format!("{} f^({order})=id {worst:.1e}", case.name));
    }
    let rho = make_uniform_interval(0.0, 1.0, 1000).unwrap();
    let u = potential_from_maps(&comotion_multi_1d(&rho, 3).unwrap(), &rho).unwrap();
    let d: Vec<f64> = u.points.iter().zip(&u.values).map(|(x, v)| v - triple_potential(*x)).collect();
    let spread = (d.iter().copied().fold(f64::NEG_INFINITY, f64::max) - d.iter().copied().fold(f64::INFINITY, f64::min)) / 2.0;
    ok &= spread <= 1e-3;
    rows.push(format!("N=3 potential vs closed form {spread:.1e} <= 1e-3"));
    verdict(ok, format!("pushforward <= {c}/M with >=5x decay, iterates <= 1e-10; {}", rows.join("; ")))
}

fn radial_pipeline() -> Verdict {
    let m = 1000;
    let eps = 0.002;
    let problem = reduce_problem(&make_ball_profile(m).unwrap(), 3, 2).unwrap();
    let lambda = problem.lambda().clone();
    let kernel = problem.kernel(eps).unwrap();
    let solver = SolverConfig::for_density(eps, &lambda);
    let out = ipfp_solve(&kernel, &problem.marginals(), &solver).unwrap();
    let plan = plan_from_scalings(&kernel, &out.state);
    let r = lambda.points();
    let h = lambda.grid().max_spacing();
    let estimate = map_from_plan(&plan, r, 0, 1).unwrap();
    let cdf = lambda.quantile();
    let mut worst = 0.0f64;
    for (&i, &y) in estimate.rows.iter().zip(&estimate.barycentric) {
        let mass = cdf.cdf(r[i]) / lambda.total_mass();
        if (0.05..=0.95).contains(&mass) {
            worst = worst.max((y - ball_map(r[i])).abs() / h);
        }
    }
    let pi = project_pair(&plan, 0, 1).unwrap();
    let total: f64 = pi.iter().sum();
    let mut inside = 0.0;
    for i in 0..m {
        let c = ((ball_map(r[i]) - r[0]) / h).round() as isize;
        for j in (c - 10).max(0)..=(c + 10).min(m as isize - 1) {
            inside += pi[[i, j as usize]];
        }
    }
    let band = inside / total;
    verdict(
        out.converged && worst <= 2.0 && band >= 0.95,
        format!(
            "converged={} in {} sweeps, barycentric L∞ {worst:.1} cells <= 2, band mass {band:.3} >= 0.95",
            out.converged, out.sweeps
        ),
    )
}

fn refinement() -> Verdict {
    let eps = 0.01;
    let rho = make_uniform(2.0, 40).unwrap();
    let mut solver = SolverConfig::for_density(eps, &rho);
    solver.mode = EvaluationMode::Log;
    let cfg = RefinementConfig {
        xi: 0.9,
        levels: 3,
        ..Default::default()
    };
    let out = refine_solve(&rho, CoulombCostSpec::full_1d(2).unwrap(), &solver, &cfg).unwrap();
    let errors: Vec<f64> = out
        .levels
        .iter()
        .map(|l| {
            let u = potential_from_scalings(&l.state, l.epsilon, &l.density).unwrap();
            let ex: Vec<f64> = u.points.iter().map(|&x| pair_potential(2.0, x)).collect();
            shifted_linf(&u.values, &ex, l.density.weights())
        })
        .collect();
    let cells: Vec<usize> = out.levels.iter().map(|l| l.report.active_cells).collect();
    let ratio_ok = cells.iter().all(|&c| {
        let r = c as f64 / cells[0] as f64;
        (0.5..=2.0).contains(&r)
    });
    let improved = out.levels.len() == 3 && errors[errors.len() - 1] < errors[0];
    verdict(
        improved && ratio_ok,
        format!(
            "M0=40, levels solved {}, errors {errors:.5?} (final < level 0: {improved}), active cells {cells:?} within 2x: {ratio_ok}{}",
            out.levels.len(),
            out.stopped.as_ref().map(|s| format!(", stopped: {s}")).unwrap_or_default()
        ),
    )
}

fn instance_strategy() -> impl Strategy<Value = (usize, usize, f64, u64)> {
    (2usize..=3, 6usize..=9, 0.05f64..0.5, any::<u64>())
}

fn identical_instance(n: usize, m: usize, seed: u64) -> (DiscreteDensity, Marginals) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (grid, weights) = random_instance(&mut rng, 1, m);
    let rho = DiscreteDensity::from_weights(grid, weights[0].clone(), 1.0).unwrap();
    let marginals = Marginals::identical(&rho, n);
    (rho, marginals)
}

fn kernel_for(n: usize, grid: &Grid1D, eps: f64) -> GibbsKernel {
    build_kernel(CoulombCostSpec::full_1d(n).unwrap(), grid, eps).unwrap()
}

const CASES: u32 = 48;

fn invariants() -> Verdict {
    let runner = || {
        TestRunner::new(Config {
            cases: CASES,
            failure_persistence: None,
            ..Config::default()
        })
    };
    let mut failures = Vec::new();

    let kl = runner().run(&instance_strategy(), |(n, m, eps, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (grid, weights) = random_instance(&mut rng, n, m);
        let kernel = kernel_for(n, &grid, eps);
        let axis = seed as usize % n;
        let once = kl_project(&gibbs_plan(&kernel), &weights[axis], axis).unwrap();
        let marginal = once.marginal(axis);
        for (a, b) in marginal.iter().zip(&weights[axis]) {
            prop_assert!((a - b).abs() <= 1e-14, "marginal {a} vs {b}");
        }
        let twice = kl_project(&once, &weights[axis], axis).unwrap();
        prop_assert!(max_abs_diff(&once, &twice) <= 1e-15);
        Ok(())
    });
    if let Err(e) = kl {
        failures.push(format!("KL projection: {e}"));
    }

    let symmetry = runner().run(&instance_strategy(), |(n, m, eps, seed)| {
        let (rho, marginals) = identical_instance(n, m, seed);
        let kernel = kernel_for(n, rho.grid(), eps);
        let mut cfg = SolverConfig::for_density(eps, &rho);
        cfg.tolerance = 1e-14;
        let out = ipfp_solve(&kernel, &marginals, &cfg).unwrap();
        prop_assert!(out.converged);
        let plan = plan_from_scalings(&kernel, &out.state).to_dense();
        let swapped = plan.clone().reversed_axes();
        let worst = plan.iter().zip(swapped.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-12, "asymmetry {worst}");
        if n == 3 {
            let cyc = plan.clone().permuted_axes(vec![1, 2, 0]);
            let worst = plan.iter().zip(cyc.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(worst <= 1e-12, "cyclic asymmetry {worst}");
        }
        Ok(())
    });
    if let Err(e) = symmetry {
        failures.push(format!("symmetry: {e}"));
    }

    let mass = runner().run(&(4usize..40, 2usize..5, any::<u64>()), |(m, factor, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let rho = DiscreteDensity::from_weights(Grid1D::uniform(-1.0, 1.0, m).unwrap(), w, 1.0).unwrap();
        let fine = Grid1D::uniform(-1.0, 1.0, m * factor + 1).unwrap();
        let resampled = resample_density(&rho.quantile(), &fine).unwrap();
        let total: f64 = resampled.weights().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "resampled mass {total}");
        // A cyclic shift guarantees a feasible plan; random extra cells may lie on none.
        let cells: Vec<usize> = (0..m)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|&(i, j)| j == (i + 1) % m || (i != j && rng.random_bool(0.3)))
            .flat_map(|(i, j)| [i, j])
            .collect();
        let raw: Vec<f64> = (0..cells.len() / 2).map(|_| rng.random_range(0.1..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let mut plan = LevelPlan {
            grid: rho.grid().clone(),
            n: 2,
            weights: raw.into_iter().map(|w| w / sum).collect(),
            indices: cells,
        };
        let uniform = vec![1.0 / m as f64; m];
        prop_assert!(prune_to_total_support(&mut plan, &uniform).is_some());
        let total: f64 = plan.weights.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "pruned mass {total}");
        Ok(())
    });
    if let Err(e) = mass {
        failures.push(format!("mass normalization: {e}"));
    }

    let max_kappa_eps = std::cell::Cell::new(0.0f64);
    let duality = runner().run(&instance_strategy(), |(n, m, eps, seed)| {
        let (rho, marginals) = identical_instance(n, m, seed);
        let kernel = kernel_for(n, rho.grid(), eps);
        let out = ipfp_solve(&kernel, &marginals, &SolverConfig::for_density(eps, &rho)).unwrap();
        prop_assert!(out.converged);
        let plan = plan_from_scalings(&kernel, &out.state);
        let cost = GridCost {
            spec: CoulombCostSpec::full_1d(n).unwrap(),
            grid: rho.grid(),
        };
        let energy = sce_energy(&plan, &cost);
        let u = potential_from_scalings(&out.state, eps, &rho).unwrap().anchored_to_energy(rho.weights(), n, energy);
        let feas = dual_feasibility(&u, &rho, n, &cost, 1_000_000, seed);
        prop_assert!(feas.exhaustive && feas.kappa.is_finite());
        let bound = (n - 1) as f64 * (1.0 / rho.weights().iter().copied().fold(f64::INFINITY, f64::min)).ln();
        prop_assert!(feas.kappa <= bound + 1e-9, "kappa {} above {bound}", feas.kappa);
        let wd = WeakDuality::new(&u, &rho, n, energy, feas.kappa);
        prop_assert!(wd.holds(eps, 1.0), "{wd:?}");
        max_kappa_eps.set(max_kappa_eps.get().max(feas.kappa * eps));
        Ok(())
    });
    if let Err(e) = duality {
        failures.push(format!("weak duality: {e}"));
    }

    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("4 properties x {CASES} cases; largest reported kappa*eps {:.3e}", max_kappa_eps.get())
        } else {
            failures.join("; ")
        },
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("Table 1, uniform N=2, M=1000", table1),
        ("Table 2 trend, uniform [0,1] N=3, M=200", table2),
        ("Bregman and IPFP agree on random instances", bregman_vs_ipfp),
        ("LP limit, M=8", lp_limit),
        ("analytic map properties", analytic_maps),
        ("radial ball pipeline, eps=0.002, M=1000", radial_pipeline),
        ("refinement beats level 0, eps=0.01", refinement),
        ("structural invariants", invariants),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {id} [{name}]: {} ({:.1}s) {}",
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
