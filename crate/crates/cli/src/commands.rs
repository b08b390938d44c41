use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mmot::cost::{build_kernel, GridCost};
use mmot::densities::{fmt17, DiscreteDensity};
use mmot::recovery::{
    dual_feasibility, map_from_plan, potential_from_scalings, relative_l1_error, relative_linf_error, sce_energy,
    write_map_csv, write_plan_triplets, write_potential_csv, write_summary_json, Gauge, Potential, RunSummary,
    WeakDuality, ERROR_METRIC,
};
use mmot::refine::{refine_solve, write_reports_json, LevelReport, RefinementConfig};
use mmot::solver::{
    ipfp_solve, plan_from_scalings, write_history_jsonl, EvaluationMode, Marginals, ScalingState, SolverConfig,
    SweepRecord, TransportPlan,
};
use serde::Serialize;

use crate::args::{CompareArgs, ModeArg};
use crate::problem::{Oracle, Problem, RunConfig};
use crate::CliError;

/// Outcome of one solve at one epsilon, plain or refined.
struct Solved {
    density: DiscreteDensity,
    state: ScalingState,
    plan: TransportPlan,
    epsilon: f64,
    sweeps: usize,
    converged: bool,
    residual: f64,
    history: Vec<SweepRecord>,
    levels: Option<Vec<LevelReport>>,
}

fn solver_config(cfg: &RunConfig, density: &DiscreteDensity, epsilon: f64) -> SolverConfig {
    let mut solver = SolverConfig::for_density(epsilon, density);
    if let Some(t) = cfg.tolerance {
        solver.tolerance = t;
    }
    solver.max_sweeps = cfg.max_sweeps;
    solver.record_history = true;
    if cfg.log_domain {
        solver.mode = EvaluationMode::Log;
    }
    solver
}

fn solve_once(cfg: &RunConfig, problem: &Problem, epsilon: f64) -> Result<Solved, CliError> {
    let density = &problem.density;
    let solver = solver_config(cfg, density, epsilon);
    if cfg.refine_levels > 1 {
        let refinement = RefinementConfig {
            xi: cfg.xi,
            levels: cfg.refine_levels,
            target_active_cells: cfg.max_active_cells,
            epsilon_ladder: None,
        };
        let outcome = refine_solve(density, problem.spec, &solver, &refinement)?;
        if let Some(reason) = &outcome.stopped {
            warn!("refinement stopped early: {reason}");
        }
        let levels = outcome.reports();
        let finest = outcome.levels.into_iter().last().expect("level 0 is always present");
        return Ok(Solved {
            sweeps: finest.report.sweeps,
            converged: finest.report.converged,
            residual: finest.report.residual,
            density: finest.density,
            state: finest.state,
            plan: finest.plan,
            epsilon: finest.epsilon,
            history: finest.history,
            levels: Some(levels),
        });
    }
    let kernel = build_kernel(problem.spec, density.grid(), epsilon)?;
    let out = ipfp_solve(&kernel, &Marginals::identical(density, problem.spec.n_marginals), &solver)?;
    if out.restarted_in_log_domain {
        info!("linear evaluation underflowed; the solve was redone in log domain");
    }
    let plan = plan_from_scalings(&kernel, &out.state);
    Ok(Solved {
        density: density.clone(),
        state: out.state,
        plan,
        epsilon,
        sweeps: out.sweeps,
        converged: out.converged,
        residual: out.residual.max_linf(),
        history: out.history,
        levels: None,
    })
}

/// Energy, anchored potential, oracle error and duality report of a solve.
struct Recovered {
    energy: f64,
    potential: Potential,
    error: Option<f64>,
    duality: WeakDuality,
}

fn recover(cfg: &RunConfig, problem: &Problem, oracle: Option<&Oracle>, run: &Solved) -> Result<Recovered, CliError> {
    let n = problem.spec.n_marginals;
    let cost = GridCost {
        spec: problem.spec,
        grid: run.density.grid(),
    };
    let energy = sce_energy(&run.plan, &cost);
    let weights = run.density.weights();
    let potential = potential_from_scalings(&run.state, run.epsilon, &run.density)?.anchored_to_energy(weights, n, energy);
    let error = match oracle {
        Some(o) => o
            .potential_on(&run.density)?
            .map(|exact| relative_linf_error(&potential.values, &exact, weights)),
        None => None,
    };
    let feasibility = dual_feasibility(&potential, &run.density, n, &cost, cfg.dual_samples, cfg.seed);
    let duality = WeakDuality::new(&potential, &run.density, n, energy, feasibility.kappa);
    Ok(Recovered {
        energy,
        potential,
        error,
        duality,
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))
}

pub fn solve(cfg: &RunConfig) -> Result<(), CliError> {
    let epsilon = cfg.single_epsilon()?;
    let problem = Problem::build(cfg)?;
    let oracle = match Oracle::for_problem(cfg, &problem) {
        Ok(o) => Some(o),
        Err(e) => {
            info!("no oracle comparison: {e}");
            None
        }
    };
    let run = solve_once(cfg, &problem, epsilon)?;
    if !run.converged {
        warn!("not converged after {} sweeps, residual {:.3e}", run.sweeps, run.residual);
    }
    let rec = recover(cfg, &problem, oracle.as_ref(), &run)?;

    let out = &cfg.out;
    create_dir(out)?;
    write_plan_triplets(&run.plan, cfg.plan_min_weight, out.join("plan.csv"))?;
    write_potential_csv(&rec.potential, out.join("potential.csv"))?;
    let points = run.density.points();
    write_map_csv(&map_from_plan(&run.plan, points, 0, 1)?, out.join("map.csv"))?;
    write_history_jsonl(&run.history, out.join("history.jsonl"))?;
    if let Some(levels) = &run.levels {
        write_reports_json(levels, out.join("levels.json"))?;
    }
    if cfg.mode == ModeArg::Radial {
        write_asymptote(&rec.potential, problem.spec.n_marginals, &out.join("asymptote.csv"))?;
    }
    let summary = RunSummary {
        epsilon: run.epsilon,
        sweeps: run.sweeps,
        converged: run.converged,
        residual: run.residual,
        energy: rec.energy,
        potential_error_vs_oracle: rec.error,
        error_metric: ERROR_METRIC,
        duality: Some(rec.duality),
        config: serde_json::to_value(cfg).expect("config serializes"),
    };
    write_summary_json(&summary, out.join("summary.json"))?;
    println!(
        "epsilon {} sweeps {} converged {} energy {} error {}",
        run.epsilon,
        run.sweeps,
        run.converged,
        fmt17(rec.energy),
        rec.error.map(fmt17).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

/// `r, u(r), (N-1)/r` with `u` shifted to meet the asymptote at the outer radius.
fn write_asymptote(potential: &Potential, n: usize, path: &Path) -> Result<(), CliError> {
    let (Some(&r_out), Some(&u_out)) = (potential.points.last(), potential.values.last()) else {
        return Ok(());
    };
    let shift = (n - 1) as f64 / r_out - u_out;
    let mut w = csv_writer(path)?;
    let io = |e| CliError::Io(path.to_path_buf(), e);
    writeln!(w, "r,potential,asymptote").map_err(io)?;
    for (r, u) in potential.points.iter().zip(&potential.values) {
        writeln!(w, "{},{},{}", fmt17(*r), fmt17(u + shift), fmt17((n - 1) as f64 / r)).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn csv_writer(path: &Path) -> Result<std::io::BufWriter<fs::File>, CliError> {
    let file = fs::File::create(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    Ok(std::io::BufWriter::new(file))
}

pub fn table(cfg: &RunConfig) -> Result<(), CliError> {
    let problem = Problem::build(cfg)?;
    let oracle = Oracle::for_problem(cfg, &problem)?;
    if oracle.potential_on(&problem.density)?.is_none() {
        return Err(CliError::Config("the oracle for this run has no potential to tabulate".into()));
    }
    create_dir(&cfg.out)?;
    let path = cfg.out.join("table.csv");
    let mut w = csv_writer(&path)?;
    let io = |e| CliError::Io(path.clone(), e);
    writeln!(w, "epsilon,error,sweeps,energy,converged,status").map_err(io)?;
    for &eps in &cfg.epsilon {
        let row = solve_once(cfg, &problem, eps).and_then(|run| Ok((recover(cfg, &problem, Some(&oracle), &run)?, run)));
        match row {
            Ok((rec, run)) => {
                let status = if run.converged { "ok" } else { "not-converged" };
                let error = rec.error.expect("oracle has a potential");
                println!("{eps:>10} {error:>12.6} {:>8} {status}", run.sweeps);
                writeln!(
                    w,
                    "{},{},{},{},{},{status}",
                    fmt17(eps),
                    fmt17(error),
                    run.sweeps,
                    fmt17(rec.energy),
                    run.converged
                )
                .map_err(io)?;
            }
            Err(e) => {
                warn!("epsilon {eps}: {e}");
                let status = e.to_string().replace([',', '\n'], ";");
                writeln!(w, "{},,,,false,{status}", fmt17(eps)).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    Ok(())
}

pub fn oracle(cfg: &RunConfig) -> Result<(), CliError> {
    let problem = Problem::build(cfg)?;
    let oracle = Oracle::for_problem(cfg, &problem)?;
    create_dir(&cfg.out)?;
    let density = &problem.density;
    let points = density.points();

    let path = cfg.out.join("maps.csv");
    let mut w = csv_writer(&path)?;
    let io = |e| CliError::Io(path.clone(), e);
    let header: Vec<String> = (2..=oracle.maps.len() + 1).map(|k| format!("f{k}")).collect();
    writeln!(w, "x,{}", header.join(",")).map_err(io)?;
    for &x in points {
        let mut line = fmt17(x);
        for map in &oracle.maps {
            line.push(',');
            line.push_str(&fmt17(map.evaluate(x)?));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)?;

    if let Some(values) = oracle.potential_on(density)? {
        let mut potential = Potential {
            points: points.to_vec(),
            values,
            epsilon: 0.0,
            gauge: Gauge::Explicit,
            anchor: 0.0,
        };
        potential.anchor = potential.integrate(density.weights());
        write_potential_csv(&potential, cfg.out.join("potential.csv"))?;
    }
    println!("wrote {} map(s) on {} points to {}", oracle.maps.len(), points.len(), cfg.out.display());
    Ok(())
}

/// Two numeric columns of a CSV with a header row.
fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut columns = vec![Vec::new(); header.len()];
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for (c, field) in record.iter().enumerate() {
            let v = field
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("{}: cannot parse '{field}'", path.display())))?;
            columns[c].push(v);
        }
    }
    Ok((header, columns))
}

fn same_grid(a: &[f64], b: &[f64]) -> bool {
    let scale = a.iter().chain(b).fold(1.0f64, |m, x| m.max(x.abs()));
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * scale)
}

fn summary_error(dir: &Path) -> Result<Option<f64>, CliError> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::Io(path.clone(), e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(value.get("potential_error_vs_oracle").and_then(|v| v.as_f64()))
}

#[derive(Debug, Serialize)]
struct CompareReport {
    run: PathBuf,
    error_metric: &'static str,
    linf_error: Option<f64>,
    l1_error: Option<f64>,
    band_cells: usize,
    band_mass: Option<f64>,
    baseline_error: Option<f64>,
    failures: Vec<String>,
    pass: bool,
}

pub fn compare(args: &CompareArgs) -> Result<bool, CliError> {
    let (_, run_pot) = read_columns(&args.run.join("potential.csv"))?;
    let (xs, us) = (&run_pot[0], &run_pot[1]);
    let mut report = CompareReport {
        run: args.run.clone(),
        error_metric: ERROR_METRIC,
        linf_error: None,
        l1_error: None,
        band_cells: args.band_cells,
        band_mass: None,
        baseline_error: None,
        failures: Vec::new(),
        pass: true,
    };

    if let Some(reference) = &args.reference {
        let pot_path = reference.join("potential.csv");
        if pot_path.exists() {
            let (_, ref_pot) = read_columns(&pot_path)?;
            if !same_grid(xs, &ref_pot[0]) {
                return Err(CliError::Config(format!(
                    "grid mismatch: {} has {} points, {} has {}",
                    args.run.display(),
                    xs.len(),
                    reference.display(),
                    ref_pot[0].len()
                )));
            }
            let ones = vec![1.0; xs.len()];
            report.linf_error = Some(relative_linf_error(us, &ref_pot[1], &ones));
            report.l1_error = Some(relative_l1_error(us, &ref_pot[1], &ones));
        }
        let maps_path = reference.join("maps.csv");
        let plan_path = args.run.join("plan.csv");
        if maps_path.exists() && plan_path.exists() {
            let (_, maps) = read_columns(&maps_path)?;
            if !same_grid(xs, &maps[0]) {
                return Err(CliError::Config("grid mismatch between run and reference maps".into()));
            }
            let (header, plan) = read_columns(&plan_path)?;
            if header.len() == 3 {
                let targets: Vec<usize> = maps[1].iter().map(|&y| mmot::recovery::nearest_index(xs, y)).collect();
                let (mut inside, mut total) = (0.0, 0.0);
                for e in 0..plan[0].len() {
                    let (i, j, w) = (plan[0][e] as usize, plan[1][e] as usize, plan[2][e]);
                    total += w;
                    if i < targets.len() && targets[i].abs_diff(j) <= args.band_cells {
                        inside += w;
                    }
                }
                report.band_mass = Some(inside / total);
            }
        }
    }
    if report.linf_error.is_none() {
        report.linf_error = summary_error(&args.run)?;
    }

    if let (Some(limit), Some(err)) = (args.max_error, report.linf_error) {
        if err > limit {
            report.failures.push(format!("error {err:.6} above {limit}"));
        }
    }
    if let Some(limit) = args.min_band_mass {
        match report.band_mass {
            Some(mass) if mass >= limit => {}
            Some(mass) => report.failures.push(format!("band mass {mass:.6} below {limit}")),
            None => report.failures.push("band mass unavailable (needs plan.csv and reference maps.csv)".into()),
        }
    }
    if let Some(baseline) = &args.baseline {
        report.baseline_error = summary_error(baseline)?;
        match (report.linf_error, report.baseline_error) {
            (Some(e), Some(b)) if e < b => {}
            (Some(e), Some(b)) => report.failures.push(format!("error {e:.6} not below baseline {b:.6}")),
            _ => report.failures.push("baseline comparison needs oracle errors for both runs".into()),
        }
    }
    if (args.max_error.is_some() || args.baseline.is_some()) && report.linf_error.is_none() {
        report.failures.push("no error available for the run".into());
    }
    report.pass = report.failures.is_empty();
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(report.pass)
}
