//! Resolved run configuration, problem set-up and the matching analytic oracle.

use std::path::PathBuf;

use mmot::analytic::{
    comotion_multi_1d, comotion_triangular, comotion_uniform_n2, potential_from_maps, potential_uniform_n2,
    potential_uniform_n3, ComotionMap, PiecewisePotential,
};
use mmot::cost::CoulombCostSpec;
use mmot::densities::{
    load_density, make_ball_profile, make_gaussian, make_triangular, make_uniform, make_uniform_interval,
    DensityFormat, DiscreteDensity,
};
use mmot::radial::{problem_from_lambda, radial_comotion_n2, reduce_problem};
use serde::Serialize;

use crate::args::{DensityArg, FileFormatArg, ModeArg, RunArgs};
use crate::CliError;

/// Every parameter of a run after defaults are filled in.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub density: DensityArg,
    pub a: Option<f64>,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub mode: ModeArg,
    #[serde(rename = "M")]
    pub m: usize,
    pub epsilon: Vec<f64>,
    pub tolerance: Option<f64>,
    pub max_sweeps: usize,
    pub log_domain: bool,
    pub refine_levels: usize,
    pub xi: f64,
    pub max_active_cells: Option<usize>,
    pub file_format: FileFormatArg,
    pub plan_min_weight: f64,
    pub dual_samples: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn resolve(subcommand: &str, args: &RunArgs) -> Result<Self, CliError> {
        let d = args.d.unwrap_or(match args.mode {
            ModeArg::Full => 1,
            ModeArg::Radial => 3,
        });
        let a = match args.density {
            DensityArg::Uniform => Some(args.a.unwrap_or(2.0)),
            DensityArg::Triangular | DensityArg::Gaussian => Some(args.a.unwrap_or(1.0)),
            _ => args.a,
        };
        let cfg = Self {
            subcommand: subcommand.to_string(),
            density: args.density.clone(),
            a,
            n: args.n,
            d,
            mode: args.mode,
            m: args.m,
            epsilon: args.epsilon.clone(),
            tolerance: args.tol,
            max_sweeps: args.max_sweeps,
            log_domain: args.log_domain,
            refine_levels: args.refine_levels,
            xi: args.xi,
            max_active_cells: args.max_active_cells,
            file_format: args.file_format,
            plan_min_weight: args.plan_min_weight,
            dual_samples: args.dual_samples,
            seed: args.seed,
            out: args.out.clone(),
            threads: args.threads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.n < 2 {
            return bad(format!("--N must be at least 2, got {}", self.n));
        }
        if self.m < 2 {
            return bad(format!("--M must be at least 2, got {}", self.m));
        }
        if self.epsilon.is_empty() || self.epsilon.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return bad(format!("every --epsilon must be positive, got {:?}", self.epsilon));
        }
        if let Some(t) = self.tolerance {
            if !(t > 0.0) {
                return bad(format!("--tol must be positive, got {t}"));
            }
        }
        if self.refine_levels == 0 {
            return bad("--refine-levels must be at least 1".into());
        }
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return bad(format!("--xi must lie in (0, 1), got {}", self.xi));
        }
        if self.threads == Some(0) {
            return bad("--threads must be at least 1".into());
        }
        match self.mode {
            ModeArg::Radial if self.d < 2 => bad(format!("radial mode needs --d of at least 2, got {}", self.d)),
            ModeArg::Radial if self.n > 3 => bad(format!("radial mode supports N = 2 or 3, got {}", self.n)),
            ModeArg::Full if self.d != 1 => bad(format!("full mode is one-dimensional, got --d {}", self.d)),
            ModeArg::Radial if !matches!(self.density, DensityArg::Ball | DensityArg::File(_)) => {
                bad(format!("radial mode needs --density ball or file:PATH, got {}", self.density))
            }
            ModeArg::Full if self.density == DensityArg::Ball => {
                bad("--density ball needs --mode radial".into())
            }
            _ => Ok(()),
        }
    }

    /// Epsilon of a single-solve subcommand.
    pub fn single_epsilon(&self) -> Result<f64, CliError> {
        match self.epsilon.as_slice() {
            [e] => Ok(*e),
            many => Err(CliError::Config(format!(
                "{} takes one --epsilon, got {}; use `table` for ladders",
                self.subcommand,
                many.len()
            ))),
        }
    }
}

/// The marginal and cost a run works with. In radial mode the marginal is
/// the radial density `lambda`.
#[derive(Debug, Clone)]
pub struct Problem {
    pub density: DiscreteDensity,
    pub spec: CoulombCostSpec,
}

impl Problem {
    pub fn build(cfg: &RunConfig) -> Result<Self, CliError> {
        let m = cfg.m;
        let a = cfg.a.unwrap_or(1.0);
        let format = match cfg.file_format {
            FileFormatArg::Weights => DensityFormat::Weights,
            FileFormatArg::Values => DensityFormat::Values,
        };
        match cfg.mode {
            ModeArg::Full => {
                let density = match &cfg.density {
                    DensityArg::Uniform => make_uniform(a, m)?,
                    DensityArg::Uniform01 => make_uniform_interval(0.0, 1.0, m)?,
                    DensityArg::Triangular => make_triangular(a, m)?,
                    DensityArg::Gaussian => make_gaussian(a, -4.0 * a, 4.0 * a, m)?,
                    DensityArg::File(p) => load_density(p, format)?.density,
                    DensityArg::Ball => unreachable!("rejected by validation"),
                };
                Ok(Self {
                    density,
                    spec: CoulombCostSpec::full_1d(cfg.n)?,
                })
            }
            ModeArg::Radial => {
                let problem = match &cfg.density {
                    DensityArg::Ball => reduce_problem(&make_ball_profile(m)?, cfg.d, cfg.n)?,
                    DensityArg::File(p) => problem_from_lambda(load_density(p, format)?.density, cfg.d, cfg.n)?,
                    _ => unreachable!("rejected by validation"),
                };
                Ok(Self {
                    density: problem.lambda().clone(),
                    spec: problem.spec(),
                })
            }
        }
    }
}

/// Analytic answer for a problem: co-motion maps and, in full mode, the
/// Kantorovich potential.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub maps: Vec<ComotionMap>,
    closed_form: Option<PiecewisePotential>,
    has_potential: bool,
}

pub const SUPPORTED_ORACLES: &str = "full mode: uniform (N=2 closed form, any N via quantile maps), \
     uniform01 (N=3 closed form, any N via quantile maps), triangular (N=2 closed form, any N via quantile maps), \
     gaussian and file:PATH (quantile maps); radial mode: ball or file:PATH with N=2 (map only)";

impl Oracle {
    pub fn for_problem(cfg: &RunConfig, problem: &Problem) -> Result<Self, CliError> {
        let n = cfg.n;
        let a = cfg.a.unwrap_or(1.0);
        let unsupported = || CliError::Config(format!("no analytic oracle for this run; supported: {SUPPORTED_ORACLES}"));
        let oracle = match cfg.mode {
            ModeArg::Radial if n == 2 => Self {
                maps: vec![radial_comotion_n2(&problem.density)?],
                closed_form: None,
                has_potential: false,
            },
            ModeArg::Radial => return Err(unsupported()),
            ModeArg::Full => {
                let quantile_maps = || comotion_multi_1d(&problem.density, n).map_err(|_| unsupported());
                match (&cfg.density, n) {
                    (DensityArg::Uniform, 2) => Self {
                        maps: vec![comotion_uniform_n2(a)?],
                        closed_form: Some(potential_uniform_n2(a)?),
                        has_potential: true,
                    },
                    (DensityArg::Uniform01, 3) => Self {
                        maps: quantile_maps()?,
                        closed_form: Some(potential_uniform_n3()),
                        has_potential: true,
                    },
                    (DensityArg::Triangular, 2) => Self {
                        maps: vec![comotion_triangular(a)?],
                        closed_form: None,
                        has_potential: true,
                    },
                    _ => Self {
                        maps: quantile_maps()?,
                        closed_form: None,
                        has_potential: true,
                    },
                }
            }
        };
        Ok(oracle)
    }

    /// Exact potential at the points of `density`, if the oracle has one.
    pub fn potential_on(&self, density: &DiscreteDensity) -> Result<Option<Vec<f64>>, CliError> {
        if !self.has_potential {
            return Ok(None);
        }
        let values = match &self.closed_form {
            Some(p) => density
                .points()
                .iter()
                .map(|&x| p.evaluate(x))
                .collect::<mmot::Result<Vec<f64>>>()?,
            None => potential_from_maps(&self.maps, density)?.values,
        };
        Ok(Some(values))
    }
}
