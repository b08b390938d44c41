use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mmot", version, about = "Entropic multi-marginal optimal transport with Coulomb cost")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one problem and write plan, potential, map, summary and history.
    Solve(RunArgs),
    /// Sweep an epsilon ladder and tabulate the potential error against the analytic oracle.
    Table(RunArgs),
    /// Write the analytic co-motion maps and potential for a density.
    Oracle(RunArgs),
    /// Compare a solver run against a reference directory.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "path")]
pub enum DensityArg {
    Uniform,
    Uniform01,
    Triangular,
    Gaussian,
    Ball,
    File(PathBuf),
}

impl FromStr for DensityArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "uniform01" => Ok(Self::Uniform01),
            "triangular" => Ok(Self::Triangular),
            "gaussian" => Ok(Self::Gaussian),
            "ball" => Ok(Self::Ball),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Self::File(PathBuf::from(p))),
                _ => Err(format!(
                    "unknown density '{s}', expected uniform, uniform01, triangular, gaussian, ball or file:PATH"
                )),
            },
        }
    }
}

impl fmt::Display for DensityArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uniform => write!(f, "uniform"),
            Self::Uniform01 => write!(f, "uniform01"),
            Self::Triangular => write!(f, "triangular"),
            Self::Gaussian => write!(f, "gaussian"),
            Self::Ball => write!(f, "ball"),
            Self::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Full,
    Radial,
}

/// How a density file's second column is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileFormatArg {
    Weights,
    Values,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, default_value = "uniform")]
    pub density: DensityArg,
    /// Support parameter: width for uniform, half-width for triangular, scale for gaussian.
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long = "N", default_value_t = 2)]
    pub n: usize,
    /// Space dimension; defaults to 1 in full mode and 3 in radial mode.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    pub mode: ModeArg,
    #[arg(long = "M", default_value_t = 1000)]
    pub m: usize,
    /// Regularization; repeat for a ladder.
    #[arg(long, default_values_t = [0.01])]
    pub epsilon: Vec<f64>,
    /// Absolute L-infinity marginal tolerance; default 1e-10 times the largest weight.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub max_sweeps: usize,
    #[arg(long)]
    pub log_domain: bool,
    /// Total number of solves in the coarse-to-fine pipeline; 1 disables refinement.
    #[arg(long, default_value_t = 1)]
    pub refine_levels: usize,
    #[arg(long, default_value_t = 0.9)]
    pub xi: f64,
    /// Stop refining once a level would exceed this many active cells.
    #[arg(long)]
    pub max_active_cells: Option<usize>,
    #[arg(long, value_enum, default_value_t = FileFormatArg::Weights)]
    pub file_format: FileFormatArg,
    /// Plan entries below this mass are left out of the triplet file.
    #[arg(long, default_value_t = 1e-14)]
    pub plan_min_weight: f64,
    /// Tuples sampled for the dual feasibility check.
    #[arg(long, default_value_t = 200_000)]
    pub dual_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "MMOT_OUT", default_value = "mmot-out")]
    pub out: PathBuf,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// Directory written by `solve`.
    #[arg(long)]
    pub run: PathBuf,
    /// Directory written by `oracle` (or another run) on the same grid.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// A second run whose error the first must beat strictly.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Fail when the relative L-infinity error exceeds this.
    #[arg(long)]
    pub max_error: Option<f64>,
    /// Half-width, in grid cells, of the band around the reference map.
    #[arg(long, default_value_t = 10)]
    pub band_cells: usize,
    /// Fail when less plan mass than this lies in the band.
    #[arg(long)]
    pub min_band_mass: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_names_round_trip() {
        for s in ["uniform", "uniform01", "triangular", "gaussian", "ball", "file:rho.csv"] {
            assert_eq!(s.parse::<DensityArg>().unwrap().to_string(), s);
        }
        assert!("file:".parse::<DensityArg>().is_err());
        assert!("cauchy".parse::<DensityArg>().is_err());
    }
}
