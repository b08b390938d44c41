//! One-dimensional discrete densities: grids, constructors, radialization,
//! CSV ingestion and quantile functions.
//!
//! A [`DiscreteDensity`] stores the mass of each grid cell (not the density
//! value). Cells are midpoint cells: point `i` owns `[edges[i], edges[i+1]]`
//! and the quadrature weight of the point is the width of that interval.
//! The cumulative distribution is piecewise linear inside each cell, which
//! makes the quantile function continuous.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// Strictly increasing grid with midpoint quadrature cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    points: Vec<f64>,
    cell_weights: Vec<f64>,
    edges: Vec<f64>,
}

impl Grid1D {
    /// `m` equal cells on `[lo, hi]`, one point at each cell centre.
    ///
    /// Grids on intervals symmetric around the origin are built by mirroring
    /// the left half, so `points[m - 1 - k] == -points[k]` holds exactly.
    pub fn uniform(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(invalid(format!("degenerate interval [{lo}, {hi}]")));
        }
        if m < 2 {
            return Err(invalid(format!("grid needs at least 2 points, got {m}")));
        }
        let h = (hi - lo) / m as f64;
        let mut points: Vec<f64> = (0..m).map(|k| lo + (k as f64 + 0.5) * h).collect();
        let mut edges: Vec<f64> = (0..=m).map(|k| lo + k as f64 * h).collect();
        edges[m] = hi;
        if lo == -hi {
            for k in 0..m / 2 {
                points[m - 1 - k] = -points[k];
            }
            if m % 2 == 1 {
                points[m / 2] = 0.0;
            }
            for k in 0..=m / 2 {
                edges[m - k] = -edges[k];
            }
            if m % 2 == 0 {
                edges[m / 2] = 0.0;
            }
        }
        Ok(Self {
            points,
            cell_weights: vec![h; m],
            edges,
        })
    }

    /// Grid through arbitrary strictly increasing points. Cell edges are the
    /// midpoints between neighbours; the two end cells are mirrored around
    /// their point.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        let m = points.len();
        if m < 2 {
            return Err(invalid(format!("grid needs at least 2 points, got {m}")));
        }
        if let Some(k) = points.iter().position(|p| !p.is_finite()) {
            return Err(invalid(format!("non-finite grid point at index {k}")));
        }
        if let Some(k) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(invalid(format!(
                "grid points not strictly increasing at index {}",
                k + 1
            )));
        }
        let mut edges = Vec::with_capacity(m + 1);
        edges.push(points[0] - 0.5 * (points[1] - points[0]));
        for w in points.windows(2) {
            edges.push(0.5 * (w[0] + w[1]));
        }
        edges.push(points[m - 1] + 0.5 * (points[m - 1] - points[m - 2]));
        let cell_weights = edges.windows(2).map(|e| e[1] - e[0]).collect();
        Ok(Self {
            points,
            cell_weights,
            edges,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn cell_weights(&self) -> &[f64] {
        &self.cell_weights
    }

    /// Cell boundaries, `len() + 1` values.
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn lo(&self) -> f64 {
        self.edges[0]
    }

    pub fn hi(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    /// Largest cell width.
    pub fn max_spacing(&self) -> f64 {
        self.cell_weights.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the cell containing `x`, clamped to the grid.
    pub fn cell_of(&self, x: f64) -> usize {
        let m = self.len();
        let k = self.edges.partition_point(|&e| e <= x);
        k.saturating_sub(1).min(m - 1)
    }
}

/// Nonnegative cell masses on a [`Grid1D`], normalized to `total_mass`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDensity {
    grid: Grid1D,
    weights: Vec<f64>,
    total_mass: f64,
}

impl DiscreteDensity {
    /// Normalizes raw cell masses to `total_mass`.
    pub fn from_weights(grid: Grid1D, weights: Vec<f64>, total_mass: f64) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} weights for a grid of {} points",
                weights.len(),
                grid.len()
            )));
        }
        if !(total_mass > 0.0 && total_mass.is_finite()) {
            return Err(invalid(format!("total mass must be positive, got {total_mass}")));
        }
        if let Some(k) = weights.iter().position(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(invalid(format!(
                "weight at index {k} is negative or non-finite ({})",
                weights[k]
            )));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(invalid("density has zero mass"));
        }
        let scale = total_mass / sum;
        let weights = weights.into_iter().map(|w| w * scale).collect();
        Ok(Self {
            grid,
            weights,
            total_mass,
        })
    }

    /// Cell masses from pointwise density values by the midpoint rule.
    pub fn from_values(grid: Grid1D, values: &[f64], total_mass: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        let weights = values
            .iter()
            .zip(grid.cell_weights())
            .map(|(v, h)| v * h)
            .collect();
        Self::from_weights(grid, weights, total_mass)
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        self.grid.points()
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    /// Pointwise density values (mass divided by cell width).
    pub fn values(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(self.grid.cell_weights())
            .map(|(w, h)| w / h)
            .collect()
    }

    /// Same density rescaled to a different total mass.
    pub fn with_total_mass(&self, total_mass: f64) -> Result<Self> {
        Self::from_weights(self.grid.clone(), self.weights.clone(), total_mass)
    }

    /// Quadrature of `f` against the density.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.points()
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(x, w)| f(*x) * w)
            .sum()
    }

    pub fn quantile(&self) -> Quantile {
        Quantile::new(self.clone())
    }
}

/// Uniform density of Eq.-(9) type: constant on `[-a/2, a/2]`.
pub fn make_uniform(a: f64, m: usize) -> Result<DiscreteDensity> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(invalid(format!("support parameter a must be positive, got {a}")));
    }
    make_uniform_interval(-a / 2.0, a / 2.0, m)
}

/// Constant density on `[lo, hi]`.
pub fn make_uniform_interval(lo: f64, hi: f64, m: usize) -> Result<DiscreteDensity> {
    let grid = Grid1D::uniform(lo, hi, m)?;
    DiscreteDensity::from_weights(grid, vec![1.0; m], 1.0)
}

/// Tent density `(a - |x|) / a^2` on `[-a, a]`.
pub fn make_triangular(a: f64, m: usize) -> Result<DiscreteDensity> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(invalid(format!("support parameter a must be positive, got {a}")));
    }
    let grid = Grid1D::uniform(-a, a, m)?;
    let values: Vec<f64> = grid
        .points()
        .iter()
        .map(|x| (a - x.abs()).max(0.0) / (a * a))
        .collect();
    DiscreteDensity::from_values(grid, &values, 1.0)
}

/// Gaussian `exp(-(x/scale)^2)` truncated to `[lo, hi]`; the mass outside
/// the interval is dropped before normalization.
pub fn make_gaussian(scale: f64, lo: f64, hi: f64, m: usize) -> Result<DiscreteDensity> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid(format!("gaussian scale must be positive, got {scale}")));
    }
    let grid = Grid1D::uniform(lo, hi, m)?;
    let values: Vec<f64> = grid
        .points()
        .iter()
        .map(|x| (-(x / scale).powi(2)).exp())
        .collect();
    DiscreteDensity::from_values(grid, &values, 1.0)
}

/// Radial profile of the uniform unit ball: constant `rho(r)` on `[0, 1]`.
/// Feed it to [`radialize`] to get the radial marginal.
pub fn make_ball_profile(m: usize) -> Result<DiscreteDensity> {
    make_uniform_interval(0.0, 1.0, m)
}

/// Surface measure of the unit sphere in `R^d`.
pub fn sphere_measure(d: usize) -> Result<f64> {
    match d {
        2 => Ok(2.0 * PI),
        3 => Ok(4.0 * PI),
        _ => Err(invalid(format!("radialization supports d = 2 or 3, got {d}"))),
    }
}

/// Push a radial profile `rho(r)` forward by `|x|`:
/// `lambda(r) = C(d) r^(d-1) rho(r)`, renormalized to the input's total mass.
pub fn radialize(rho_radial: &DiscreteDensity, d: usize) -> Result<DiscreteDensity> {
    let c = sphere_measure(d)?;
    if let Some(k) = rho_radial.points().iter().position(|r| *r < 0.0) {
        return Err(invalid(format!(
            "negative radius {} at index {k}",
            rho_radial.points()[k]
        )));
    }
    let weights = rho_radial
        .points()
        .iter()
        .zip(rho_radial.weights())
        .map(|(r, w)| c * r.powi(d as i32 - 1) * w)
        .collect();
    DiscreteDensity::from_weights(rho_radial.grid().clone(), weights, rho_radial.total_mass())
}

/// How the second CSV column is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityFormat {
    /// Column holds the mass of each point.
    Weights,
    /// Column holds pointwise density values; masses use midpoint cells.
    Values,
}

/// A density read from disk together with its mass before normalization.
#[derive(Debug, Clone)]
pub struct LoadedDensity {
    pub density: DiscreteDensity,
    pub original_mass: f64,
}

/// Reads a `position,weight` CSV (header optional) and normalizes to unit mass.
pub fn load_density(path: impl AsRef<Path>, format: DensityFormat) -> Result<LoadedDensity> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err)?;

    let mut points = Vec::new();
    let mut column = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.len() != 2 {
            return Err(Error::DensityRow {
                row,
                reason: format!("expected 2 columns, found {}", record.len()),
            });
        }
        let x = record[0].parse::<f64>();
        let w = record[1].parse::<f64>();
        let (x, w) = match (x, w) {
            (Ok(x), Ok(w)) => (x, w),
            // A non-numeric first row is a header.
            _ if row == 0 && points.is_empty() => continue,
            _ => {
                return Err(Error::DensityRow {
                    row,
                    reason: format!("cannot parse '{}', '{}'", &record[0], &record[1]),
                })
            }
        };
        if !x.is_finite() || !w.is_finite() {
            return Err(Error::DensityRow {
                row,
                reason: "non-finite value".into(),
            });
        }
        if w < 0.0 {
            return Err(Error::DensityRow {
                row,
                reason: format!("negative weight {w}"),
            });
        }
        if let Some(&prev) = points.last() {
            if x <= prev {
                return Err(Error::DensityRow {
                    row,
                    reason: format!("position {x} not greater than previous {prev}"),
                });
            }
        }
        points.push(x);
        column.push(w);
    }

    let grid = Grid1D::from_points(points)?;
    let raw: Vec<f64> = match format {
        DensityFormat::Weights => column,
        DensityFormat::Values => column
            .iter()
            .zip(grid.cell_weights())
            .map(|(v, h)| v * h)
            .collect(),
    };
    let original_mass = raw.iter().sum();
    let density = DiscreteDensity::from_weights(grid, raw, 1.0)?;
    Ok(LoadedDensity {
        density,
        original_mass,
    })
}

/// Writes `position,weight` rows with 17 significant digits.
pub fn save_density(density: &DiscreteDensity, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "position,weight").map_err(io_err)?;
    for (x, w) in density.points().iter().zip(density.weights()) {
        writeln!(out, "{},{}", fmt17(*x), fmt17(*w)).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// 17 significant digits, scientific notation.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Cumulative distribution of a [`DiscreteDensity`], piecewise linear in
/// each cell.
#[derive(Debug, Clone)]
pub struct Quantile {
    density: DiscreteDensity,
    /// Cumulative mass at each cell edge (`len + 1` values).
    edge_cdf: Vec<f64>,
    /// Mass to the right of each cell edge, summed from the right end.
    edge_tail: Vec<f64>,
}

impl Quantile {
    pub fn new(density: DiscreteDensity) -> Self {
        let mut edge_cdf = Vec::with_capacity(density.len() + 1);
        let mut acc = 0.0;
        edge_cdf.push(0.0);
        for w in density.weights() {
            acc += w;
            edge_cdf.push(acc);
        }
        let total = density.total_mass();
        *edge_cdf.last_mut().unwrap() = total;
        // Round-off can push interior values past the total.
        for v in edge_cdf.iter_mut() {
            *v = v.min(total);
        }
        let mut edge_tail = vec![0.0; density.len() + 1];
        for k in (0..density.len()).rev() {
            edge_tail[k] = edge_tail[k + 1] + density.weights()[k];
        }
        edge_tail[0] = total;
        for v in edge_tail.iter_mut() {
            *v = v.min(total);
        }
        Self {
            density,
            edge_cdf,
            edge_tail,
        }
    }

    pub fn density(&self) -> &DiscreteDensity {
        &self.density
    }

    pub fn total_mass(&self) -> f64 {
        self.density.total_mass()
    }

    pub fn edge_cdf(&self) -> &[f64] {
        &self.edge_cdf
    }

    /// Cdf at each grid point (midpoint of each cell).
    pub fn cdf_at_points(&self) -> Vec<f64> {
        self.edge_cdf
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]))
            .collect()
    }

    /// Cdf at an arbitrary position (0 left of the grid, total mass right of it).
    pub fn cdf(&self, x: f64) -> f64 {
        let edges = self.density.grid().edges();
        if x <= edges[0] {
            return 0.0;
        }
        if x >= edges[edges.len() - 1] {
            return self.total_mass();
        }
        let k = self.density.grid().cell_of(x);
        let t = (x - edges[k]) / (edges[k + 1] - edges[k]);
        self.edge_cdf[k] + t * (self.edge_cdf[k + 1] - self.edge_cdf[k])
    }

    /// Mass to the right of `x`; accurate in relative terms near the right end.
    pub fn survival(&self, x: f64) -> f64 {
        let edges = self.density.grid().edges();
        if x <= edges[0] {
            return self.total_mass();
        }
        if x >= edges[edges.len() - 1] {
            return 0.0;
        }
        let k = self.density.grid().cell_of(x);
        let t = (x - edges[k]) / (edges[k + 1] - edges[k]);
        self.edge_tail[k + 1] + (1.0 - t) * (self.edge_tail[k] - self.edge_tail[k + 1])
    }

    /// Largest position whose survival mass reaches `s`.
    pub fn inverse_survival(&self, s: f64) -> Result<f64> {
        let total = self.total_mass();
        if !(0.0..=total).contains(&s) {
            return Err(Error::Domain {
                value: s,
                lo: 0.0,
                hi: total,
            });
        }
        let edges = self.density.grid().edges();
        let m = self.density.len();
        if s == 0.0 {
            let last = self
                .density
                .weights()
                .iter()
                .rposition(|w| *w > 0.0)
                .unwrap_or(m - 1);
            return Ok(edges[last + 1]);
        }
        // edge_tail is nonincreasing: last edge with tail >= s.
        let j = self.edge_tail.partition_point(|&c| c >= s).clamp(1, m);
        let k = j - 1;
        let (c0, c1) = (self.edge_tail[k], self.edge_tail[k + 1]);
        let t = if c0 > c1 { (c0 - s) / (c0 - c1) } else { 0.0 };
        Ok(edges[k] + t.clamp(0.0, 1.0) * (edges[k + 1] - edges[k]))
    }

    /// Smallest position whose cdf reaches `w`.
    pub fn inverse_cdf(&self, w: f64) -> Result<f64> {
        let total = self.total_mass();
        if !(0.0..=total).contains(&w) {
            return Err(Error::Domain {
                value: w,
                lo: 0.0,
                hi: total,
            });
        }
        let edges = self.density.grid().edges();
        if w == 0.0 {
            let first = self
                .density
                .weights()
                .iter()
                .position(|m| *m > 0.0)
                .unwrap_or(0);
            return Ok(edges[first]);
        }
        // First edge with cdf >= w; the answer lies in the cell ending there.
        let j = self.edge_cdf.partition_point(|&c| c < w).max(1);
        let k = j - 1;
        let (c0, c1) = (self.edge_cdf[k], self.edge_cdf[k + 1]);
        let t = if c1 > c0 { (w - c0) / (c1 - c0) } else { 1.0 };
        Ok(edges[k] + t.clamp(0.0, 1.0) * (edges[k + 1] - edges[k]))
    }
}
