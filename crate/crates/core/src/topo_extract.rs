//! Grid-and-sampling critical point extraction.
//!
//! The field is sampled on a regular grid; cells whose corner values change
//! sign in both components are refined by random sampling, keeping the
//! minimum-norm sample as the cell's critical point. A cell is rejected when
//! a Newton step from that sample leaves it, and of accepted points in
//! adjacent cells only the lowest-norm one is kept. Accepted points are
//! classified from the exact Jacobian at the refined location.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{analyze_jacobian, classify, CriticalClass, CriticalKind, JacobianAnalysis, Stability};
use crate::error::{Error, Result};
use crate::field_model::{cell_center, grid_points, DomainPoint, VectorField, VectorFieldGrid};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "CriticalPointRecord", from = "CriticalPointRecord")]
pub struct CriticalPoint {
    pub location: DomainPoint,
    pub norm_at_point: f64,
    pub analysis: JacobianAnalysis,
    pub cls: CriticalClass,
}

/// Flat JSON form of a [`CriticalPoint`], one entry of an extraction report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalPointRecord {
    pub x: f64,
    pub y: f64,
    pub norm: f64,
    pub trace: f64,
    pub det: f64,
    pub delta: f64,
    pub lam1_re: f64,
    pub lam2_re: f64,
    pub kind: CriticalKind,
    pub stability: Stability,
}

impl From<CriticalPoint> for CriticalPointRecord {
    fn from(c: CriticalPoint) -> Self {
        Self {
            x: c.location.x,
            y: c.location.y,
            norm: c.norm_at_point,
            trace: c.analysis.trace,
            det: c.analysis.det,
            delta: c.analysis.delta,
            lam1_re: c.analysis.lam1_re,
            lam2_re: c.analysis.lam2_re,
            kind: c.cls.kind,
            stability: c.cls.stability,
        }
    }
}

impl From<CriticalPointRecord> for CriticalPoint {
    fn from(r: CriticalPointRecord) -> Self {
        Self {
            location: DomainPoint::new(r.x, r.y),
            norm_at_point: r.norm,
            analysis: JacobianAnalysis {
                trace: r.trace,
                det: r.det,
                delta: r.delta,
                lam1_re: r.lam1_re,
                lam2_re: r.lam2_re,
                is_complex: r.delta < 0.0,
            },
            cls: CriticalClass {
                kind: r.kind,
                stability: r.stability,
            },
        }
    }
}

impl CriticalPoint {
    /// Analyses and classifies the field's Jacobian at `location`.
    pub fn at(field: &impl VectorField, location: DomainPoint, eps_class: f64) -> Result<Self> {
        let [u, v] = field.value(location);
        let analysis = analyze_jacobian(field.jacobian(location))?;
        Ok(Self {
            location,
            norm_at_point: u.hypot(v),
            analysis,
            cls: classify(&analysis, eps_class),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub grid_res: usize,
    pub samples_per_cell: usize,
    /// Acceptance threshold as a fraction of the RMS field norm on the grid.
    pub norm_accept_tau: f64,
    pub eps_class: f64,
    pub seed: u64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            grid_res: 256,
            samples_per_cell: 256,
            norm_accept_tau: 0.02,
            eps_class: crate::diffmath::DEFAULT_EPS_CLASS,
            seed: 0,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_res < 16 {
            return Err(Error::invalid("grid_res must be at least 16"));
        }
        if self.samples_per_cell == 0 {
            return Err(Error::invalid("samples_per_cell must be positive"));
        }
        if !(self.norm_accept_tau > 0.0) || !(self.eps_class > 0.0) {
            return Err(Error::invalid("thresholds must be positive"));
        }
        Ok(())
    }

    /// Diagonal of one extraction cell in normalized units.
    pub fn cell_diagonal(&self) -> f64 {
        2.0 * std::f64::consts::SQRT_2 / self.grid_res as f64
    }
}

/// Cell `(r, c)` spans the sample centres `(r, c)` to `(r + 1, c + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub r: usize,
    pub c: usize,
}

fn mixed_sign(vals: [f64; 4]) -> bool {
    let all_pos = vals.iter().all(|&v| v > 0.0);
    let all_neg = vals.iter().all(|&v| v < 0.0);
    !all_pos && !all_neg
}

/// Cells whose four corner values are of mixed sign in both components, in
/// row-major order.
pub fn candidate_cells(grid: &VectorFieldGrid) -> Vec<Cell> {
    let mut out = Vec::new();
    for r in 0..grid.height - 1 {
        for c in 0..grid.width - 1 {
            let corners = [grid.get(r, c), grid.get(r, c + 1), grid.get(r + 1, c), grid.get(r + 1, c + 1)];
            if mixed_sign(corners.map(|v| v[0])) && mixed_sign(corners.map(|v| v[1])) {
                out.push(Cell { r, c });
            }
        }
    }
    out
}

/// Minimum-norm point among `samples` uniform draws inside `cell` of a
/// `width × height` sampling grid.
pub fn refine_cell(
    field: &impl VectorField,
    width: usize,
    height: usize,
    cell: Cell,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<(DomainPoint, f64)> {
    if cell.r + 1 >= height || cell.c + 1 >= width {
        return Err(Error::invalid(format!("cell {cell:?} outside {width}x{height} grid")));
    }
    if samples == 0 {
        return Err(Error::invalid("need at least one sample per cell"));
    }
    let lo = cell_center(cell.r, cell.c, width, height);
    let hi = cell_center(cell.r + 1, cell.c + 1, width, height);
    let mut pts = ndarray::Array2::zeros((samples, 2));
    for i in 0..samples {
        pts[[i, 0]] = lo.x + (hi.x - lo.x) * rng.random::<f64>();
        pts[[i, 1]] = lo.y + (hi.y - lo.y) * rng.random::<f64>();
    }
    let vals = field.values(&pts);
    let mut best = (DomainPoint::default(), f64::INFINITY);
    for i in 0..samples {
        let n = vals[[i, 0]].hypot(vals[[i, 1]]);
        if n < best.1 {
            best = (DomainPoint::new(pts[[i, 0]], pts[[i, 1]]), n);
        }
    }
    Ok(best)
}

/// Samples `field` on a `grid_res²` grid.
pub fn sample_grid(field: &impl VectorField, grid_res: usize) -> Result<VectorFieldGrid> {
    let vals = field.values(&grid_points(grid_res, grid_res));
    VectorFieldGrid::new(grid_res, grid_res, vals.into_raw_vec_and_offset().0)
}

pub fn extract(field: &impl VectorField, cfg: &ExtractConfig) -> Result<Vec<CriticalPoint>> {
    cfg.validate()?;
    let grid = sample_grid(field, cfg.grid_res)?;
    extract_from_grid(field, &grid, cfg)
}

/// Extraction reusing an already sampled grid of `field`.
pub fn extract_from_grid(
    field: &impl VectorField,
    grid: &VectorFieldGrid,
    cfg: &ExtractConfig,
) -> Result<Vec<CriticalPoint>> {
    cfg.validate()?;
    let n = (grid.width * grid.height) as f64;
    let rms = (grid.norms().map(|v| v * v).sum::<f64>() / n).sqrt();
    let threshold = cfg.norm_accept_tau * rms;
    let last_r = grid.height - 2;
    let last_c = grid.width - 2;
    let mut accepted: BTreeMap<Cell, (DomainPoint, f64)> = BTreeMap::new();
    for cell in candidate_cells(grid) {
        if cell.r == 0 || cell.c == 0 || cell.r == last_r || cell.c == last_c {
            continue;
        }
        let mut rng = stream_rng(cfg.seed, (cell.r * grid.width + cell.c) as u64);
        let (p, norm) = refine_cell(field, grid.width, grid.height, cell, cfg.samples_per_cell, &mut rng)?;
        if norm <= threshold && newton_target_in_cell(field, grid, cell, p) {
            accepted.insert(cell, (p, norm));
        }
    }
    // Cells next to a zero often pass the sign test too (both nullclines
    // cross them without meeting inside); keep only local norm minima over
    // the 8-neighbourhood, ties going to the earlier cell.
    let mut out = Vec::new();
    for (&cell, &(p, norm)) in &accepted {
        let beaten = (cell.r - 1..=cell.r + 1)
            .flat_map(|r| (cell.c - 1..=cell.c + 1).map(move |c| Cell { r, c }))
            .filter(|&n| n != cell)
            .filter_map(|n| accepted.get(&n).map(|&(_, m)| (n, m)))
            .any(|(n, m)| m < norm || (m == norm && n < cell));
        if !beaten {
            let mut cp = CriticalPoint::at(field, p, cfg.eps_class)?;
            cp.norm_at_point = norm;
            out.push(cp);
        }
    }
    Ok(out)
}

/// Fraction of a cell by which a Newton target may fall outside its cell.
const NEWTON_SLACK: f64 = 0.1;

/// Whether one Newton step from `p` stays within `cell` (up to
/// [`NEWTON_SLACK`]). Both nullclines can cross a cell without meeting in
/// it; the step then points at the zero elsewhere. A singular Jacobian gives
/// no evidence either way and passes.
fn newton_target_in_cell(field: &impl VectorField, grid: &VectorFieldGrid, cell: Cell, p: DomainPoint) -> bool {
    let j = field.jacobian(p);
    let det = j.det();
    let scale = j.to_array().iter().map(|v| v * v).sum::<f64>();
    if !(det.abs() > 1e-12 * scale) {
        return true;
    }
    let [a, b, c, d] = j.to_array();
    let [u, v] = field.value(p);
    let q = DomainPoint::new(p.x - (d * u - b * v) / det, p.y - (a * v - c * u) / det);
    let lo = cell_center(cell.r, cell.c, grid.width, grid.height);
    let hi = cell_center(cell.r + 1, cell.c + 1, grid.width, grid.height);
    let (sx, sy) = (NEWTON_SLACK * (hi.x - lo.x), NEWTON_SLACK * (hi.y - lo.y));
    q.x >= lo.x - sx && q.x <= hi.x + sx && q.y >= lo.y - sy && q.y <= hi.y + sy
}

/// Bilinear interpolation of a gridded field between its sample centres
/// (clamped to the outermost centres), for extracting from raw data.
#[derive(Debug, Clone, Copy)]
pub struct GridField<'a> {
    grid: &'a VectorFieldGrid,
}

impl<'a> GridField<'a> {
    pub fn new(grid: &'a VectorFieldGrid) -> Self {
        Self { grid }
    }

    /// Lower cell index and fractional offset along one axis.
    fn locate(coord: f64, n: usize) -> (usize, f64, f64) {
        let f = ((coord + 1.0) * n as f64 / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (f.floor() as usize).min(n - 2);
        // d(index)/d(coord), zero where the coordinate was clamped.
        let inside = (coord + 1.0) * n as f64 / 2.0 - 0.5;
        let scale = if inside >= 0.0 && inside <= (n - 1) as f64 { n as f64 / 2.0 } else { 0.0 };
        (i, f - i as f64, scale)
    }

    fn corners(&self, r: usize, c: usize) -> [[f64; 2]; 4] {
        let g = self.grid;
        [g.get(r, c), g.get(r, c + 1), g.get(r + 1, c), g.get(r + 1, c + 1)]
    }
}

impl VectorField for GridField<'_> {
    fn value(&self, p: DomainPoint) -> [f64; 2] {
        let (c, tx, _) = Self::locate(p.x, self.grid.width);
        let (r, ty, _) = Self::locate(p.y, self.grid.height);
        let [v00, v01, v10, v11] = self.corners(r, c);
        let mut out = [0.0; 2];
        for k in 0..2 {
            out[k] = (1.0 - ty) * ((1.0 - tx) * v00[k] + tx * v01[k]) + ty * ((1.0 - tx) * v10[k] + tx * v11[k]);
        }
        out
    }

    fn jacobian(&self, p: DomainPoint) -> crate::diffmath::Jacobian2 {
        let (c, tx, sx) = Self::locate(p.x, self.grid.width);
        let (r, ty, sy) = Self::locate(p.y, self.grid.height);
        let [v00, v01, v10, v11] = self.corners(r, c);
        let mut j = [0.0; 4];
        for k in 0..2 {
            let dx = (1.0 - ty) * (v01[k] - v00[k]) + ty * (v11[k] - v10[k]);
            let dy = (1.0 - tx) * (v10[k] - v00[k]) + tx * (v11[k] - v01[k]);
            j[2 * k] = dx * sx;
            j[2 * k + 1] = dy * sy;
        }
        crate::diffmath::Jacobian2::from_array(j)
    }
}

/// Extraction directly on gridded data, refining cells on the bilinear
/// interpolant; `cfg.grid_res` is ignored.
pub fn extract_grid(grid: &VectorFieldGrid, cfg: &ExtractConfig) -> Result<Vec<CriticalPoint>> {
    extract_from_grid(&GridField::new(grid), grid, cfg)
}
