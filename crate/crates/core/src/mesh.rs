//! Structured uniform finite-volume grids with two ghost layers, moment and
//! material fields, and boundary conditions.

use crate::error::{Result, SolverError};
use crate::moment::Dimension;

/// Ghost width; two layers support linear reconstruction at the first face.
pub const GHOST: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysConsts {
    /// radiation constant
    pub a: f64,
    /// speed of light
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dim: Dimension,
    /// interior cell counts per axis; n[1] = 1 in 1D
    pub n: [usize; 2],
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Grid {
    pub fn new_1d(n: usize, min: f64, max: f64) -> Result<Self> {
        if n == 0 || max <= min {
            return Err(SolverError::Config(format!(
                "bad 1D grid: n = {n}, bounds [{min}, {max}]"
            )));
        }
        Ok(Self {
            dim: Dimension::One,
            n: [n, 1],
            min: [min, 0.0],
            max: [max, 1.0],
        })
    }

    pub fn new_2d(n: [usize; 2], min: [f64; 2], max: [f64; 2]) -> Result<Self> {
        if n[0] == 0 || n[1] == 0 || max[0] <= min[0] || max[1] <= min[1] {
            return Err(SolverError::Config(format!("bad 2D grid: n = {n:?}")));
        }
        Ok(Self {
            dim: Dimension::Two,
            n,
            min,
            max,
        })
    }

    pub fn n_axes(&self) -> usize {
        match self.dim {
            Dimension::One => 1,
            Dimension::Two => 2,
        }
    }

    pub fn dx(&self, axis: usize) -> f64 {
        (self.max[axis] - self.min[axis]) / self.n[axis] as f64
    }

    /// cell volume (length in 1D, area in 2D)
    pub fn cell_volume(&self) -> f64 {
        match self.dim {
            Dimension::One => self.dx(0),
            Dimension::Two => self.dx(0) * self.dx(1),
        }
    }

    /// storage width along x including ghosts
    pub fn sx(&self) -> usize {
        self.n[0] + 2 * GHOST
    }

    /// storage height along y including ghosts (1 in 1D)
    pub fn sy(&self) -> usize {
        match self.dim {
            Dimension::One => 1,
            Dimension::Two => self.n[1] + 2 * GHOST,
        }
    }

    pub fn n_total(&self) -> usize {
        self.sx() * self.sy()
    }

    /// storage id of logical cell (ix, iy); ghosts use negative indices
    #[inline]
    pub fn id(&self, ix: isize, iy: isize) -> usize {
        let gy: isize = match self.dim {
            Dimension::One => 0,
            Dimension::Two => GHOST as isize,
        };
        ((iy + gy) as usize) * self.sx() + (ix + GHOST as isize) as usize
    }

    /// storage stride of a unit step along `axis`
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        if axis == 0 {
            1
        } else {
            self.sx()
        }
    }

    pub fn center(&self, ix: isize, iy: isize) -> [f64; 2] {
        [
            self.min[0] + (ix as f64 + 0.5) * self.dx(0),
            self.min[1] + (iy as f64 + 0.5) * self.dx(1),
        ]
    }

    /// interior cells as (ix, iy) pairs
    pub fn interior(&self) -> impl Iterator<Item = (isize, isize)> + '_ {
        let ny = self.n[1] as isize;
        let nx = self.n[0] as isize;
        (0..ny).flat_map(move |iy| (0..nx).map(move |ix| (ix, iy)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Periodic,
    Extrapolation,
    MarshakInflow { t_b: f64 },
}

/// Side order: x-low, x-high, y-low, y-high.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundarySpec {
    pub sides: [BoundaryKind; 4],
}

impl BoundarySpec {
    pub fn periodic() -> Self {
        Self {
            sides: [BoundaryKind::Periodic; 4],
        }
    }

    pub fn extrapolation() -> Self {
        Self {
            sides: [BoundaryKind::Extrapolation; 4],
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        for axis in 0..grid.n_axes() {
            let lo = matches!(self.sides[2 * axis], BoundaryKind::Periodic);
            let hi = matches!(self.sides[2 * axis + 1], BoundaryKind::Periodic);
            if lo != hi {
                return Err(SolverError::Config(format!(
                    "periodic boundary on axis {axis} must be paired"
                )));
            }
        }
        Ok(())
    }

    pub fn side(&self, axis: usize, high: bool) -> BoundaryKind {
        self.sides[2 * axis + usize::from(high)]
    }
}

/// Resolution of an implicit-stencil neighbor reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NeighborRef {
    /// neighbor is an unknown at this storage id
    Unknown(usize),
    /// neighbor value is known boundary data at this (ghost) storage id
    Known(usize),
}

impl BoundarySpec {
    /// Resolve the cell `off` steps from interior cell (ix, iy) along `axis`.
    /// Periodic wraps to an interior unknown, extrapolation folds onto the
    /// edge cell, Marshak inflow is known ghost data.
    pub fn resolve(&self, grid: &Grid, ix: isize, iy: isize, axis: usize, off: isize) -> NeighborRef {
        let n = grid.n[axis] as isize;
        let pos = if axis == 0 { ix } else { iy };
        let tgt = pos + off;
        let make = |p: isize| -> usize {
            if axis == 0 {
                grid.id(p, iy)
            } else {
                grid.id(ix, p)
            }
        };
        if tgt >= 0 && tgt < n {
            return NeighborRef::Unknown(make(tgt));
        }
        let high = tgt >= n;
        match self.side(axis, high) {
            BoundaryKind::Periodic => NeighborRef::Unknown(make(tgt.rem_euclid(n))),
            BoundaryKind::Extrapolation => NeighborRef::Unknown(make(if high { n - 1 } else { 0 })),
            BoundaryKind::MarshakInflow { .. } => NeighborRef::Known(make(tgt)),
        }
    }
}

/// Cell-averaged moment vectors over a grid, ghost layers included.
/// Degree-1 entries store the rescaled moments Ihat = I_1 / eps.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentField {
    pub grid: Grid,
    pub n_moments: usize,
    pub data: Vec<f64>,
}

impl MomentField {
    pub fn zeros(grid: &Grid, n_moments: usize) -> Self {
        Self {
            grid: grid.clone(),
            n_moments,
            data: vec![0.0; grid.n_total() * n_moments],
        }
    }

    #[inline]
    pub fn at(&self, cell: usize, m: usize) -> f64 {
        self.data[cell * self.n_moments + m]
    }

    #[inline]
    pub fn at_mut(&mut self, cell: usize, m: usize) -> &mut f64 {
        &mut self.data[cell * self.n_moments + m]
    }

    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.data[cell * self.n_moments..(cell + 1) * self.n_moments]
    }

    /// sum of one moment over interior cells
    pub fn interior_sum(&self, m: usize) -> f64 {
        self.grid
            .interior()
            .map(|(ix, iy)| self.at(self.grid.id(ix, iy), m))
            .sum()
    }
}

/// Temperature-independent opacity per cell, or the Marshak form rho / T^3.
#[derive(Debug, Clone, PartialEq)]
pub enum OpacityField {
    Constant { sigma: Vec<f64> },
    RhoOverT3 { rho: Vec<f64> },
}

impl OpacityField {
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let (vals, name) = match self {
            OpacityField::Constant { sigma } => (sigma, "sigma"),
            OpacityField::RhoOverT3 { rho } => (rho, "rho"),
        };
        if vals.len() != grid.n_total() {
            return Err(SolverError::Config(format!("{name} field has wrong size")));
        }
        for (i, v) in vals.iter().enumerate() {
            if *v <= 0.0 {
                return Err(SolverError::Parameter(format!("{name}[{i}] = {v} <= 0")));
            }
        }
        Ok(())
    }
}

/// Per-cell material temperature and region-wise material parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialState {
    pub t: Vec<f64>,
    pub c_v: Vec<f64>,
    pub opacity: OpacityField,
}

impl MaterialState {
    pub fn uniform(grid: &Grid, t0: f64, c_v: f64, opacity_value: f64, nonlinear: bool) -> Self {
        let n = grid.n_total();
        let opacity = if nonlinear {
            OpacityField::RhoOverT3 {
                rho: vec![opacity_value; n],
            }
        } else {
            OpacityField::Constant {
                sigma: vec![opacity_value; n],
            }
        };
        Self {
            t: vec![t0; n],
            c_v: vec![c_v; n],
            opacity,
        }
    }
}

enum ScalarGhost {
    Copy,
    Fixed(f64),
}

fn fill_scalar_axis(
    grid: &Grid,
    values: &mut [f64],
    axis: usize,
    kind_of: impl Fn(bool) -> (BoundaryKind, ScalarGhost),
) {
    let n = grid.n[axis] as isize;
    // transverse range: all storage rows for axis 1, interior+ghost columns for axis 0
    let (t_lo, t_hi): (isize, isize) = if axis == 0 {
        match grid.dim {
            Dimension::One => (0, 1),
            Dimension::Two => (0, grid.n[1] as isize),
        }
    } else {
        (-(GHOST as isize), grid.n[0] as isize + GHOST as isize)
    };
    for high in [false, true] {
        let (kind, ghost) = kind_of(high);
        for t in t_lo..t_hi {
            for g in 1..=GHOST as isize {
                let pos = if high { n - 1 + g } else { -g };
                let src_pos = match kind {
                    BoundaryKind::Periodic => pos.rem_euclid(n),
                    _ => {
                        if high {
                            n - 1
                        } else {
                            0
                        }
                    }
                };
                let (dst, src) = if axis == 0 {
                    (grid.id(pos, t), grid.id(src_pos, t))
                } else {
                    (grid.id(t, pos), grid.id(t, src_pos))
                };
                values[dst] = match ghost {
                    ScalarGhost::Fixed(v) => v,
                    ScalarGhost::Copy => values[src],
                };
            }
        }
    }
}

/// Fill a scalar cell field's ghosts: wrap for periodic, copy for
/// extrapolation and Marshak (material parameters extend unchanged).
pub fn fill_scalar_ghosts(grid: &Grid, spec: &BoundarySpec, values: &mut [f64]) {
    for axis in 0..grid.n_axes() {
        fill_scalar_axis(grid, values, axis, |high| {
            (spec.side(axis, high), ScalarGhost::Copy)
        });
    }
}

/// Fill moment-field ghosts and the ghost material temperature.
///
/// periodic: wraparound copy. extrapolation: constant copy of the nearest
/// interior cell. marshak_inflow(T_b): isotropic Planckian ghost state,
/// moment 0 = a c T_b^4, higher moments 0, ghost temperature T_b.
pub fn fill_ghosts(
    field: &mut MomentField,
    material: Option<&mut MaterialState>,
    spec: &BoundarySpec,
    consts: &PhysConsts,
) -> Result<()> {
    let grid = field.grid.clone();
    spec.validate(&grid)?;
    let nm = field.n_moments;

    for axis in 0..grid.n_axes() {
        let n = grid.n[axis] as isize;
        let (t_lo, t_hi): (isize, isize) = if axis == 0 {
            match grid.dim {
                Dimension::One => (0, 1),
                Dimension::Two => (0, grid.n[1] as isize),
            }
        } else {
            (-(GHOST as isize), grid.n[0] as isize + GHOST as isize)
        };
        for high in [false, true] {
            let kind = spec.side(axis, high);
            for t in t_lo..t_hi {
                for g in 1..=GHOST as isize {
                    let pos = if high { n - 1 + g } else { -g };
                    let (dst, src) = {
                        let src_pos = match kind {
                            BoundaryKind::Periodic => pos.rem_euclid(n),
                            _ => {
                                if high {
                                    n - 1
                                } else {
                                    0
                                }
                            }
                        };
                        if axis == 0 {
                            (grid.id(pos, t), grid.id(src_pos, t))
                        } else {
                            (grid.id(t, pos), grid.id(t, src_pos))
                        }
                    };
                    match kind {
                        BoundaryKind::MarshakInflow { t_b } => {
                            let planck = consts.a * consts.c * t_b.powi(4);
                            field.data[dst * nm] = planck;
                            for m in 1..nm {
                                field.data[dst * nm + m] = 0.0;
                            }
                        }
                        _ => {
                            for m in 0..nm {
                                field.data[dst * nm + m] = field.data[src * nm + m];
                            }
                        }
                    }
                }
            }
        }
    }

    if let Some(mat) = material {
        for axis in 0..grid.n_axes() {
            fill_scalar_axis(&grid, &mut mat.t, axis, |high| {
                let kind = spec.side(axis, high);
                let ghost = match kind {
                    BoundaryKind::MarshakInflow { t_b } => ScalarGhost::Fixed(t_b),
                    _ => ScalarGhost::Copy,
                };
                (kind, ghost)
            });
        }
        fill_scalar_ghosts(&grid, spec, &mut mat.c_v);
        match &mut mat.opacity {
            OpacityField::Constant { sigma } => fill_scalar_ghosts(&grid, spec, sigma),
            OpacityField::RhoOverT3 { rho } => fill_scalar_ghosts(&grid, spec, rho),
        }
    }
    Ok(())
}
