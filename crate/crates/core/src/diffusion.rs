//! Reference solvers for the diffusion-limit equations.
//!
//! `ExactLimit` is the algebraic eps -> 0 limit of the IMEX scheme itself:
//! the slaved degree-1 closure produces a width-2 central stencil per axis
//! plus the split-flux dissipation, and nothing in it depends on eps. It is
//! the oracle for the asymptotic-preserving equivalence tests. `FivePoint`
//! is the textbook compact implicit scheme (three-point per axis, harmonic
//! face coefficients), kept for limit-solution curves.

use std::collections::HashMap;

use crate::error::{Result, SolverError};
use crate::gray::IterationControl;
use crate::linsys::{BandedSystem, BlockSystem, SparseSystem};
use crate::mesh::{
    fill_scalar_ghosts, BoundaryKind, BoundarySpec, Grid, NeighborRef, PhysConsts,
};
use crate::moment::Dimension;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LimitMode {
    ExactLimit,
    FivePoint,
}

/// Cell values of the limit unknown with ghost storage: I^(0) for the linear
/// model, T^(0) for the gray model (G = T^4 derived where needed).
#[derive(Debug, Clone, PartialEq)]
pub struct LimitField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl LimitField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.n_total()],
        }
    }

    pub fn interior_sum(&self) -> f64 {
        self.grid
            .interior()
            .map(|(ix, iy)| self.values[self.grid.id(ix, iy)])
            .sum()
    }
}

/// streaming-closure diffusion factor of the P_N hierarchy (a_0 in 1D,
/// the squared row-0 coupling in 2D; 1/3 in both conventions)
const KAPPA: f64 = 1.0 / 3.0;
const V_MAX: f64 = 1.0;

fn ghost_value(kind: BoundaryKind, planck_of_tb: impl Fn(f64) -> f64) -> Option<f64> {
    match kind {
        BoundaryKind::MarshakInflow { t_b } => Some(planck_of_tb(t_b)),
        _ => None,
    }
}

/// Per-cell references of the scalar implicit stencil along one axis.
struct StencilRef {
    /// Some(interior storage id) for an unknown, None for boundary-known
    unknown: Option<usize>,
    /// known value when `unknown` is None
    value: f64,
}

fn resolve_scalar(
    grid: &Grid,
    bc: &BoundarySpec,
    ix: isize,
    iy: isize,
    axis: usize,
    off: isize,
    known: &impl Fn(BoundaryKind) -> f64,
) -> StencilRef {
    match bc.resolve(grid, ix, iy, axis, off) {
        NeighborRef::Unknown(id) => StencilRef {
            unknown: Some(id),
            value: 0.0,
        },
        NeighborRef::Known(_) => {
            let n = grid.n[axis] as isize;
            let pos = if axis == 0 { ix } else { iy };
            let high = pos + off >= n;
            StencilRef {
                unknown: None,
                value: known(bc.side(axis, high)),
            }
        }
    }
}

/// Implicit step of (1/c) dI/dt - div(1/(3 sigma_s) grad I) = -sigma_a I + g.
pub struct LinearLimitSolver {
    pub grid: Grid,
    pub bc: BoundarySpec,
    pub sigma_s: Vec<f64>,
    pub sigma_a: Vec<f64>,
    pub source: Vec<f64>,
    pub c: f64,
    pub mode: LimitMode,
    pub rel_tol: f64,
    cache: HashMap<(u64, u64), BlockSystem>,
}

impl LinearLimitSolver {
    pub fn new(
        grid: Grid,
        bc: BoundarySpec,
        mut sigma_s: Vec<f64>,
        mut sigma_a: Vec<f64>,
        mut source: Vec<f64>,
        c: f64,
        mode: LimitMode,
    ) -> Result<Self> {
        bc.validate(&grid)?;
        if sigma_s.iter().take(grid.n_total()).any(|s| *s < 0.0) {
            return Err(SolverError::Parameter("sigma_s must be nonnegative".into()));
        }
        fill_scalar_ghosts(&grid, &bc, &mut sigma_s);
        fill_scalar_ghosts(&grid, &bc, &mut sigma_a);
        fill_scalar_ghosts(&grid, &bc, &mut source);
        Ok(Self {
            grid,
            bc,
            sigma_s,
            sigma_a,
            source,
            c,
            mode,
            rel_tol: 1e-12,
            cache: HashMap::new(),
        })
    }

    /// One theta-weighted implicit step; order 1 is backward Euler, order 2
    /// Crank-Nicolson (matching the limit of the corresponding IMEX scheme).
    pub fn step(&mut self, field: &mut LimitField, dt: f64, order: u8) -> Result<()> {
        let theta: f64 = match order {
            1 => 1.0,
            2 => 0.5,
            _ => return Err(SolverError::Parameter(format!("order {order}"))),
        };
        fill_limit_ghosts(&self.grid, &self.bc, &mut field.values, |t_b| t_b);
        let n_int = self.grid.n[0] * self.grid.n[1];
        let mut rhs = vec![0.0; n_int];
        let mass = 1.0 / (self.c * dt);
        let key = (dt.to_bits(), theta.to_bits());

        // old-time operator application for the CN part
        let old_op: Vec<f64> = if theta < 1.0 {
            self.apply_operator(&field.values)
        } else {
            vec![0.0; n_int]
        };

        let have = self.cache.contains_key(&key);
        let mut trips: Vec<(usize, usize, f64)> = Vec::new();
        let mut banded = if !have && matches!(self.grid.dim, Dimension::One) {
            Some(BandedSystem::new(n_int, 2, 2))
        } else {
            None
        };
        {
            let mut add = |r: usize, c: usize, v: f64| {
                if let Some(b) = banded.as_mut() {
                    b.add(r, c, v);
                } else if !have {
                    trips.push((r, c, v));
                }
            };
            self.assemble(theta, mass, &mut add, &mut rhs, &field.values);
        }
        if !have {
            let system = match self.grid.dim {
                Dimension::One => BlockSystem::Banded(banded.take().unwrap()),
                Dimension::Two => {
                    BlockSystem::Sparse(SparseSystem::from_triplets(n_int, &mut trips)?)
                }
            };
            self.cache.insert(key, system);
        }

        for (row, (ix, iy)) in self.grid.interior().enumerate() {
            let id = self.grid.id(ix, iy);
            let u_n = field.values[id];
            rhs[row] += mass * u_n + self.source[id]
                - (1.0 - theta) * (old_op[row] + self.sigma_a[id] * u_n);
        }
        let sol = self.cache.get_mut(&key).unwrap().solve(&rhs, self.rel_tol)?;
        for (row, (ix, iy)) in self.grid.interior().enumerate() {
            field.values[self.grid.id(ix, iy)] = sol[row];
        }
        fill_limit_ghosts(&self.grid, &self.bc, &mut field.values, |t_b| t_b);
        Ok(())
    }

    /// theta-scaled implicit stencil: diagonal mass/absorption plus the
    /// diffusion operator; known boundary values land in `rhs`.
    fn assemble(
        &self,
        theta: f64,
        mass: f64,
        add: &mut impl FnMut(usize, usize, f64),
        rhs: &mut [f64],
        ghosts: &[f64],
    ) {
        let known = |kind: BoundaryKind| -> f64 {
            ghost_value(kind, |t_b| t_b).unwrap_or(0.0)
        };
        let _ = ghosts;
        for (row, (ix, iy)) in self.grid.interior().enumerate() {
            let id = self.grid.id(ix, iy);
            add(row, row, mass + theta * self.sigma_a[id]);
            for axis in 0..self.grid.n_axes() {
                let dx = self.grid.dx(axis);
                let stride = self.grid.stride(axis);
                let mut put = |off: isize, coeff: f64| {
                    if coeff == 0.0 {
                        return;
                    }
                    let sr = resolve_scalar(&self.grid, &self.bc, ix, iy, axis, off, &known);
                    match sr.unknown {
                        Some(uid) => add(row, crate::scheme::interior_index(&self.grid, uid), theta * coeff),
                        None => rhs[row] -= theta * coeff * sr.value,
                    }
                };
                match self.mode {
                    LimitMode::ExactLimit => {
                        let sp = self.sigma_s[id + stride];
                        let sm = self.sigma_s[id - stride];
                        let k = KAPPA / (4.0 * dx * dx);
                        // -(kappa/(4 dx^2)) [(u_{+2} - u)/sigma_+ - (u - u_{-2})/sigma_-]
                        put(2, -k / sp);
                        put(0, k / sp + k / sm);
                        put(-2, -k / sm);
                        // split-flux dissipation, O(dx)
                        let vv = V_MAX / (2.0 * dx);
                        put(1, -vv);
                        put(0, 2.0 * vv);
                        put(-1, -vv);
                    }
                    LimitMode::FivePoint => {
                        let sp = harmonic(self.sigma_s[id], self.sigma_s[id + stride]);
                        let sm = harmonic(self.sigma_s[id], self.sigma_s[id - stride]);
                        let k = 1.0 / (3.0 * dx * dx);
                        put(1, -k / sp);
                        put(0, k / sp + k / sm);
                        put(-1, -k / sm);
                    }
                }
            }
        }
    }

    /// apply the same spatial operator to known data (for the CN average)
    fn apply_operator(&self, values: &[f64]) -> Vec<f64> {
        let n_int = self.grid.n[0] * self.grid.n[1];
        let mut out = vec![0.0; n_int];
        for (row, (ix, iy)) in self.grid.interior().enumerate() {
            let id = self.grid.id(ix, iy);
            for axis in 0..self.grid.n_axes() {
                let dx = self.grid.dx(axis);
                let stride = self.grid.stride(axis);
                match self.mode {
                    LimitMode::ExactLimit => {
                        let sp = self.sigma_s[id + stride];
                        let sm = self.sigma_s[id - stride];
                        let k = KAPPA / (4.0 * dx * dx);
                        out[row] -= k / sp * (values[id + 2 * stride] - values[id])
                            - k / sm * (values[id] - values[id - 2 * stride]);
                        out[row] -= V_MAX / (2.0 * dx)
                            * (values[id + stride] - 2.0 * values[id] + values[id - stride]);
                    }
                    LimitMode::FivePoint => {
                        let sp = harmonic(self.sigma_s[id], self.sigma_s[id + stride]);
                        let sm = harmonic(self.sigma_s[id], self.sigma_s[id - stride]);
                        let k = 1.0 / (3.0 * dx * dx);
                        out[row] -= k / sp * (values[id + stride] - values[id])
                            - k / sm * (values[id] - values[id - stride]);
                    }
                }
            }
        }
        out
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// ghost fill for scalar limit fields: periodic wrap, extrapolation copy,
/// Marshak ghosts set to the boundary value mapped by `of_tb`
pub fn fill_limit_ghosts(
    grid: &Grid,
    bc: &BoundarySpec,
    values: &mut [f64],
    of_tb: impl Fn(f64) -> f64 + Copy,
) {
    use crate::mesh::GHOST;
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
            let kind = bc.side(axis, high);
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
                    values[dst] = match kind {
                        BoundaryKind::MarshakInflow { t_b } => of_tb(t_b),
                        _ => values[src],
                    };
                }
            }
        }
    }
}

/// Opacity of the gray limit: constant per cell or rho / T^3 with the cube
/// frozen at the Picard iterate.
#[derive(Debug, Clone)]
pub enum LimitOpacity {
    Constant(Vec<f64>),
    RhoOverT3(Vec<f64>),
}

/// Implicit step of C_v dT/dt + a dG/dt = div(ac/(3 sigma) grad G), G = T^4,
/// with the same psi-linearized Picard treatment as the gray stepper.
pub struct GrayLimitSolver {
    pub grid: Grid,
    pub bc: BoundarySpec,
    pub c_v: Vec<f64>,
    pub opacity: LimitOpacity,
    pub consts: PhysConsts,
    pub mode: LimitMode,
    pub ctrl: IterationControl,
    pub rel_tol: f64,
    banded_scratch: Option<BandedSystem>,
    blocktri: Option<crate::linsys::BlockTri2>,
    sol_scratch: Vec<f64>,
    res_scratch: Vec<f64>,
    /// per interior cell: columns of the offsets {-2,-1,+1,+2}; usize::MAX
    /// marks boundary-known data (value = T_b^4 of that side)
    nbr_1d: Vec<[(usize, f64); 4]>,
    /// previous-step temperature, warm-starting the Picard iteration
    t_prev: Option<Vec<f64>>,
    #[cfg(test)]
    pub(crate) force_generic: bool,
}

impl GrayLimitSolver {
    pub fn new(
        grid: Grid,
        bc: BoundarySpec,
        mut c_v: Vec<f64>,
        mut opacity: LimitOpacity,
        consts: PhysConsts,
        mode: LimitMode,
        ctrl: IterationControl,
    ) -> Result<Self> {
        bc.validate(&grid)?;
        fill_scalar_ghosts(&grid, &bc, &mut c_v);
        match &mut opacity {
            LimitOpacity::Constant(v) | LimitOpacity::RhoOverT3(v) => {
                fill_scalar_ghosts(&grid, &bc, v)
            }
        }
        let nbr_1d = if matches!(grid.dim, Dimension::One) {
            let n = grid.n[0] as isize;
            (0..n)
                .map(|ix| {
                    [-2isize, -1, 1, 2].map(|off| match bc.resolve(&grid, ix, 0, 0, off) {
                        NeighborRef::Unknown(id) => {
                            (crate::scheme::interior_index(&grid, id), 0.0)
                        }
                        NeighborRef::Known(_) => {
                            let high = ix + off >= n;
                            match bc.side(0, high) {
                                BoundaryKind::MarshakInflow { t_b } => (usize::MAX, t_b.powi(4)),
                                _ => (usize::MAX, 0.0),
                            }
                        }
                    })
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            grid,
            bc,
            c_v,
            opacity,
            consts,
            mode,
            ctrl,
            rel_tol: 1e-12,
            banded_scratch: None,
            blocktri: None,
            sol_scratch: Vec::new(),
            res_scratch: Vec::new(),
            nbr_1d,
            t_prev: None,
            #[cfg(test)]
            force_generic: false,
        })
    }

    /// field holds T; returns the Picard iteration count.
    pub fn step(&mut self, field: &mut LimitField, dt: f64, order: u8) -> Result<usize> {
        let theta: f64 = match order {
            1 => 1.0,
            2 => 0.5,
            _ => return Err(SolverError::Parameter(format!("order {order}"))),
        };
        fill_limit_ghosts(&self.grid, &self.bc, &mut field.values, |t_b| t_b);
        let n_int = self.grid.n[0] * self.grid.n[1];
        let n_total = self.grid.n_total();
        let (a_rad, c_light) = (self.consts.a, self.consts.c);

        let t_old = field.values.clone();
        let g_old: Vec<f64> = t_old.iter().map(|t| t.powi(4)).collect();
        let mut t_k = t_old.clone();
        if let Some(prev) = &self.t_prev {
            if prev.len() == n_total {
                for (ix, iy) in self.grid.interior() {
                    let id = self.grid.id(ix, iy);
                    let guess = 2.0 * t_old[id] - prev[id];
                    if guess > 0.0 {
                        t_k[id] = guess;
                    }
                }
                fill_limit_ghosts(&self.grid, &self.bc, &mut t_k, |t_b| t_b);
            }
        }
        let mut sigma_eff = vec![0.0; n_total];

        // old-time operator for CN, with the opacity frozen per iteration for
        // the nonlinear model (recomputed inside the loop in that case)
        let mut iters = 0usize;
        let mut converged = false;
        while iters < self.ctrl.n0 {
            iters += 1;
            for id in 0..n_total {
                sigma_eff[id] = match &self.opacity {
                    LimitOpacity::Constant(s) => s[id],
                    LimitOpacity::RhoOverT3(rho) => {
                        let tk3 = t_k[id].powi(3);
                        let t3_eff = if theta == 1.0 {
                            tk3
                        } else {
                            (tk3 + t_old[id].powi(3)) / 2.0
                        };
                        rho[id] / t3_eff
                    }
                };
            }

            // unknown psi = G^{n+1}; the known ghost value is T_b^4
            let mass_g = a_rad / dt; // (1/c) d(ac G)/dt
            let ac = a_rad * c_light;

            // stencil of the theta-scaled operator acting on psi along one
            // axis: (coeff at -2, -1, diag, +1, +2)
            let stencil = |id: usize, stride: usize, dx: f64| -> [f64; 5] {
                match self.mode {
                    LimitMode::ExactLimit => {
                        let sp = sigma_eff[id + stride];
                        let sm = sigma_eff[id - stride];
                        let k = ac * KAPPA / (4.0 * dx * dx) / c_light;
                        let vv = ac * V_MAX / (2.0 * dx) / c_light;
                        [-k / sm, -vv, k / sp + k / sm + 2.0 * vv, -vv, -k / sp]
                    }
                    LimitMode::FivePoint => {
                        let sp = harmonic(sigma_eff[id], sigma_eff[id + stride]);
                        let sm = harmonic(sigma_eff[id], sigma_eff[id - stride]);
                        let k = ac / (3.0 * dx * dx) / c_light;
                        [0.0, -k / sm, k / sp + k / sm, -k / sp, 0.0]
                    }
                }
            };
            let old_op_at = |id: usize| -> f64 {
                let mut acc = 0.0;
                for axis in 0..self.grid.n_axes() {
                    let st = stencil(id, self.grid.stride(axis), self.grid.dx(axis));
                    let stride = self.grid.stride(axis);
                    acc += st[0] * g_old[id - 2 * stride]
                        + st[1] * g_old[id - stride]
                        + st[2] * g_old[id]
                        + st[3] * g_old[id + stride]
                        + st[4] * g_old[id + 2 * stride];
                }
                acc
            };

            #[cfg(test)]
            let fast = matches!(self.grid.dim, Dimension::One)
                && !matches!(self.bc.side(0, false), BoundaryKind::Periodic)
                && !self.force_generic;
            #[cfg(not(test))]
            let fast = matches!(self.grid.dim, Dimension::One)
                && !matches!(self.bc.side(0, false), BoundaryKind::Periodic);
            let mut psi_fast: Option<Vec<f64>> = None;
            if fast {
                let nb = n_int.div_ceil(2);
                let mut bt = self
                    .blocktri
                    .take()
                    .filter(|b| b.n == nb)
                    .unwrap_or_else(|| crate::linsys::BlockTri2::new(nb));
                bt.reset();
                let mut rhs_f = std::mem::take(&mut self.res_scratch);
                rhs_f.resize(2 * nb, 0.0);
                rhs_f.iter_mut().for_each(|v| *v = 0.0);
                if n_int % 2 == 1 {
                    bt.add(2 * nb - 1, 2 * nb - 1, 1.0);
                }
                let dx = self.grid.dx(0);
                for ix in 0..n_int {
                    let id = self.grid.id(ix as isize, 0);
                    let tk3 = t_k[id].powi(3);
                    let tau = self.c_v[id] / (dt * tk3);
                    let st = stencil(id, 1, dx);
                    bt.add(ix, ix, mass_g + tau + theta * st[2]);
                    rhs_f[ix] += mass_g * g_old[id] + self.c_v[id] * t_old[id] / dt;
                    let nbr = &self.nbr_1d[ix];
                    for (slot, coeff) in [(0usize, st[0]), (1, st[1]), (2, st[3]), (3, st[4])] {
                        if coeff == 0.0 {
                            continue;
                        }
                        let (col, tb4) = nbr[slot];
                        if col != usize::MAX {
                            bt.add(ix, col, theta * coeff);
                        } else {
                            rhs_f[ix] -= theta * coeff * tb4;
                        }
                    }
                    if theta < 1.0 {
                        rhs_f[ix] -= (1.0 - theta) * old_op_at(id);
                    }
                }
                let mut x = std::mem::take(&mut self.sol_scratch);
                if bt.try_solve(&rhs_f, &mut x).is_some() {
                    // residual guard before accepting the pivot-free solve
                    let mut r = vec![0.0; 2 * nb];
                    bt.matvec(&x, &mut r);
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for i in 0..2 * nb {
                        let e = rhs_f[i] - r[i];
                        num += e * e;
                        den += rhs_f[i] * rhs_f[i];
                    }
                    if num.sqrt() <= self.rel_tol * den.sqrt().max(f64::MIN_POSITIVE) {
                        x.truncate(n_int);
                        psi_fast = Some(x);
                    } else {
                        self.sol_scratch = x;
                    }
                } else {
                    self.sol_scratch = x;
                }
                self.blocktri = Some(bt);
                self.res_scratch = rhs_f;
            }
            if let Some(p) = &psi_fast {
                debug_assert_eq!(p.len(), n_int);
            }

            let mut banded = if psi_fast.is_none() && matches!(self.grid.dim, Dimension::One) {
                let mut b = self
                    .banded_scratch
                    .take()
                    .filter(|b| b.n == n_int)
                    .unwrap_or_else(|| BandedSystem::new(n_int, 2, 2));
                b.reset();
                Some(b)
            } else {
                None
            };
            let mut trips: Vec<(usize, usize, f64)> = Vec::new();
            let mut rhs = vec![0.0; if psi_fast.is_some() { 0 } else { n_int }];
            let known = |kind: BoundaryKind| -> f64 {
                ghost_value(kind, |t_b| t_b.powi(4)).unwrap_or(0.0)
            };
            for (row, (ix, iy)) in self.grid.interior().enumerate() {
                if psi_fast.is_some() {
                    break;
                }
                let id = self.grid.id(ix, iy);
                let tk3 = t_k[id].powi(3);
                let tau = self.c_v[id] / (dt * tk3);
                {
                    let mut add = |r: usize, c: usize, v: f64| {
                        if let Some(b) = banded.as_mut() {
                            b.add(r, c, v);
                        } else {
                            trips.push((r, c, v));
                        }
                    };
                    add(row, row, mass_g + tau);

                    for axis in 0..self.grid.n_axes() {
                        let dx = self.grid.dx(axis);
                        let stride = self.grid.stride(axis);
                        let mut put = |off: isize, coeff: f64| {
                            if coeff == 0.0 {
                                return;
                            }
                            let sr =
                                resolve_scalar(&self.grid, &self.bc, ix, iy, axis, off, &known);
                            match sr.unknown {
                                Some(uid) => add(
                                    row,
                                    crate::scheme::interior_index(&self.grid, uid),
                                    theta * coeff,
                                ),
                                None => rhs[row] -= theta * coeff * sr.value,
                            }
                        };
                        // operator acts on I0 = a c psi
                        let ac = a_rad * c_light;
                        match self.mode {
                            LimitMode::ExactLimit => {
                                let sp = sigma_eff[id + stride];
                                let sm = sigma_eff[id - stride];
                                let k = ac * KAPPA / (4.0 * dx * dx) / c_light;
                                put(2, -k / sp);
                                put(0, k / sp + k / sm);
                                put(-2, -k / sm);
                                let vv = ac * V_MAX / (2.0 * dx) / c_light;
                                put(1, -vv);
                                put(0, 2.0 * vv);
                                put(-1, -vv);
                            }
                            LimitMode::FivePoint => {
                                let sp = harmonic(sigma_eff[id], sigma_eff[id + stride]);
                                let sm = harmonic(sigma_eff[id], sigma_eff[id - stride]);
                                let k = ac / (3.0 * dx * dx) / c_light;
                                put(1, -k / sp);
                                put(0, k / sp + k / sm);
                                put(-1, -k / sm);
                            }
                        }
                    }
                }
                rhs[row] += mass_g * g_old[id] + self.c_v[id] * t_old[id] / dt;
                if theta < 1.0 {
                    // CN: apply the same operator to the old G
                    let mut old_op = 0.0;
                    for axis in 0..self.grid.n_axes() {
                        let dx = self.grid.dx(axis);
                        let stride = self.grid.stride(axis);
                        let ac = a_rad * c_light;
                        match self.mode {
                            LimitMode::ExactLimit => {
                                let sp = sigma_eff[id + stride];
                                let sm = sigma_eff[id - stride];
                                let k = ac * KAPPA / (4.0 * dx * dx) / c_light;
                                old_op -= k / sp * (g_old[id + 2 * stride] - g_old[id])
                                    - k / sm * (g_old[id] - g_old[id - 2 * stride]);
                                old_op -= ac * V_MAX / (2.0 * dx) / c_light
                                    * (g_old[id + stride] - 2.0 * g_old[id]
                                        + g_old[id - stride]);
                            }
                            LimitMode::FivePoint => {
                                let sp = harmonic(sigma_eff[id], sigma_eff[id + stride]);
                                let sm = harmonic(sigma_eff[id], sigma_eff[id - stride]);
                                let k = ac / (3.0 * dx * dx) / c_light;
                                old_op -= k / sp * (g_old[id + stride] - g_old[id])
                                    - k / sm * (g_old[id] - g_old[id - stride]);
                            }
                        }
                    }
                    rhs[row] -= (1.0 - theta) * old_op;
                }
            }

            let mut psi = if let Some(p) = psi_fast {
                p
            } else {
                let mut system = match self.grid.dim {
                    Dimension::One => BlockSystem::Banded(banded.take().unwrap()),
                    Dimension::Two => {
                        BlockSystem::Sparse(SparseSystem::from_triplets(n_int, &mut trips)?)
                    }
                };
                let p = system.solve(&rhs, self.rel_tol)?;
                if let BlockSystem::Banded(b) = system {
                    self.banded_scratch = Some(b);
                }
                p
            };

            // damped update on positivity loss
            let mut damp = 0;
            while psi.iter().any(|v| *v <= 0.0) && damp < 10 {
                for (row, (ix, iy)) in self.grid.interior().enumerate() {
                    let id = self.grid.id(ix, iy);
                    psi[row] = 0.5 * (psi[row] + t_k[id].powi(4));
                }
                damp += 1;
            }
            if let Some(bad) = psi.iter().position(|v| *v <= 0.0) {
                return Err(SolverError::Positivity {
                    cell: bad,
                    what: "psi",
                    value: psi[bad],
                });
            }

            // constant opacity updates T = psi^{1/4}; the nonlinear model at
            // theta = 1 mirrors the full scheme's linearization T = psi/(T^k)^3
            // (same fixed point psi = T^4, faster contraction)
            let t_form = matches!(self.opacity, LimitOpacity::RhoOverT3(_)) && theta == 1.0;
            let mut increment = 0.0f64;
            for (row, (ix, iy)) in self.grid.interior().enumerate() {
                let id = self.grid.id(ix, iy);
                let t_new = if t_form {
                    psi[row] / t_k[id].powi(3)
                } else {
                    psi[row].powf(0.25)
                };
                increment = increment.max((t_new - t_k[id]).abs());
                t_k[id] = t_new;
            }
            fill_limit_ghosts(&self.grid, &self.bc, &mut t_k, |t_b| t_b);
            if increment < self.ctrl.eps_bar {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("gray limit Picard hit n0 = {}", self.ctrl.n0);
        }
        self.t_prev = Some(t_old);
        field.values = t_k;
        Ok(iters)
    }
}
