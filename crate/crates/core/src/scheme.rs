//! Shared IMEX stepping machinery.
//!
//! One step splits into (i) an implicit solve of the coupled block of the
//! degree-0 and rescaled degree-1 moments (plus the material unknown for the
//! gray model) and (ii) a sequential sweep over degrees l = 2..=M, implicit
//! in the already-known degree-(l-1) data and the pointwise relaxation,
//! explicit in the degree-(l+1) flux. theta = 1 is backward Euler on the
//! implicit terms; theta = 1/2 is the Crank-Nicolson/midpoint combination,
//! with the explicit terms evaluated at the half-step level.

use crate::error::Result;
use crate::linsys::BandedSystem;
use crate::mesh::{BoundarySpec, Grid, MomentField, NeighborRef, GHOST};
use crate::moment::{Dimension, MomentSystem};
use crate::recon::{face_delta, Reconstruction};

pub(crate) struct SchemeParams<'a> {
    pub grid: &'a Grid,
    pub bc: &'a BoundarySpec,
    pub sys: &'a MomentSystem,
    pub recon: Reconstruction,
    pub eps: f64,
    pub theta: f64,
    pub dt: f64,
    pub c: f64,
    /// disable the specialized 1D kernels (cross-checking in tests)
    pub generic_only: bool,
}

impl SchemeParams<'_> {
    pub fn n_interior(&self) -> usize {
        self.grid.n[0] * self.grid.n[1]
    }

    /// unknowns per cell in the coupled block: degree 0 (or the material
    /// unknown standing in for it) plus all degree-1 moments
    pub fn block_size(&self) -> usize {
        1 + self.sys.degree_range(1).len()
    }
}

#[inline]
pub(crate) fn interior_index(grid: &Grid, id: usize) -> usize {
    let sx = grid.sx();
    let gy = match grid.dim {
        Dimension::One => 0,
        Dimension::Two => GHOST,
    };
    let iy = id / sx - gy;
    let ix = id % sx - GHOST;
    iy * grid.n[0] + ix
}

/// reconstruction offset of the face value on one side of a face
#[inline]
fn side_delta(
    field: &MomentField,
    id: usize,
    m: usize,
    stride_cells: usize,
    dx: f64,
    recon: Reconstruction,
) -> f64 {
    let nm = field.n_moments;
    face_delta(&field.data, id * nm + m, stride_cells * nm, dx, recon)
}

/// How the degree-0 unknown enters the block: directly (linear model) or as
/// an affine map I0 = alpha * w + beta of the material unknown (gray model
/// after eliminating I0 through the material-energy equation).
pub(crate) enum I0Repr<'a> {
    Direct,
    Affine { alpha: &'a [f64], beta: &'a [f64] },
}

struct FaceSide {
    /// storage id for reading lagged data and reconstruction slopes
    phys: usize,
    /// interior storage id when this side is an unknown
    unknown: Option<usize>,
}

fn resolve_side(p: &SchemeParams, ix: isize, iy: isize, axis: usize, off: isize) -> FaceSide {
    let phys = if axis == 0 {
        p.grid.id(ix + off, iy)
    } else {
        p.grid.id(ix, iy + off)
    };
    let unknown = match p.bc.resolve(p.grid, ix, iy, axis, off) {
        NeighborRef::Unknown(cell) => Some(cell),
        NeighborRef::Known(_) => None,
    };
    FaceSide { phys, unknown }
}

pub(crate) trait MatSink {
    fn add(&mut self, r: usize, c: usize, v: f64);
}

impl MatSink for BandedSystem {
    fn add(&mut self, r: usize, c: usize, v: f64) {
        BandedSystem::add(self, r, c, v);
    }
}

impl MatSink for crate::linsys::BlockTri2 {
    fn add(&mut self, r: usize, c: usize, v: f64) {
        crate::linsys::BlockTri2::add(self, r, c, v);
    }
}

impl MatSink for Vec<(usize, usize, f64)> {
    fn add(&mut self, r: usize, c: usize, v: f64) {
        if v != 0.0 {
            self.push((r, c, v));
        }
    }
}

/// Full implicit-block flux divergence evaluated at known data (ghosts
/// filled); used for the (1 - theta) old-time part. Layout: cell-major,
/// block_size entries per interior cell, slot 0 the degree-0 equation.
pub(crate) fn block_div_eval(p: &SchemeParams, field: &MomentField) -> Vec<f64> {
    let nb = p.block_size();
    let deg1: Vec<usize> = p.sys.degree_range(1).collect();
    let v = p.sys.v_max();
    let mut out = vec![0.0; p.n_interior() * nb];
    for (ix, iy) in p.grid.interior() {
        let id = p.grid.id(ix, iy);
        let row0 = interior_index(p.grid, id) * nb;
        for axis in 0..p.grid.n_axes() {
            let dx = p.grid.dx(axis);
            let stride = p.grid.stride(axis);
            let (k_ax, c0) = p.sys.axis_deg1(axis);
            for (lo, hi) in [(id - stride, id), (id, id + stride)] {
                let sign = if lo == id { 1.0 } else { -1.0 }; // hi face: +, lo face: -
                let dl: f64 = side_delta(field, lo, 0, stride, dx, p.recon);
                let dr: f64 = side_delta(field, hi, 0, stride, dx, p.recon);
                // reconstruction enters the arithmetic averages only; the
                // dissipation acts on the raw cell-average jumps
                let i0_l = field.at(lo, 0) + dl;
                let i0_r = field.at(hi, 0) - dr;
                let dl1 = side_delta(field, lo, k_ax, stride, dx, p.recon);
                let dr1 = side_delta(field, hi, k_ax, stride, dx, p.recon);
                let ih_l = field.at(lo, k_ax) + dl1;
                let ih_r = field.at(hi, k_ax) - dr1;
                // degree-0 equation: central degree-1 + implicit viscosity on I0
                out[row0] += sign / dx
                    * (c0 * 0.5 * (ih_l + ih_r) - v / 2.0 * (field.at(hi, 0) - field.at(lo, 0)));
                // degree-1 equations
                for (slot, &ke) in deg1.iter().enumerate() {
                    let a_e0 = p.sys.coupling(axis).entry(ke, 0);
                    let mut f = 0.0;
                    if a_e0 != 0.0 {
                        f += a_e0 * 0.5 * (i0_l + i0_r);
                    }
                    f -= p.eps * v / 2.0 * (field.at(hi, ke) - field.at(lo, ke));
                    out[row0 + 1 + slot] += sign / dx * f;
                }
            }
        }
    }
    out
}

/// Explicit degree-2 flux divergence entering each degree-1 equation,
/// evaluated at the explicit-level field. Layout: n_deg1 per interior cell.
pub(crate) fn deg2_explicit_div(p: &SchemeParams, e_field: &MomentField) -> Vec<f64> {
    let deg1: Vec<usize> = p.sys.degree_range(1).collect();
    let nd = deg1.len();
    let mut out = vec![0.0; p.n_interior() * nd];
    if p.sys.order() < 2 {
        return out; // closure: no degree-2 moments
    }
    for (ix, iy) in p.grid.interior() {
        let id = p.grid.id(ix, iy);
        let base = interior_index(p.grid, id) * nd;
        for axis in 0..p.grid.n_axes() {
            let dx = p.grid.dx(axis);
            let stride = p.grid.stride(axis);
            for (lo, hi) in [(id - stride, id), (id, id + stride)] {
                let sign = if lo == id { 1.0 } else { -1.0 };
                for (slot, &ke) in deg1.iter().enumerate() {
                    let mut f = 0.0;
                    for &(k, coeff) in &p.sys.coupling(axis).to_upper[ke] {
                        let dl = side_delta(e_field, lo, k, stride, dx, p.recon);
                        let dr = side_delta(e_field, hi, k, stride, dx, p.recon);
                        f += coeff * 0.5 * ((e_field.at(lo, k) + dl) + (e_field.at(hi, k) - dr));
                    }
                    out[base + slot] += sign / dx * f;
                }
            }
        }
    }
    out
}

/// Assemble the theta-weighted implicit flux terms of the coupled block into
/// `mat` and `rhs`. Unknown layout per interior cell: [u0, deg-1 moments];
/// u0 is I0 directly or the gray material unknown via the affine map.
/// `lag` supplies reconstruction slopes and boundary-known values.
pub(crate) fn assemble_block_fluxes(
    p: &SchemeParams,
    lag: &MomentField,
    i0r: &I0Repr,
    mat: &mut dyn MatSink,
    rhs: &mut [f64],
) {
    let nb = p.block_size();
    let deg1: Vec<usize> = p.sys.degree_range(1).collect();
    let v = p.sys.v_max();
    let th = p.theta;

    for (ix, iy) in p.grid.interior() {
        let id = p.grid.id(ix, iy);
        let row0 = interior_index(p.grid, id) * nb;
        for axis in 0..p.grid.n_axes() {
            let dx = p.grid.dx(axis);
            let stride = p.grid.stride(axis);
            let (k_ax, c0) = p.sys.axis_deg1(axis);
            for (off, sign) in [(-1isize, -1.0f64), (1, 1.0)] {
                // face between self and the neighbor `off` cells away; for the
                // high face self is the left side, for the low face the right
                let nb_side = resolve_side(p, ix, iy, axis, off);
                let self_side = FaceSide {
                    phys: id,
                    unknown: Some(id),
                };
                let (left, right) = if off == 1 {
                    (&self_side, &nb_side)
                } else {
                    (&nb_side, &self_side)
                };

                // reference one moment value on one face side: returns the
                // known part and optionally (column, coefficient) pieces
                let put = |row: usize,
                               side: &FaceSide,
                               orient: f64, // +1 left side, -1 right side
                               m: usize,
                               coeff: f64,
                               mat: &mut dyn MatSink,
                               rhs: &mut [f64]| {
                    let w = th * sign / dx * coeff;
                    if w == 0.0 {
                        return;
                    }
                    let d = orient * side_delta(lag, side.phys, m, stride, dx, p.recon);
                    match side.unknown {
                        Some(cell) => {
                            let col_base = interior_index(p.grid, cell) * nb;
                            if m == 0 {
                                match i0r {
                                    I0Repr::Direct => mat.add(row, col_base, w),
                                    I0Repr::Affine { alpha, beta } => {
                                        mat.add(row, col_base, w * alpha[cell]);
                                        rhs[row] -= w * beta[cell];
                                    }
                                }
                            } else {
                                let slot = deg1.iter().position(|&k| k == m).unwrap();
                                mat.add(row, col_base + 1 + slot, w);
                            }
                            rhs[row] -= w * d;
                        }
                        None => {
                            // boundary-known value from the filled lag ghosts
                            rhs[row] -= w * (lag.at(side.phys, m) + d);
                        }
                    }
                };

                // degree-0 equation: c0 * avg(Ihat_axis) - v/2 * jump(I0);
                // dissipation on raw averages (orient 0 disables the offset)
                for (side, orient) in [(left, 1.0), (right, -1.0)] {
                    put(row0, side, orient, k_ax, c0 * 0.5, mat, rhs);
                    put(row0, side, 0.0, 0, orient * v / 2.0, mat, rhs);
                }

                // degree-1 equations
                for (slot, &ke) in deg1.iter().enumerate() {
                    let row = row0 + 1 + slot;
                    let a_e0 = p.sys.coupling(axis).entry(ke, 0);
                    for (side, orient) in [(left, 1.0), (right, -1.0)] {
                        if a_e0 != 0.0 {
                            put(row, side, orient, 0, a_e0 * 0.5, mat, rhs);
                        }
                        put(row, side, 0.0, ke, orient * p.eps * v / 2.0, mat, rhs);
                    }
                }
            }
        }
    }
}

/// Sequential implicit-explicit sweep over degrees l = 2..=M.
///
/// For each moment j of degree l:
/// [eps^2/(c dt) + theta relax] u_j = eps^2/(c dt) u_j^n - (1-theta) relax u_j^n
///   - sum_axes { theta divF(new deg l-1) + (1-theta) divF(old deg l-1)
///                + divG(explicit-level deg l+1, viscosity on deg l) }
/// with divF carrying eps a-couplings and divG carrying eps b-couplings.
/// `new_field` must hold updated degrees < l with ghosts filled; ghosts are
/// refilled after each degree so periodic wraps stay current.
#[allow(clippy::too_many_arguments)]
pub(crate) fn degree_sweep(
    p: &SchemeParams,
    new_field: &mut MomentField,
    old_field: &MomentField,
    e_field: &MomentField,
    relax: &[f64],
    consts: &crate::mesh::PhysConsts,
    material: Option<&mut crate::mesh::MaterialState>,
) -> Result<()> {
    use rayon::prelude::*;
    let m_order = p.sys.order();
    let v = p.sys.v_max();
    let mass = p.eps * p.eps / (p.c * p.dt);
    let n_int = p.n_interior();
    let n_total = p.grid.n_total();
    let n_axes = p.grid.n_axes();
    let cells: Vec<(isize, isize)> = p.grid.interior().collect();
    let active = p.recon.is_active();

    // reconstruction offsets precomputed per (axis, moment): one pass along
    // the field instead of four strided slope evaluations per face pair
    let fill_deltas = |field: &MomentField, moms: &[usize], axis: usize, out: &mut Vec<f64>| {
        out.resize(moms.len() * n_total, 0.0);
        if !active {
            return;
        }
        let dx = p.grid.dx(axis);
        let stride_cells = p.grid.stride(axis);
        let nm = field.n_moments;
        for (s, &m) in moms.iter().enumerate() {
            let seg = &mut out[s * n_total..(s + 1) * n_total];
            // slopes need both neighbors along the axis
            for id in stride_cells..n_total - stride_cells {
                seg[id] = face_delta(&field.data, id * nm + m, stride_cells * nm, dx, p.recon);
            }
        }
    };

    let mut d_new: Vec<Vec<f64>> = vec![Vec::new(); n_axes];
    let mut d_old: Vec<Vec<f64>> = vec![Vec::new(); n_axes];
    let mut d_self: Vec<Vec<f64>> = vec![Vec::new(); n_axes];
    let mut d_up: Vec<Vec<f64>> = vec![Vec::new(); n_axes];

    if matches!(p.grid.dim, Dimension::One) && !p.generic_only {
        return degree_sweep_1d(p, new_field, old_field, e_field, relax, consts, material);
    }

    let mut material = material;
    for l in 2..=m_order {
        let moms: Vec<usize> = p.sys.degree_range(l).collect();
        let lows: Vec<usize> = p.sys.degree_range(l - 1).collect();
        let ups: Vec<usize> = if l < m_order {
            p.sys.degree_range(l + 1).collect()
        } else {
            Vec::new()
        };
        let nl = moms.len();
        let low0 = lows[0];
        let up0 = ups.first().copied().unwrap_or(0);
        let mom0 = moms[0];
        // degree-1 data are stored rescaled (Ihat = I_1/eps), so the l = 2
        // coupling picks up an extra eps
        let scale = if l == 2 { p.eps * p.eps } else { p.eps };

        for axis in 0..n_axes {
            fill_deltas(new_field, &lows, axis, &mut d_new[axis]);
            if p.theta < 1.0 {
                fill_deltas(old_field, &lows, axis, &mut d_old[axis]);
            }
            fill_deltas(e_field, &moms, axis, &mut d_self[axis]);
            fill_deltas(e_field, &ups, axis, &mut d_up[axis]);
        }

        let mut scratch = vec![0.0; n_int * nl];
        let compute = |chunk_idx: usize, out: &mut [f64]| {
            let (ix, iy) = cells[chunk_idx];
            let id = p.grid.id(ix, iy);
            let r = relax[id];
            let diag = mass + p.theta * r;
            for (s, &j) in moms.iter().enumerate() {
                let mut rhs = (mass - (1.0 - p.theta) * r) * old_field.at(id, j);
                for axis in 0..n_axes {
                    let dx = p.grid.dx(axis);
                    let stride = p.grid.stride(axis);
                    let dn = &d_new[axis];
                    let dory = &d_old[axis];
                    let ds = &d_self[axis];
                    let du = &d_up[axis];
                    for (lo, hi) in [(id - stride, id), (id, id + stride)] {
                        let sign = if lo == id { 1.0 } else { -1.0 };
                        let mut f_new = 0.0;
                        let mut f_old = 0.0;
                        for &(k, coeff) in &p.sys.coupling(axis).to_lower[j] {
                            let kk = (k - low0) * n_total;
                            f_new += scale * coeff * 0.5
                                * ((new_field.at(lo, k) + dn[kk + lo])
                                    + (new_field.at(hi, k) - dn[kk + hi]));
                            if p.theta < 1.0 {
                                f_old += scale * coeff * 0.5
                                    * ((old_field.at(lo, k) + dory[kk + lo])
                                        + (old_field.at(hi, k) - dory[kk + hi]));
                            }
                        }
                        let mut g = 0.0;
                        for &(k, coeff) in &p.sys.coupling(axis).to_upper[j] {
                            let kk = (k - up0) * n_total;
                            g += p.eps * coeff * 0.5
                                * ((e_field.at(lo, k) + du[kk + lo])
                                    + (e_field.at(hi, k) - du[kk + hi]));
                        }
                        let _ = mom0;
                        g -= p.eps * v / 2.0 * (e_field.at(hi, j) - e_field.at(lo, j));
                        rhs -= sign / dx
                            * (p.theta * f_new + (1.0 - p.theta) * f_old + g);
                    }
                }
                out[s] = rhs / diag;
            }
        };

        if n_int >= 4096 {
            scratch
                .par_chunks_mut(nl)
                .enumerate()
                .for_each(|(i, out)| compute(i, out));
        } else {
            for (i, out) in scratch.chunks_mut(nl).enumerate() {
                compute(i, out);
            }
        }

        for (i, &(ix, iy)) in cells.iter().enumerate() {
            let id = p.grid.id(ix, iy);
            for (s, &j) in moms.iter().enumerate() {
                *new_field.at_mut(id, j) = scratch[i * nl + s];
            }
        }
        crate::mesh::fill_ghosts(new_field, material.as_deref_mut(), p.bc, consts)?;
    }
    Ok(())
}


/// 1D specialization of the sweep: moment index equals the degree, so every
/// coupling is a single pair and the slope offsets are plain arrays.
#[allow(clippy::too_many_arguments)]
fn degree_sweep_1d(
    p: &SchemeParams,
    new_field: &mut MomentField,
    old_field: &MomentField,
    e_field: &MomentField,
    relax: &[f64],
    consts: &crate::mesh::PhysConsts,
    mut material: Option<&mut crate::mesh::MaterialState>,
) -> Result<()> {
    let m_order = p.sys.order();
    let v = p.sys.v_max();
    let mass = p.eps * p.eps / (p.c * p.dt);
    let n = p.grid.n[0];
    let n_total = p.grid.n_total();
    let nm = new_field.n_moments;
    let dx = p.grid.dx(0);
    let th = p.theta;
    let omth = 1.0 - th;
    let active = p.recon.is_active();

    let mut dn = vec![0.0; n_total];
    let mut dold = vec![0.0; n_total];
    let mut ds = vec![0.0; n_total];
    let mut dup = vec![0.0; n_total];
    let mut scratch = vec![0.0; n];

    let fill = |field: &MomentField, m: usize, out: &mut [f64]| {
        if !active {
            return;
        }
        for id in 1..n_total - 1 {
            out[id] = face_delta(&field.data, id * nm + m, nm, dx, p.recon);
        }
    };

    for l in 2..=m_order {
        let a = p.sys.coupling(0).to_lower[l][0].1;
        let b = p.sys.coupling(0).to_upper[l].first().map_or(0.0, |&(_, c)| c);
        let scale = if l == 2 { p.eps * p.eps } else { p.eps };
        fill(new_field, l - 1, &mut dn);
        if omth > 0.0 {
            fill(old_field, l - 1, &mut dold);
        }
        fill(e_field, l, &mut ds);
        if l < m_order {
            fill(e_field, l + 1, &mut dup);
        }

        for (ix, out) in scratch.iter_mut().enumerate() {
            let id = ix + GHOST;
            let (lo, hi) = (id - 1, id + 1);
            let r = relax[id];
            // implicit a-flux divergence at new (and old for CN) data
            let f_of = |fld: &MomentField, d: &[f64]| -> f64 {
                let vl = fld.data[lo * nm + l - 1];
                let vc = fld.data[id * nm + l - 1];
                let vh = fld.data[hi * nm + l - 1];
                let f_hi = (vc + d[id]) + (vh - d[hi]);
                let f_lo = (vl + d[lo]) + (vc - d[id]);
                scale * a * 0.5 * (f_hi - f_lo)
            };
            let mut div = th * f_of(new_field, &dn);
            if omth > 0.0 {
                div += omth * f_of(old_field, &dold);
            }
            // explicit b-flux of degree l+1 plus viscosity on degree l
            if l < m_order {
                let vl = e_field.data[lo * nm + l + 1];
                let vc = e_field.data[id * nm + l + 1];
                let vh = e_field.data[hi * nm + l + 1];
                div += p.eps * b * 0.5 * (((vc + dup[id]) + (vh - dup[hi]))
                    - ((vl + dup[lo]) + (vc - dup[id])));
            }
            let el = e_field.data[lo * nm + l];
            let ec = e_field.data[id * nm + l];
            let eh = e_field.data[hi * nm + l];
            div -= p.eps * v / 2.0 * (eh - 2.0 * ec + el);
            let rhs = (mass - omth * r) * old_field.data[id * nm + l] - div / dx;
            *out = rhs / (mass + th * r);
        }
        for (ix, val) in scratch.iter().enumerate() {
            new_field.data[(ix + GHOST) * nm + l] = *val;
        }
        crate::mesh::fill_ghosts(new_field, material.as_deref_mut(), p.bc, consts)?;
    }
    Ok(())
}

/// Net outflow of the degree-0 equation through the domain boundary,
/// theta-weighted between the new and old levels (zero for periodic runs by
/// telescoping). Multiplied by dt this balances the change of the total.
pub(crate) fn block_boundary_outflow(
    p: &SchemeParams,
    new_field: &MomentField,
    old_field: &MomentField,
    lag: &MomentField,
) -> f64 {
    let v = p.sys.v_max();
    let mut total = 0.0;
    let flux_at = |field: &MomentField, lo: usize, hi: usize, axis: usize| -> f64 {
        let dx = p.grid.dx(axis);
        let stride = p.grid.stride(axis);
        let (k_ax, c0) = p.sys.axis_deg1(axis);
        let dl1 = side_delta(lag, lo, k_ax, stride, dx, p.recon);
        let dr1 = side_delta(lag, hi, k_ax, stride, dx, p.recon);
        c0 * 0.5 * ((field.at(lo, k_ax) + dl1) + (field.at(hi, k_ax) - dr1))
            - v / 2.0 * (field.at(hi, 0) - field.at(lo, 0))
    };
    for axis in 0..p.grid.n_axes() {
        if matches!(p.bc.side(axis, false), crate::mesh::BoundaryKind::Periodic) {
            continue;
        }
        let stride = p.grid.stride(axis);
        let n_ax = p.grid.n[axis] as isize;
        let transverse: Vec<(isize, isize)> = if axis == 0 {
            (0..p.grid.n[1] as isize).map(|iy| (0, iy)).collect()
        } else {
            (0..p.grid.n[0] as isize).map(|ix| (ix, 0)).collect()
        };
        // face area element transverse to the axis
        let area = match p.grid.dim {
            Dimension::One => 1.0,
            Dimension::Two => p.grid.dx(1 - axis),
        };
        for (ix0, iy0) in transverse {
            let (lo_cell, hi_cell) = if axis == 0 {
                (p.grid.id(0, iy0), p.grid.id(n_ax - 1, iy0))
            } else {
                (p.grid.id(ix0, 0), p.grid.id(ix0, n_ax - 1))
            };
            // low face: outflow is -flux
            let f_lo = p.theta * flux_at(new_field, lo_cell - stride, lo_cell, axis)
                + (1.0 - p.theta) * flux_at(old_field, lo_cell - stride, lo_cell, axis);
            total -= area * f_lo;
            // high face: outflow is +flux
            let f_hi = p.theta * flux_at(new_field, hi_cell, hi_cell + stride, axis)
                + (1.0 - p.theta) * flux_at(old_field, hi_cell, hi_cell + stride, axis);
            total += area * f_hi;
        }
    }
    total
}

