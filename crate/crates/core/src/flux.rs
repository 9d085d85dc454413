//! Local Lax-Friedrichs split numerical fluxes.
//!
//! The convection terms are split into an implicit part F carried by the
//! new time level and an explicit part G carried by old data. For the
//! coupled (I_0, Ihat_1) block the dissipation sits in the implicit part;
//! for degrees >= 2 it sits in the explicit part.

use crate::error::{Result, SolverError};
use crate::moment::MomentSystem;

/// Face fluxes of the coupled (I_0, Ihat_1) block over a 1D cell array.
/// New-time-level terms are reported as stencil coefficients on the
/// (left, right) cells of each face; old-time-level terms are evaluated.
#[derive(Debug, Clone)]
pub struct BlockFaceFluxes {
    pub n_faces: usize,
    /// F_{-1}: coefficients on (I0_L, I0_R); the viscous implicit part of
    /// the I_0 equation
    pub f_m1_coeff: [f64; 2],
    /// G_1: coefficients on (Ihat_L, Ihat_R); central part of the I_0 equation
    pub g_1_coeff: [f64; 2],
    /// F_0: coefficients on (I0_L, I0_R) and (Ihat_L, Ihat_R); the implicit
    /// part of the Ihat_1 equation
    pub f_0_i0_coeff: [f64; 2],
    pub f_0_ih_coeff: [f64; 2],
    /// G_2: evaluated old-time values per face
    pub g_2: Vec<f64>,
}

impl BlockFaceFluxes {
    pub fn eval_f_m1(&self, i0_l: f64, i0_r: f64) -> f64 {
        self.f_m1_coeff[0] * i0_l + self.f_m1_coeff[1] * i0_r
    }

    pub fn eval_g_1(&self, ih_l: f64, ih_r: f64) -> f64 {
        self.g_1_coeff[0] * ih_l + self.g_1_coeff[1] * ih_r
    }

    pub fn eval_f_0(&self, i0_l: f64, i0_r: f64, ih_l: f64, ih_r: f64) -> f64 {
        self.f_0_i0_coeff[0] * i0_l
            + self.f_0_i0_coeff[1] * i0_r
            + self.f_0_ih_coeff[0] * ih_l
            + self.f_0_ih_coeff[1] * ih_r
    }
}

/// Split fluxes of the (I_0, Ihat_1) block on faces between consecutive
/// entries of the given cell arrays (ghosts filled by the caller).
///
/// F_{-1} = -(v/2)(I0_R - I0_L), G_1 = (Ih_L + Ih_R)/2 at the new level;
/// F_0 = (a_0/2)(I0_L + I0_R) - (eps v/2)(Ih_R - Ih_L) at the new level;
/// G_2 = (b_2/2)(I2_L + I2_R) at the old level.
pub fn coupled_block_fluxes(
    i0: &[f64],
    _i_hat1: &[f64],
    i2: &[f64],
    eps: f64,
    system: &MomentSystem,
) -> Result<BlockFaceFluxes> {
    if eps <= 0.0 {
        return Err(SolverError::Parameter(format!("eps = {eps}; eps > 0 required")));
    }
    let v = system.v_max();
    let a0 = system.coupling(0).entry(1, 0);
    let b2 = if system.order() >= 2 {
        system.coupling(0).entry(1, 2)
    } else {
        0.0 // closure: no degree-2 moment at M = 1
    };
    let n_faces = i0.len() - 1;
    let mut g_2 = vec![0.0; n_faces];
    for f in 0..n_faces {
        g_2[f] = b2 / 2.0 * (i2[f] + i2[f + 1]);
    }
    Ok(BlockFaceFluxes {
        n_faces,
        f_m1_coeff: [v / 2.0, -v / 2.0],
        g_1_coeff: [0.5, 0.5],
        f_0_i0_coeff: [a0 / 2.0, a0 / 2.0],
        f_0_ih_coeff: [eps * v / 2.0, -eps * v / 2.0],
        g_2,
    })
}

/// Face fluxes for a moment degree l >= 2:
/// F_{l-1} = (eps a_{l-1}/2)(new_L + new_R) from already-updated data;
/// G_{l+1} = (eps b_{l+1}/2)(old_{l+1,L} + old_{l+1,R})
///           - (eps v/2)(old_{l,R} - old_{l,L}), with I_{M+1} = 0.
pub fn degree_sweep_fluxes(
    new_lm1: &[f64],
    old_l: &[f64],
    old_lp1: Option<&[f64]>,
    l: usize,
    eps: f64,
    system: &MomentSystem,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = system.order();
    if l < 2 || l > m {
        return Err(SolverError::Degree(l));
    }
    let v = system.v_max();
    let a_lm1 = system.coupling(0).entry(l, l - 1);
    let b_lp1 = if l < m { system.coupling(0).entry(l, l + 1) } else { 0.0 };
    let n_faces = old_l.len() - 1;
    let mut f = vec![0.0; n_faces];
    let mut g = vec![0.0; n_faces];
    for i in 0..n_faces {
        f[i] = eps * a_lm1 / 2.0 * (new_lm1[i] + new_lm1[i + 1]);
        let upper = match old_lp1 {
            Some(u) => eps * b_lp1 / 2.0 * (u[i] + u[i + 1]),
            None => 0.0,
        };
        g[i] = upper - eps * v / 2.0 * (old_l[i + 1] - old_l[i]);
    }
    Ok((f, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment::build_system_1d;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_state_has_zero_divergence() {
        let sys = build_system_1d(5).unwrap();
        let n = 8;
        let i0 = vec![3.0; n];
        let ih = vec![0.0; n];
        let i2 = vec![0.0; n];
        let fl = coupled_block_fluxes(&i0, &ih, &i2, 1.0, &sys).unwrap();
        for f in 1..fl.n_faces {
            let d_fm1 = fl.eval_f_m1(i0[f], i0[f + 1]) - fl.eval_f_m1(i0[f - 1], i0[f]);
            let d_g1 = fl.eval_g_1(ih[f], ih[f + 1]) - fl.eval_g_1(ih[f - 1], ih[f]);
            let d_f0 = fl.eval_f_0(i0[f], i0[f + 1], ih[f], ih[f + 1])
                - fl.eval_f_0(i0[f - 1], i0[f], ih[f - 1], ih[f]);
            let d_g2 = fl.g_2[f] - fl.g_2[f - 1];
            assert_eq!(d_fm1, 0.0);
            assert_eq!(d_g1, 0.0);
            assert_eq!(d_f0, 0.0);
            assert_eq!(d_g2, 0.0);
        }

        // degrees: uniform data give zero divergence for every degree
        let vals = vec![1.5; n];
        for l in 2..=5 {
            let upper = if l < 5 { Some(&vals[..]) } else { None };
            let (f, g) = degree_sweep_fluxes(&vals, &vals, upper, l, 0.7, &sys).unwrap();
            for i in 1..f.len() {
                assert_eq!(f[i] - f[i - 1], 0.0);
                assert_eq!(g[i] - g[i - 1], 0.0);
            }
        }
    }

    #[test]
    fn step_face_value() {
        let sys = build_system_1d(3).unwrap();
        let i0 = vec![1.0, 1.0, 0.0, 0.0];
        let ih = vec![0.0; 4];
        let i2 = vec![0.0; 4];
        let fl = coupled_block_fluxes(&i0, &ih, &i2, 1.0, &sys).unwrap();
        // F_{-1} at the step face equals +1/2 (I0_L - I0_R)/... = +1/2 here
        assert_abs_diff_eq!(fl.eval_f_m1(1.0, 0.0), 0.5, epsilon = 0.0);
        assert_eq!(fl.f_m1_coeff, [0.5, -0.5]);
    }

    #[test]
    fn advection_row_sums_vanish() {
        // assemble the implicit advection part over a periodic row of cells
        // and check each row of the resulting matrix sums to zero
        let sys = build_system_1d(7).unwrap();
        let n = 9;
        let eps = 1.0;
        let dummy = vec![0.0; n + 1];
        let fl = coupled_block_fluxes(&dummy, &dummy, &dummy, eps, &sys).unwrap();
        // unknown layout: [I0_0, Ih_0, I0_1, Ih_1, ...]; divergence of face
        // fluxes (f+ - f-)/dx; dx = 1
        let mut m = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            // I0 row: div(F_{-1} + G_1)
            m[2 * i][2 * i] += fl.f_m1_coeff[0] - fl.f_m1_coeff[1];
            m[2 * i][2 * ip] += fl.f_m1_coeff[1];
            m[2 * i][2 * im] -= fl.f_m1_coeff[0];
            m[2 * i][2 * i + 1] += fl.g_1_coeff[0] - fl.g_1_coeff[1];
            m[2 * i][2 * ip + 1] += fl.g_1_coeff[1];
            m[2 * i][2 * im + 1] -= fl.g_1_coeff[0];
            // Ih row: div(F_0)
            m[2 * i + 1][2 * i] += fl.f_0_i0_coeff[0] - fl.f_0_i0_coeff[1];
            m[2 * i + 1][2 * ip] += fl.f_0_i0_coeff[1];
            m[2 * i + 1][2 * im] -= fl.f_0_i0_coeff[0];
            m[2 * i + 1][2 * i + 1] += fl.f_0_ih_coeff[0] - fl.f_0_ih_coeff[1];
            m[2 * i + 1][2 * ip + 1] += fl.f_0_ih_coeff[1];
            m[2 * i + 1][2 * im + 1] -= fl.f_0_ih_coeff[0];
        }
        for row in &m {
            let s: f64 = row.iter().sum();
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn top_degree_has_only_viscous_explicit_part() {
        let sys = build_system_1d(4).unwrap();
        let new_lm1 = vec![0.3, 0.1, -0.2, 0.5];
        let old_l = vec![1.0, 2.0, 4.0, 8.0];
        let (_, g) = degree_sweep_fluxes(&new_lm1, &old_l, None, 4, 0.5, &sys).unwrap();
        for i in 0..g.len() {
            let visc = -0.5 * 1.0 / 2.0 * (old_l[i + 1] - old_l[i]);
            assert_abs_diff_eq!(g[i], visc, epsilon = 0.0);
        }
    }

    #[test]
    fn eps_zero_is_rejected_for_block_and_kills_degree_fluxes() {
        let sys = build_system_1d(4).unwrap();
        let z = vec![1.0, 2.0, 3.0];
        assert!(coupled_block_fluxes(&z, &z, &z, 0.0, &sys).is_err());
        // every degree-sweep flux term carries eps
        let (f, g) = degree_sweep_fluxes(&z, &z, Some(&z), 2, 0.0, &sys).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn degree_bounds_checked() {
        let sys = build_system_1d(4).unwrap();
        let z = vec![0.0; 4];
        assert!(degree_sweep_fluxes(&z, &z, None, 1, 1.0, &sys).is_err());
        assert!(degree_sweep_fluxes(&z, &z, None, 5, 1.0, &sys).is_err());
    }
}
