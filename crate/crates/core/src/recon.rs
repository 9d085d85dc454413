//! Linear reconstruction of face states from cell averages.
//!
//! Face values are center +/- slope * dx / 2. Slopes for new-time-level flux
//! terms are built from lagged data (time level n for the linear model, the
//! previous Picard iterate for the gray model), which keeps the implicit
//! stencils linear.

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Limiter {
    None,
    Minmod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reconstruction {
    FirstOrder,
    Linear(Limiter),
}

impl Reconstruction {
    pub fn is_active(&self) -> bool {
        !matches!(self, Reconstruction::FirstOrder)
    }
}

#[inline]
fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Slope at one cell from its two neighbors (values at id -/+ stride).
#[inline]
pub fn slope_at(values: &[f64], id: usize, stride: usize, dx: f64, limiter: Limiter) -> f64 {
    let lo = values[id - stride];
    let hi = values[id + stride];
    let c = values[id];
    match limiter {
        Limiter::None => (hi - lo) / (2.0 * dx),
        Limiter::Minmod => minmod(c - lo, hi - c) / dx,
    }
}

/// Per-cell slopes of a contiguous 1D array of cell averages (ghosts filled);
/// the first and last entries, which lack a neighbor, get slope 0.
pub fn linear_reconstruct(cell_averages: &[f64], dx: f64, limiter: Limiter) -> Vec<f64> {
    let n = cell_averages.len();
    let mut slopes = vec![0.0; n];
    for i in 1..n - 1 {
        slopes[i] = slope_at(cell_averages, i, 1, dx, limiter);
    }
    slopes
}

/// Half-cell face offset delta_i = slope_i * dx / 2 used by the split fluxes;
/// returns 0 when reconstruction is off.
#[inline]
pub fn face_delta(
    values: &[f64],
    id: usize,
    stride: usize,
    dx: f64,
    recon: Reconstruction,
) -> f64 {
    match recon {
        Reconstruction::FirstOrder => 0.0,
        Reconstruction::Linear(lim) => slope_at(values, id, stride, dx, lim) * dx / 2.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_data_is_exact() {
        let dx = 0.25;
        let alpha = 1.7;
        let vals: Vec<f64> = (0..8).map(|i| alpha * (i as f64 + 0.5) * dx).collect();
        for lim in [Limiter::None, Limiter::Minmod] {
            let s = linear_reconstruct(&vals, dx, lim);
            for v in &s[1..7] {
                assert_abs_diff_eq!(*v, alpha, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn minmod_vanishes_at_extrema_and_constants() {
        let dx = 1.0;
        let s = linear_reconstruct(&[0.0, 1.0, 0.0], dx, Limiter::Minmod);
        assert_eq!(s[1], 0.0);
        let s = linear_reconstruct(&[3.0, 3.0, 3.0, 3.0], dx, Limiter::Minmod);
        assert!(s.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unlimited_face_states_second_order_on_smooth_data() {
        // face state u_i + s_i dx/2 converges to the point value at 2nd order
        let f = |x: f64| (std::f64::consts::PI * x).sin();
        let mut errs = Vec::new();
        for n in [16usize, 32, 64] {
            let dx = 2.0 / n as f64;
            let vals: Vec<f64> = (0..n).map(|i| f(-1.0 + (i as f64 + 0.5) * dx)).collect();
            let s = linear_reconstruct(&vals, dx, Limiter::None);
            let mut err = 0.0f64;
            for i in 1..n - 1 {
                let face = -1.0 + (i as f64 + 1.0) * dx;
                err = err.max((vals[i] + s[i] * dx / 2.0 - f(face)).abs());
            }
            errs.push(err);
        }
        let order1 = (errs[0] / errs[1]).log2();
        let order2 = (errs[1] / errs[2]).log2();
        assert!(order1 > 1.8 && order2 > 1.8, "orders {order1} {order2}");
    }
}
