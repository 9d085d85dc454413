//! P_N moment hierarchies.
//!
//! 1D: Legendre moments I_l with streaming couplings a_{l-1} = l/(2l+1),
//! b_{l+1} = (l+1)/(2l+1) and closure I_{M+1} = 0.
//!
//! 2D: reduced real spherical harmonics for planar (z-symmetric) problems,
//! basis (l, m) with l <= M and l + m even, fully normalized so the two
//! directional coupling matrices are symmetric. Moments are scaled so that
//! index 0 carries the full angular integral of the intensity.

use crate::error::{Result, SolverError};
use crate::poly::{gauss_legendre, legendre, normalized_assoc_legendre};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    One,
    Two,
}

/// Directional streaming matrix in sparse row form. Multiplication by a
/// direction cosine couples only adjacent degrees, so each row splits into
/// couplings one degree down and one degree up.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub n: usize,
    /// row j -> [(k, coeff)] with degree(k) = degree(j) - 1
    pub to_lower: Vec<Vec<(usize, f64)>>,
    /// row j -> [(k, coeff)] with degree(k) = degree(j) + 1
    pub to_upper: Vec<Vec<(usize, f64)>>,
}

impl Coupling {
    pub fn entry(&self, j: usize, k: usize) -> f64 {
        for &(c, v) in self.to_lower[j].iter().chain(self.to_upper[j].iter()) {
            if c == k {
                return v;
            }
        }
        0.0
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n * self.n];
        for j in 0..self.n {
            for &(k, v) in self.to_lower[j].iter().chain(self.to_upper[j].iter()) {
                m[j * self.n + k] = v;
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct MomentSystem {
    dimension: Dimension,
    order: usize,
    n_moments: usize,
    degree_of: Vec<usize>,
    /// first moment index of each degree (ordering is ascending degree)
    degree_start: Vec<usize>,
    coupling: Vec<Coupling>,
    v_max: f64,
    /// for each axis, the degree-1 moment index coupled to moment 0 and the
    /// coupling coefficient (a_0 in 1D)
    axis_deg1: Vec<(usize, f64)>,
}

impl MomentSystem {
    pub fn dimension(&self) -> Dimension {
        self.dimension
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_moments(&self) -> usize {
        self.n_moments
    }

    pub fn n_axes(&self) -> usize {
        self.coupling.len()
    }

    pub fn degree_of(&self, j: usize) -> usize {
        self.degree_of[j]
    }

    pub fn degree_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.degree_start[l];
        let end = if l + 1 <= self.order {
            self.degree_start[l + 1]
        } else {
            self.n_moments
        };
        start..end
    }

    pub fn coupling(&self, axis: usize) -> &Coupling {
        &self.coupling[axis]
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// Degree-1 moment index aligned with `axis` and the coefficient of that
    /// moment in the degree-0 equation (the row-0 coupling entry: 1 in 1D,
    /// 1/sqrt(3) in the symmetric 2D convention).
    pub fn axis_deg1(&self, axis: usize) -> (usize, f64) {
        self.axis_deg1[axis]
    }
}

/// Streaming coefficients of the 1D hierarchy: a[l-1] = l/(2l+1) for
/// l = 1..=M and b[j] = j/(2j-1) for subscripts j = 1..=M+1 (b[0] unused,
/// entries referencing degree M+1 unused under the closure).
pub fn legendre_coeffs(m_order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if m_order < 1 {
        return Err(SolverError::InvalidOrder(m_order));
    }
    let a: Vec<f64> = (1..=m_order)
        .map(|l| l as f64 / (2 * l + 1) as f64)
        .collect();
    let mut b = vec![0.0; m_order + 2];
    for j in 1..=m_order + 1 {
        b[j] = j as f64 / (2 * j - 1) as f64;
    }
    Ok((a, b))
}

pub fn build_system_1d(m_order: usize) -> Result<MomentSystem> {
    let (a, b) = legendre_coeffs(m_order)?;
    let n = m_order + 1;
    let mut to_lower = vec![Vec::new(); n];
    let mut to_upper = vec![Vec::new(); n];
    for l in 0..n {
        if l >= 1 {
            to_lower[l].push((l - 1, a[l - 1]));
        }
        if l + 1 < n {
            // closure drops the coupling of degree M to M+1
            to_upper[l].push((l + 1, b[l + 1]));
        }
    }
    let row0 = to_upper[0][0];
    Ok(MomentSystem {
        dimension: Dimension::One,
        order: m_order,
        n_moments: n,
        degree_of: (0..n).collect(),
        degree_start: (0..n).collect(),
        coupling: vec![Coupling { n, to_lower, to_upper }],
        v_max: 1.0,
        axis_deg1: vec![row0],
    })
}

/// Basis index list of the planar-symmetric 2D reduction: (l, m) with
/// 0 <= l <= M, -l <= m <= l, l + m even; ascending degree then ascending m.
pub fn basis_2d(m_order: usize) -> Vec<(usize, i32)> {
    let mut basis = Vec::new();
    for l in 0..=m_order {
        for m in -(l as i32)..=(l as i32) {
            if (l as i32 + m) % 2 == 0 {
                basis.push((l, m));
            }
        }
    }
    basis
}

fn eval_basis_2d(basis: &[(usize, i32)], lmax: usize, mu: f64, phi: f64, pbar: &mut Vec<f64>, out: &mut [f64]) {
    normalized_assoc_legendre(lmax, mu, pbar);
    let idx = |l: usize, m: usize| l * (l + 1) / 2 + m;
    let sqrt2 = std::f64::consts::SQRT_2;
    for (j, &(l, m)) in basis.iter().enumerate() {
        out[j] = match m.cmp(&0) {
            std::cmp::Ordering::Equal => pbar[idx(l, 0)],
            std::cmp::Ordering::Greater => sqrt2 * pbar[idx(l, m as usize)] * (m as f64 * phi).cos(),
            std::cmp::Ordering::Less => sqrt2 * pbar[idx(l, (-m) as usize)] * ((-m) as f64 * phi).sin(),
        };
    }
}

pub fn build_system_2d(m_order: usize) -> Result<MomentSystem> {
    if m_order < 1 {
        return Err(SolverError::InvalidOrder(m_order));
    }
    let basis = basis_2d(m_order);
    let n = basis.len();
    debug_assert_eq!(n, (m_order + 1) * (m_order + 2) / 2);

    // Candidate couplings: multiplication by a direction cosine changes the
    // degree by exactly one and |m| by exactly one (the sign of m may flip:
    // the y cosine couples the cos and sin families). Entries that are in
    // fact zero are dropped after the quadrature.
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for j in 0..n {
        for k in 0..n {
            let (lj, mj) = basis[j];
            let (lk, mk) = basis[k];
            if (lj as i32 - lk as i32).abs() == 1 && (mj.abs() - mk.abs()).abs() == 1 {
                pairs.push((j, k));
            }
        }
    }

    // Exact tensor quadrature: Gauss-Legendre in mu, uniform trapezoid in phi.
    let n_mu = m_order + 2;
    let n_phi = 2 * m_order + 4;
    let (mu_nodes, mu_weights) = gauss_legendre(n_mu);
    let w_phi = 2.0 * std::f64::consts::PI / n_phi as f64;

    let mut ax = vec![0.0; pairs.len()];
    let mut ay = vec![0.0; pairs.len()];
    let mut vals = vec![0.0; n];
    let mut pbar = Vec::new();
    for (mu, wmu) in mu_nodes.iter().zip(&mu_weights) {
        let s = (1.0 - mu * mu).max(0.0).sqrt();
        for p in 0..n_phi {
            let phi = w_phi * p as f64;
            eval_basis_2d(&basis, m_order, *mu, phi, &mut pbar, &mut vals);
            let w = wmu * w_phi;
            let ox = s * phi.cos();
            let oy = s * phi.sin();
            for (idx, &(j, k)) in pairs.iter().enumerate() {
                let prod = w * vals[j] * vals[k];
                ax[idx] += ox * prod;
                ay[idx] += oy * prod;
            }
        }
    }

    let degree_of: Vec<usize> = basis.iter().map(|&(l, _)| l).collect();
    let build = |vals: &[f64]| -> Coupling {
        let mut to_lower = vec![Vec::new(); n];
        let mut to_upper = vec![Vec::new(); n];
        for (idx, &(j, k)) in pairs.iter().enumerate() {
            if vals[idx].abs() < 1e-14 {
                continue;
            }
            if degree_of[k] + 1 == degree_of[j] {
                to_lower[j].push((k, vals[idx]));
            } else {
                to_upper[j].push((k, vals[idx]));
            }
        }
        Coupling { n, to_lower, to_upper }
    };
    let cx = build(&ax);
    let cy = build(&ay);

    let mut degree_start = vec![0; m_order + 1];
    for l in 1..=m_order {
        degree_start[l] = degree_start[l - 1] + l; // degree l-1 holds l moments
    }

    let dx1 = cx.to_upper[0][0];
    let dy1 = cy.to_upper[0][0];
    Ok(MomentSystem {
        dimension: Dimension::Two,
        order: m_order,
        n_moments: n,
        degree_of,
        degree_start,
        coupling: vec![cx, cy],
        v_max: 1.0,
        axis_deg1: vec![dx1, dy1],
    })
}

/// Per-cell moment vector; index 0 is the angle-integrated intensity, the
/// degree-1 entries hold the rescaled moments I_1 / eps.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiationMoments {
    pub values: Vec<f64>,
}

impl RadiationMoments {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Domain("non-finite moment value".into()));
        }
        Ok(Self { values })
    }
}

/// Reconstruct the 1D slab intensity sum_l (2l+1)/2 I_l P_l(mu); the stored
/// degree-1 entry is unscaled with I_1 = eps * Ihat_1.
pub fn eval_intensity_1d(moments: &RadiationMoments, mu: f64, eps: f64) -> Result<f64> {
    if mu.abs() > 1.0 {
        return Err(SolverError::Domain(format!("mu = {mu} outside [-1, 1]")));
    }
    if eps <= 0.0 {
        return Err(SolverError::Parameter(format!("eps = {eps}; eps > 0 required")));
    }
    let mut total = 0.0;
    for (l, &v) in moments.values.iter().enumerate() {
        let coeff = if l == 1 { eps * v } else { v };
        total += (2 * l + 1) as f64 / 2.0 * coeff * legendre(l, mu);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadiationDiagnostics {
    pub e_r: f64,
    /// eps * Ihat per direction
    pub f_r: Vec<f64>,
    /// sign-preserving: T_r = sign(E_r) |E_r/a|^{1/4}
    pub t_r: f64,
    pub negative_energy: bool,
}

pub fn radiation_diagnostics(
    system: &MomentSystem,
    moments: &RadiationMoments,
    a: f64,
    c: f64,
    eps: f64,
) -> Result<RadiationDiagnostics> {
    if a <= 0.0 || c <= 0.0 {
        return Err(SolverError::Parameter(format!(
            "a = {a}, c = {c}; both must be positive"
        )));
    }
    let e_r = moments.values[0] / c;
    let f_r = (0..system.n_axes())
        .map(|d| eps * moments.values[system.axis_deg1(d).0])
        .collect();
    let negative = e_r < 0.0;
    if negative {
        log::warn!("negative radiation energy density E_r = {e_r:.6e}");
    }
    let t_r = e_r.signum() * (e_r / a).abs().powf(0.25);
    Ok(RadiationDiagnostics {
        e_r,
        f_r,
        t_r,
        negative_energy: negative,
    })
}
