//! Von Neumann stability analysis of the linear IMEX scheme.
//!
//! With the Fourier ansatz on a periodic uniform mesh (c = 1, sigma_a = 0,
//! sigma_s = 1) the scheme becomes A I^{n+1} = B I^n with (M+1) x (M+1)
//! complex matrices built from c0 = eps^2/dt, c1 = eps (cos xi - 1)/dx,
//! c2 = i eps sin(xi)/dx. The scheme is stable at a parameter point when the
//! spectral radius of C = A^{-1} B stays within 1 + tol for every xi (the
//! radius-1 mode at xi = 0 is the constant mode and is always accepted).
//!
//! A is lower bidiagonal plus the single (0,1) entry and B is upper
//! bidiagonal, so B A^{-1} is lower Hessenberg; its eigenvalues come from a
//! complex Hessenberg QR iteration in O(M^3) with a small constant.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Result, SolverError};
use crate::moment::legendre_coeffs;

pub const RADIUS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct AmplificationInputs {
    pub eps: f64,
    pub dt: f64,
    pub dx: f64,
    /// discrete wave number xi = k dx in [0, 2 pi]
    pub xi: f64,
    pub m_order: usize,
}

impl AmplificationInputs {
    pub fn c0(&self) -> f64 {
        self.eps * self.eps / self.dt
    }

    pub fn c1(&self) -> f64 {
        self.eps * (self.xi.cos() - 1.0) / self.dx
    }

    pub fn c2(&self) -> Complex64 {
        Complex64::new(0.0, self.eps * self.xi.sin() / self.dx)
    }
}

struct PencilEntries {
    /// A diagonal, A subdiagonal (index l holds A[l][l-1]), A[0][1]
    a_diag: Vec<Complex64>,
    a_sub: Vec<Complex64>,
    a_01: Complex64,
    /// B diagonal, B superdiagonal (index l holds B[l][l+1])
    b_diag: Vec<Complex64>,
    b_sup: Vec<Complex64>,
}

fn pencil_entries(inp: &AmplificationInputs) -> Result<PencilEntries> {
    let m = inp.m_order;
    let (a_seq, b_seq) = legendre_coeffs(m)?;
    let n = m + 1;
    let c0 = Complex64::from(inp.c0());
    let c1 = Complex64::from(inp.c1());
    let c2 = inp.c2();
    let one = Complex64::from(1.0);

    let mut a_diag = vec![Complex64::default(); n];
    let mut a_sub = vec![Complex64::default(); n];
    let mut b_diag = vec![Complex64::default(); n];
    let mut b_sup = vec![Complex64::default(); n];

    a_diag[0] = c0 - inp.eps * c1;
    b_diag[0] = c0;
    for l in 1..n {
        a_diag[l] = if l == 1 { c0 + one - c1 } else { c0 + one };
        a_sub[l] = a_seq[l - 1] * c2;
        b_diag[l] = if l == 1 { c0 } else { c0 + c1 };
        if l + 1 < n {
            b_sup[l] = -b_seq[l + 1] * c2;
        }
    }
    Ok(PencilEntries {
        a_diag,
        a_sub,
        a_01: c2,
        b_diag,
        b_sup,
    })
}

/// Dense A and B of the Fourier-transformed update, row-major (M+1)^2.
pub fn assemble_ab(inp: &AmplificationInputs) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    let e = pencil_entries(inp)?;
    let n = inp.m_order + 1;
    let mut a = vec![Complex64::default(); n * n];
    let mut b = vec![Complex64::default(); n * n];
    for l in 0..n {
        a[l * n + l] = e.a_diag[l];
        b[l * n + l] = e.b_diag[l];
        if l >= 1 {
            a[l * n + l - 1] = e.a_sub[l];
        }
        if l + 1 < n {
            b[l * n + l + 1] = e.b_sup[l];
        }
    }
    if n > 1 {
        a[1] = e.a_01;
    }
    Ok((a, b))
}

/// solve A x = b with the bidiagonal-plus-(0,1) structure
fn solve_a(e: &PencilEntries, b: &[Complex64], x: &mut [Complex64]) -> Result<()> {
    let n = e.a_diag.len();
    if n == 1 {
        x[0] = b[0] / e.a_diag[0];
        return Ok(());
    }
    // rows 0 and 1 couple (x0, x1)
    let det = e.a_diag[0] * e.a_diag[1] - e.a_01 * e.a_sub[1];
    if det.norm() == 0.0 {
        return Err(SolverError::Linsys {
            reason: "singular Fourier matrix A".into(),
            residual: f64::INFINITY,
        });
    }
    x[0] = (b[0] * e.a_diag[1] - e.a_01 * b[1]) / det;
    x[1] = (e.a_diag[0] * b[1] - e.a_sub[1] * b[0]) / det;
    for l in 2..n {
        x[l] = (b[l] - e.a_sub[l] * x[l - 1]) / e.a_diag[l];
    }
    Ok(())
}

/// Eigenvalues of a complex upper-Hessenberg matrix by shifted QR with
/// Givens rotations; h is row-major n x n and is consumed.
pub fn hessenberg_eigenvalues(h: &mut [Complex64], n: usize) -> Result<Vec<Complex64>> {
    let mut eig = vec![Complex64::default(); n];
    if n == 0 {
        return Ok(eig);
    }
    let mut m = n;
    let mut stuck = 0usize;
    let mut total = 0usize;
    let max_total = 40 * n + 200;
    while m > 0 {
        if m == 1 {
            eig[0] = h[0];
            break;
        }
        // deflation scan
        let mut l = m - 1;
        while l > 0 {
            let s = h[(l - 1) * n + (l - 1)].norm() + h[l * n + l].norm();
            let s = if s == 0.0 { 1.0 } else { s };
            if h[l * n + l - 1].norm() <= f64::EPSILON * s {
                h[l * n + l - 1] = Complex64::default();
                break;
            }
            l -= 1;
        }
        if l == m - 1 {
            eig[m - 1] = h[(m - 1) * n + (m - 1)];
            m -= 1;
            stuck = 0;
            continue;
        }
        total += 1;
        stuck += 1;
        if total > max_total {
            return Err(SolverError::EigenNonConvergence(total));
        }
        // Wilkinson shift from the trailing 2x2 (exceptional shift when stuck)
        let sigma = if stuck % 12 == 0 {
            Complex64::from(h[(m - 1) * n + m - 2].norm() + h[(m - 2) * n + m - 3.min(m - 2)].norm())
        } else {
            let a = h[(m - 2) * n + m - 2];
            let b = h[(m - 2) * n + m - 1];
            let c = h[(m - 1) * n + m - 2];
            let d = h[(m - 1) * n + m - 1];
            let tr2 = (a + d) * 0.5;
            let disc = ((a - d) * 0.5 * ((a - d) * 0.5) + b * c).sqrt();
            let l1 = tr2 + disc;
            let l2 = tr2 - disc;
            if (l1 - d).norm() <= (l2 - d).norm() {
                l1
            } else {
                l2
            }
        };
        for k in l..m {
            h[k * n + k] -= sigma;
        }
        // QR sweep: G_k annihilates the subdiagonal of column k
        let mut rots = Vec::with_capacity(m - l - 1);
        for k in l..m - 1 {
            let f = h[k * n + k];
            let g = h[(k + 1) * n + k];
            let (c, s) = givens(f, g);
            rots.push((c, s));
            for col in k..m {
                let x = h[k * n + col];
                let y = h[(k + 1) * n + col];
                h[k * n + col] = c * x + s * y;
                h[(k + 1) * n + col] = -s.conj() * x + c * y;
            }
        }
        // H <- R Q^H: right-apply the conjugate rotations in order
        for (idx, (c, s)) in rots.iter().enumerate() {
            let k = l + idx;
            for row in l..(k + 2).min(m) {
                let x = h[row * n + k];
                let y = h[row * n + k + 1];
                h[row * n + k] = x * c + y * s.conj();
                h[row * n + k + 1] = -x * *s + y * c;
            }
        }
        for k in l..m {
            h[k * n + k] += sigma;
        }
    }
    Ok(eig)
}

/// Givens pair (c real, s complex) with [[c, s], [-conj(s), c]] [f, g]^T = [r, 0]^T.
fn givens(f: Complex64, g: Complex64) -> (f64, Complex64) {
    let fn_ = f.norm();
    let gn = g.norm();
    if gn == 0.0 {
        return (1.0, Complex64::default());
    }
    if fn_ == 0.0 {
        return (0.0, g.conj() / gn);
    }
    let r = (fn_ * fn_ + gn * gn).sqrt();
    let c = fn_ / r;
    let s = (f / fn_) * g.conj() / r;
    (c, s)
}

/// Spectral radius of the amplification matrix C = A^{-1} B.
pub fn amplification_radius(inp: &AmplificationInputs) -> Result<f64> {
    let e = pencil_entries(inp)?;
    let n = inp.m_order + 1;
    if e.a_diag.iter().any(|d| d.norm() == 0.0) {
        return Err(SolverError::Linsys {
            reason: "singular Fourier matrix A".into(),
            residual: f64::INFINITY,
        });
    }
    // sin(xi) = 0: both matrices are diagonal (the 2x2 head still couples
    // through a_01 * a_sub = 0) and the radius is a diagonal ratio
    if inp.c2().norm() == 0.0 {
        let mut rho = 0.0f64;
        for l in 0..n {
            rho = rho.max((e.b_diag[l] / e.a_diag[l]).norm());
        }
        return Ok(rho);
    }
    // H = (B A^{-1})^T is upper Hessenberg; fill row r from A^{-1} e_r
    let mut unit = vec![Complex64::default(); n];
    let mut col = vec![Complex64::default(); n];
    let mut h = vec![Complex64::default(); n * n];
    for r in 0..n {
        unit.iter_mut().for_each(|v| *v = Complex64::default());
        unit[r] = Complex64::from(1.0);
        solve_a(&e, &unit, &mut col)?;
        for c in 0..n {
            let mut v = e.b_diag[c] * col[c];
            if c + 1 < n {
                v += e.b_sup[c] * col[c + 1];
            }
            h[r * n + c] = v;
        }
    }
    let eig = hessenberg_eigenvalues(&mut h, n)?;
    Ok(eig.iter().fold(0.0f64, |acc, z| acc.max(z.norm())))
}

/// xi sweep of the stability map: step 0.01 pi; the conjugate symmetry
/// rho(2 pi - xi) = rho(xi) halves the sweep to [0, pi].
pub fn xi_grid() -> Vec<f64> {
    (0..=100).map(|k| k as f64 * 0.01 * std::f64::consts::PI).collect()
}

/// Stable iff sup over xi of the amplification radius stays within
/// 1 + RADIUS_TOL; eta = log10(eps/dx), chi = log10(dt/(eps dx)).
pub fn classify_stability(eta: f64, chi: f64, eps: f64, m_order: usize) -> Result<bool> {
    let dx = eps / 10f64.powf(eta);
    let dt = 10f64.powf(chi) * eps * dx;
    for xi in xi_grid() {
        let rho = amplification_radius(&AmplificationInputs {
            eps,
            dt,
            dx,
            xi,
            m_order,
        })?;
        if rho > 1.0 + RADIUS_TOL {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Boolean stability classification over an (eta, chi) rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityMap {
    pub eta: Vec<f64>,
    pub chi: Vec<f64>,
    /// row-major over eta (outer) and chi (inner)
    pub stable: Vec<bool>,
    pub eps: f64,
    pub m_order: usize,
}

pub const ETA_RANGE: (f64, f64) = (-4.0, 4.0);
pub const CHI_RANGE: (f64, f64) = (-3.0, 3.0);
pub const MAP_STEP: f64 = 0.02;

fn grid_1d(range: (f64, f64), step: f64) -> Vec<f64> {
    let n = ((range.1 - range.0) / step).round() as usize;
    (0..=n).map(|k| range.0 + k as f64 * step).collect()
}

/// Full-resolution map on the default grid (step 0.02 in both parameters).
pub fn build_map(eps: f64, m_order: usize) -> Result<StabilityMap> {
    build_map_with_step(eps, m_order, MAP_STEP)
}

/// Map on a coarser grid (e.g. 0.2 for a quick smoke sweep).
pub fn build_map_with_step(eps: f64, m_order: usize, step: f64) -> Result<StabilityMap> {
    let eta = grid_1d(ETA_RANGE, step);
    let chi = grid_1d(CHI_RANGE, step);
    let nc = chi.len();
    let stable: Vec<Result<bool>> = eta
        .par_iter()
        .flat_map(|e| chi.par_iter().map(move |x| (*e, *x)))
        .map(|(e, x)| classify_stability(e, x, eps, m_order))
        .collect();
    let mut flat = Vec::with_capacity(stable.len());
    for s in stable {
        flat.push(s?);
    }
    debug_assert_eq!(flat.len(), eta.len() * nc);
    Ok(StabilityMap {
        eta,
        chi,
        stable: flat,
        eps,
        m_order,
    })
}

impl StabilityMap {
    pub fn at(&self, i_eta: usize, i_chi: usize) -> bool {
        self.stable[i_eta * self.chi.len() + i_chi]
    }

    /// CSV rows: eta, chi, stable (0/1)
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "eta,chi,stable")?;
        for (ie, e) in self.eta.iter().enumerate() {
            for (ic, x) in self.chi.iter().enumerate() {
                writeln!(w, "{e:.3},{x:.3},{}", u8::from(self.at(ie, ic)))?;
            }
        }
        Ok(())
    }
}
