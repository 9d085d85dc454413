//! Sparse implicit block systems.
//!
//! 1D systems are banded with optional periodic corner entries and are
//! solved by a pivoted banded LU plus a Woodbury correction for the corners.
//! 2D systems are CSR and solved by ILU(0)-preconditioned BiCGStab. Both
//! paths verify the true residual against the requested tolerance.

use crate::error::{Result, SolverError};

// ---------------------------------------------------------------------------
// banded direct solver (1D path)
// ---------------------------------------------------------------------------

struct BandedFactor {
    ldab: usize,
    ab: Vec<f64>,
    pivots: Vec<usize>,
    row_scale: Vec<f64>,
    /// Woodbury data for the corner entries: columns of Z = Ab^{-1} (D U)
    /// and the corner column indices
    z: Vec<Vec<f64>>,
    corner_cols: Vec<usize>,
    /// dense LU of the capacitance matrix I + V^T Z
    cap_lu: Vec<f64>,
    cap_piv: Vec<usize>,
}

/// Banded matrix with lower/upper bandwidths plus out-of-band corner entries
/// from periodic wraparound.
pub struct BandedSystem {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    /// logical band storage: band[j * (kl + ku + 1) + (ku + i - j)] = A[i][j]
    band: Vec<f64>,
    corners: Vec<(usize, usize, f64)>,
    factor: Option<BandedFactor>,
    /// retired factorization kept for buffer reuse
    spare: Option<BandedFactor>,
    solve_scratch: Vec<f64>,
}

impl BandedSystem {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        Self {
            n,
            kl,
            ku,
            band: vec![0.0; n * (kl + ku + 1)],
            corners: Vec::new(),
            factor: None,
            spare: None,
            solve_scratch: Vec::new(),
        }
    }

    /// zero all values, keeping the allocations (pattern may change freely)
    pub fn reset(&mut self) {
        self.band.iter_mut().for_each(|v| *v = 0.0);
        self.corners.clear();
        if let Some(f) = self.factor.take() {
            self.spare = Some(f);
        }
    }

    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        if v == 0.0 {
            return;
        }
        if let Some(f) = self.factor.take() {
            self.spare = Some(f);
        }
        let (ri, ci) = (r as isize, c as isize);
        if ri - ci <= self.kl as isize && ci - ri <= self.ku as isize {
            self.band[c * (self.kl + self.ku + 1) + (self.ku as isize + ri - ci) as usize] += v;
        } else {
            self.corners.push((r, c, v));
        }
    }

    fn band_get(&self, r: usize, c: usize) -> f64 {
        let (ri, ci) = (r as isize, c as isize);
        if ri - ci <= self.kl as isize && ci - ri <= self.ku as isize {
            self.band[c * (self.kl + self.ku + 1) + (self.ku as isize + ri - ci) as usize]
        } else {
            0.0
        }
    }

    /// y = A x with the full operator (band + corners)
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        let w = self.kl + self.ku + 1;
        for c in 0..self.n {
            let xc = x[c];
            if xc != 0.0 {
                let r_lo = c.saturating_sub(self.ku);
                let r_hi = (c + self.kl).min(self.n - 1);
                for r in r_lo..=r_hi {
                    y[r] += self.band[c * w + (self.ku + r - c)] * xc;
                }
            }
        }
        for &(r, c, v) in &self.corners {
            y[r] += v * x[c];
        }
    }

    fn factorize(&mut self) -> Result<()> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let kuf = ku + kl; // fill bandwidth during pivoting
        let ldab = 2 * kl + ku + 1;

        // reuse retired factor buffers when shapes match
        let (mut ab, mut row_scale, mut pivots) = match self.spare.take() {
            Some(f) if f.ab.len() == n * ldab => (f.ab, f.row_scale, f.pivots),
            _ => (vec![0.0f64; n * ldab], vec![0.0f64; n], vec![0usize; n]),
        };
        ab.iter_mut().for_each(|v| *v = 0.0);

        // row equilibration over the full operator
        row_scale.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..n {
            let c_lo = r.saturating_sub(kl);
            let c_hi = (r + ku).min(n - 1);
            for c in c_lo..=c_hi {
                row_scale[r] = row_scale[r].max(self.band_get(r, c).abs());
            }
        }
        for &(r, _, v) in &self.corners {
            row_scale[r] = row_scale[r].max(v.abs());
        }
        for s in row_scale.iter_mut() {
            *s = if *s > 0.0 { 1.0 / *s } else { 1.0 };
        }

        for c in 0..n {
            let r_lo = c.saturating_sub(ku);
            let r_hi = (c + kl).min(n - 1);
            for r in r_lo..=r_hi {
                ab[c * ldab + (kl + ku + r - c)] = self.band_get(r, c) * row_scale[r];
            }
        }

        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut jp = 0;
            let mut pmax = ab[j * ldab + kl + ku].abs();
            for i in 1..=km {
                let v = ab[j * ldab + kl + ku + i].abs();
                if v > pmax {
                    pmax = v;
                    jp = i;
                }
            }
            pivots[j] = j + jp;
            if pmax == 0.0 {
                return Err(SolverError::Linsys {
                    reason: format!("singular banded matrix at column {j}"),
                    residual: f64::INFINITY,
                });
            }
            if jp != 0 {
                let c_hi = (j + kuf).min(n - 1);
                for c in j..=c_hi {
                    let o1 = c * ldab + (kl + ku + j - c);
                    let o2 = c * ldab + (kl + ku + j + jp - c);
                    ab.swap(o1, o2);
                }
            }
            let pivot = ab[j * ldab + kl + ku];
            for i in 1..=km {
                let l = ab[j * ldab + kl + ku + i] / pivot;
                ab[j * ldab + kl + ku + i] = l;
                if l != 0.0 {
                    let c_hi = (j + kuf).min(n - 1);
                    for c in (j + 1)..=c_hi {
                        ab[c * ldab + (kl + ku + j + i - c)] -=
                            l * ab[c * ldab + (kl + ku + j - c)];
                    }
                }
            }
        }

        let mut factor = BandedFactor {
            ldab,
            ab,
            pivots,
            row_scale,
            z: Vec::new(),
            corner_cols: Vec::new(),
            cap_lu: Vec::new(),
            cap_piv: Vec::new(),
        };

        // Woodbury setup: group corner entries by column
        if !self.corners.is_empty() {
            let mut by_col: std::collections::BTreeMap<usize, Vec<(usize, f64)>> =
                std::collections::BTreeMap::new();
            for &(r, c, v) in &self.corners {
                by_col.entry(c).or_default().push((r, v));
            }
            let cols: Vec<usize> = by_col.keys().copied().collect();
            let k = cols.len();
            let mut z = Vec::with_capacity(k);
            for col in &cols {
                let mut u = vec![0.0f64; n];
                for &(r, v) in &by_col[col] {
                    u[r] = v * factor.row_scale[r];
                }
                band_solve_inplace(&factor, self.n, kl, ku, &mut u);
                z.push(u);
            }
            // capacitance S = I + V^T Z, with V^T picking corner-column rows
            let mut s = vec![0.0f64; k * k];
            for a in 0..k {
                for b in 0..k {
                    s[a * k + b] = if a == b { 1.0 } else { 0.0 } + z[b][cols[a]];
                }
            }
            let (lu, piv) = dense_lu(s, k)?;
            factor.z = z;
            factor.corner_cols = cols;
            factor.cap_lu = lu;
            factor.cap_piv = piv;
        }

        self.factor = Some(factor);
        Ok(())
    }

    /// Solve A x = b, verifying the relative true residual.
    pub fn solve(&mut self, b: &[f64], rel_tol: f64) -> Result<Vec<f64>> {
        if self.factor.is_none() {
            self.factorize()?;
        }
        let mut x = self.apply_solve(b);
        let bnorm = norm2(b).max(f64::MIN_POSITIVE);
        let mut r = std::mem::take(&mut self.solve_scratch);
        r.resize(self.n, 0.0);
        let mut ok = false;
        for pass in 0..4 {
            self.matvec(&x, &mut r);
            for i in 0..self.n {
                r[i] = b[i] - r[i];
            }
            let rel = norm2(&r) / bnorm;
            if rel <= rel_tol {
                ok = true;
                break;
            }
            if pass == 3 {
                self.solve_scratch = r;
                return Err(SolverError::Linsys {
                    reason: "banded solve did not reach tolerance".into(),
                    residual: rel,
                });
            }
            let dx = self.apply_solve(&r);
            for i in 0..self.n {
                x[i] += dx[i];
            }
        }
        debug_assert!(ok);
        self.solve_scratch = r;
        Ok(x)
    }

    fn apply_solve(&self, b: &[f64]) -> Vec<f64> {
        let f = self.factor.as_ref().expect("factorized");
        let mut y: Vec<f64> = b
            .iter()
            .zip(&f.row_scale)
            .map(|(bi, s)| bi * s)
            .collect();
        band_solve_inplace(f, self.n, self.kl, self.ku, &mut y);
        if !f.corner_cols.is_empty() {
            let k = f.corner_cols.len();
            let mut rhs_small: Vec<f64> = f.corner_cols.iter().map(|&c| y[c]).collect();
            dense_lu_solve(&f.cap_lu, &f.cap_piv, k, &mut rhs_small);
            for (m, zc) in f.z.iter().enumerate() {
                let t = rhs_small[m];
                if t != 0.0 {
                    for i in 0..self.n {
                        y[i] -= zc[i] * t;
                    }
                }
            }
        }
        y
    }
}

fn band_solve_inplace(f: &BandedFactor, n: usize, kl: usize, ku: usize, b: &mut [f64]) {
    let ldab = f.ldab;
    for j in 0..n {
        let p = f.pivots[j];
        if p != j {
            b.swap(j, p);
        }
        let bj = b[j];
        if bj != 0.0 {
            let i_hi = kl.min(n - 1 - j);
            for i in 1..=i_hi {
                b[j + i] -= f.ab[j * ldab + kl + ku + i] * bj;
            }
        }
    }
    let kuf = ku + kl;
    for j in (0..n).rev() {
        b[j] /= f.ab[j * ldab + kl + ku];
        let bj = b[j];
        if bj != 0.0 {
            let i_lo = j.saturating_sub(kuf);
            for i in i_lo..j {
                b[i] -= f.ab[j * ldab + (kl + ku + i - j)] * bj;
            }
        }
    }
}

fn dense_lu(mut a: Vec<f64>, n: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut piv = vec![0usize; n];
    for j in 0..n {
        let mut p = j;
        for i in j + 1..n {
            if a[i * n + j].abs() > a[p * n + j].abs() {
                p = i;
            }
        }
        piv[j] = p;
        if a[p * n + j] == 0.0 {
            return Err(SolverError::Linsys {
                reason: "singular capacitance matrix".into(),
                residual: f64::INFINITY,
            });
        }
        if p != j {
            for c in 0..n {
                a.swap(j * n + c, p * n + c);
            }
        }
        let d = a[j * n + j];
        for i in j + 1..n {
            let l = a[i * n + j] / d;
            a[i * n + j] = l;
            for c in j + 1..n {
                a[i * n + c] -= l * a[j * n + c];
            }
        }
    }
    Ok((a, piv))
}

fn dense_lu_solve(lu: &[f64], piv: &[usize], n: usize, b: &mut [f64]) {
    for j in 0..n {
        if piv[j] != j {
            b.swap(j, piv[j]);
        }
        for i in j + 1..n {
            b[i] -= lu[i * n + j] * b[j];
        }
    }
    for j in (0..n).rev() {
        b[j] /= lu[j * n + j];
        for i in 0..j {
            b[i] -= lu[i * n + j] * b[j];
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// CSR + ILU(0) + BiCGStab (2D path)
// ---------------------------------------------------------------------------

pub struct SparseSystem {
    pub n: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
    row_scale: Vec<f64>,
    diag_ptr: Vec<usize>,
    ilu: Option<Vec<f64>>,
}

impl SparseSystem {
    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &mut Vec<(usize, usize, f64)>) -> Result<Self> {
        triplets.sort_unstable_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col = Vec::with_capacity(triplets.len());
        let mut val = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in triplets.iter() {
            if last == Some((r, c)) {
                *val.last_mut().unwrap() += v;
            } else {
                col.push(c);
                val.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }

        let mut row_scale = vec![1.0f64; n];
        let mut diag_ptr = vec![usize::MAX; n];
        for r in 0..n {
            let mut m = 0.0f64;
            for idx in row_ptr[r]..row_ptr[r + 1] {
                m = m.max(val[idx].abs());
                if col[idx] == r {
                    diag_ptr[r] = idx;
                }
            }
            if diag_ptr[r] == usize::MAX {
                return Err(SolverError::Linsys {
                    reason: format!("missing diagonal in row {r}"),
                    residual: f64::INFINITY,
                });
            }
            row_scale[r] = if m > 0.0 { 1.0 / m } else { 1.0 };
            for idx in row_ptr[r]..row_ptr[r + 1] {
                val[idx] *= row_scale[r];
            }
        }
        Ok(Self {
            n,
            row_ptr,
            col,
            val,
            row_scale,
            diag_ptr,
            ilu: None,
        })
    }

    fn spmv(&self, x: &[f64], y: &mut [f64]) {
        use rayon::prelude::*;
        let rp = &self.row_ptr;
        let col = &self.col;
        let val = &self.val;
        y.par_iter_mut().enumerate().for_each(|(r, yr)| {
            let mut acc = 0.0;
            for idx in rp[r]..rp[r + 1] {
                acc += val[idx] * x[col[idx]];
            }
            *yr = acc;
        });
    }

    fn build_ilu0(&mut self) -> Result<()> {
        let n = self.n;
        let mut f = self.val.clone();
        for i in 0..n {
            let row = self.row_ptr[i]..self.row_ptr[i + 1];
            for idx_ik in row.clone() {
                let k = self.col[idx_ik];
                if k >= i {
                    break;
                }
                let ukk = f[self.diag_ptr[k]];
                if ukk == 0.0 {
                    return Err(SolverError::Linsys {
                        reason: format!("ILU(0) zero pivot at row {k}"),
                        residual: f64::INFINITY,
                    });
                }
                let lik = f[idx_ik] / ukk;
                f[idx_ik] = lik;
                // subtract lik * (upper part of row k) from row i
                let mut pi = idx_ik + 1;
                let mut pk = self.diag_ptr[k] + 1;
                let row_i_end = self.row_ptr[i + 1];
                let row_k_end = self.row_ptr[k + 1];
                while pi < row_i_end && pk < row_k_end {
                    match self.col[pi].cmp(&self.col[pk]) {
                        std::cmp::Ordering::Less => pi += 1,
                        std::cmp::Ordering::Greater => pk += 1,
                        std::cmp::Ordering::Equal => {
                            f[pi] -= lik * f[pk];
                            pi += 1;
                            pk += 1;
                        }
                    }
                }
            }
        }
        self.ilu = Some(f);
        Ok(())
    }

    fn precond(&self, v: &[f64], out: &mut [f64]) {
        let f = self.ilu.as_ref().expect("ilu built");
        out.copy_from_slice(v);
        // L y = v (unit diagonal)
        for i in 0..self.n {
            let mut acc = out[i];
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                let c = self.col[idx];
                if c >= i {
                    break;
                }
                acc -= f[idx] * out[c];
            }
            out[i] = acc;
        }
        // U x = y
        for i in (0..self.n).rev() {
            let mut acc = out[i];
            let mut diag = 1.0;
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                let c = self.col[idx];
                match c.cmp(&i) {
                    std::cmp::Ordering::Greater => acc -= f[idx] * out[c],
                    std::cmp::Ordering::Equal => diag = f[idx],
                    std::cmp::Ordering::Less => {}
                }
            }
            out[i] = acc / diag;
        }
    }

    /// ILU(0)-preconditioned BiCGStab to the requested true-residual tolerance.
    pub fn solve(&mut self, b: &[f64], rel_tol: f64) -> Result<Vec<f64>> {
        if self.ilu.is_none() {
            self.build_ilu0()?;
        }
        let n = self.n;
        let bs: Vec<f64> = b.iter().zip(&self.row_scale).map(|(x, s)| x * s).collect();
        let bnorm = norm2(&bs).max(f64::MIN_POSITIVE);
        let mut x = vec![0.0; n];
        let mut r = bs.clone();
        let r0 = r.clone();
        let (mut rho, mut alpha, mut omega) = (1.0f64, 1.0f64, 1.0f64);
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; n];
        let mut phat = vec![0.0; n];
        let mut shat = vec![0.0; n];
        let mut t = vec![0.0; n];
        let max_it = 10_000;
        let target = rel_tol * bnorm;
        let mut final_res;
        for it in 0..max_it {
            let rho_new = dot(&r0, &r);
            if rho_new.abs() < 1e-300 {
                break;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
            self.precond(&p, &mut phat);
            self.spmv(&phat, &mut v);
            let denom = dot(&r0, &v);
            if denom.abs() < 1e-300 {
                break;
            }
            alpha = rho / denom;
            // s = r - alpha v (reuse r)
            for i in 0..n {
                r[i] -= alpha * v[i];
            }
            if norm2(&r) <= 0.01 * target {
                for i in 0..n {
                    x[i] += alpha * phat[i];
                }
                final_res = norm2(&r);
                if final_res <= target {
                    break;
                }
                continue;
            }
            self.precond(&r, &mut shat);
            self.spmv(&shat, &mut t);
            let tt = dot(&t, &t);
            if tt == 0.0 {
                break;
            }
            omega = dot(&t, &r) / tt;
            for i in 0..n {
                x[i] += alpha * phat[i] + omega * shat[i];
                r[i] -= omega * t[i];
            }
            final_res = norm2(&r);
            if final_res <= 0.3 * target || it == max_it - 1 {
                // true residual check
                self.spmv(&x, &mut t);
                for i in 0..n {
                    r[i] = bs[i] - t[i];
                }
                final_res = norm2(&r);
                if final_res <= target {
                    break;
                }
            }
            if omega.abs() < 1e-300 {
                break;
            }
        }
        // final verification on the true residual
        self.spmv(&x, &mut t);
        for i in 0..n {
            r[i] = bs[i] - t[i];
        }
        final_res = norm2(&r);
        if final_res <= target {
            Ok(x)
        } else {
            Err(SolverError::Linsys {
                reason: "BiCGStab did not converge".into(),
                residual: final_res / bnorm,
            })
        }
    }
}

/// Block-tridiagonal system with 2x2 blocks (non-cyclic), solved by block
/// Thomas elimination without pivoting. Callers verify the residual and fall
/// back to the pivoted banded path when it misses the tolerance.
pub struct BlockTri2 {
    pub n: usize,
    pub lower: Vec<[f64; 4]>,
    pub diag: Vec<[f64; 4]>,
    pub upper: Vec<[f64; 4]>,
    fac_diag: Vec<[f64; 4]>,
    fac_lower: Vec<[f64; 4]>,
    y: Vec<f64>,
}

#[inline]
fn inv2(m: &[f64; 4]) -> Option<[f64; 4]> {
    let det = m[0] * m[3] - m[1] * m[2];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let r = 1.0 / det;
    Some([m[3] * r, -m[1] * r, -m[2] * r, m[0] * r])
}

#[inline]
fn mul2(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

impl BlockTri2 {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            lower: vec![[0.0; 4]; n],
            diag: vec![[0.0; 4]; n],
            upper: vec![[0.0; 4]; n],
            fac_diag: vec![[0.0; 4]; n],
            fac_lower: vec![[0.0; 4]; n],
            y: vec![0.0; 2 * n],
        }
    }

    pub fn reset(&mut self) {
        for v in self
            .lower
            .iter_mut()
            .chain(self.diag.iter_mut())
            .chain(self.upper.iter_mut())
        {
            *v = [0.0; 4];
        }
    }

    /// scalar entry (r, c) of the 2n x 2n matrix; |r/2 - c/2| <= 1 required
    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let (bi, e) = (r / 2, r % 2);
        let (bj, f) = (c / 2, c % 2);
        let k = 2 * e + f;
        if bj == bi {
            self.diag[bi][k] += v;
        } else if bj + 1 == bi {
            self.lower[bi][k] += v;
        } else {
            debug_assert_eq!(bj, bi + 1);
            self.upper[bi][k] += v;
        }
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let d = &self.diag[i];
            let mut r0 = d[0] * x[2 * i] + d[1] * x[2 * i + 1];
            let mut r1 = d[2] * x[2 * i] + d[3] * x[2 * i + 1];
            if i > 0 {
                let l = &self.lower[i];
                r0 += l[0] * x[2 * i - 2] + l[1] * x[2 * i - 1];
                r1 += l[2] * x[2 * i - 2] + l[3] * x[2 * i - 1];
            }
            if i + 1 < n {
                let u = &self.upper[i];
                r0 += u[0] * x[2 * i + 2] + u[1] * x[2 * i + 3];
                r1 += u[2] * x[2 * i + 2] + u[3] * x[2 * i + 3];
            }
            out[2 * i] = r0;
            out[2 * i + 1] = r1;
        }
    }

    /// Thomas elimination; None when a pivot block is singular.
    pub fn try_solve(&mut self, b: &[f64], x: &mut Vec<f64>) -> Option<()> {
        let n = self.n;
        x.resize(2 * n, 0.0);
        self.y[..2 * n].copy_from_slice(b);
        self.fac_diag[0] = self.diag[0];
        for i in 1..n {
            let inv = inv2(&self.fac_diag[i - 1])?;
            let lp = mul2(&self.lower[i], &inv);
            self.fac_lower[i] = lp;
            let du = mul2(&lp, &self.upper[i - 1]);
            let d = &self.diag[i];
            self.fac_diag[i] = [d[0] - du[0], d[1] - du[1], d[2] - du[2], d[3] - du[3]];
            let (y0, y1) = (self.y[2 * i - 2], self.y[2 * i - 1]);
            self.y[2 * i] -= lp[0] * y0 + lp[1] * y1;
            self.y[2 * i + 1] -= lp[2] * y0 + lp[3] * y1;
        }
        let inv = inv2(&self.fac_diag[n - 1])?;
        x[2 * n - 2] = inv[0] * self.y[2 * n - 2] + inv[1] * self.y[2 * n - 1];
        x[2 * n - 1] = inv[2] * self.y[2 * n - 2] + inv[3] * self.y[2 * n - 1];
        for i in (0..n - 1).rev() {
            let u = &self.upper[i];
            let r0 = self.y[2 * i] - (u[0] * x[2 * i + 2] + u[1] * x[2 * i + 3]);
            let r1 = self.y[2 * i + 1] - (u[2] * x[2 * i + 2] + u[3] * x[2 * i + 3]);
            let inv = inv2(&self.fac_diag[i])?;
            x[2 * i] = inv[0] * r0 + inv[1] * r1;
            x[2 * i + 1] = inv[2] * r0 + inv[3] * r1;
        }
        Some(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Assembled implicit block system, tagged by structure.
pub enum BlockSystem {
    /// 1D cyclic/banded block layout
    Banded(BandedSystem),
    /// 2D block five-point layout
    Sparse(SparseSystem),
}

impl BlockSystem {
    pub fn solve(&mut self, rhs: &[f64], rel_tol: f64) -> Result<Vec<f64>> {
        match self {
            BlockSystem::Banded(b) => b.solve(rhs, rel_tol),
            BlockSystem::Sparse(s) => s.solve(rhs, rel_tol),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    #[test]
    fn identity_returns_rhs() {
        let mut sys = BandedSystem::new(5, 1, 1);
        for i in 0..5 {
            sys.add(i, i, 1.0);
        }
        let b = vec![3.0, -1.0, 0.5, 2.0, 9.0];
        let x = sys.solve(&b, 1e-14).unwrap();
        for (xi, bi) in x.iter().zip(&b) {
            assert_abs_diff_eq!(xi, bi, epsilon = 1e-15);
        }
    }

    #[test]
    fn periodic_laplacian_with_mass_gives_constant() {
        // (mass + Laplacian) x = mass * 1 has the constant solution 1
        let n = 16;
        let mass = 0.7;
        let mut sys = BandedSystem::new(n, 1, 1);
        for i in 0..n {
            sys.add(i, i, mass + 2.0);
            sys.add(i, (i + 1) % n, -1.0);
            sys.add(i, (i + n - 1) % n, -1.0);
        }
        let b = vec![mass; n];
        let x = sys.solve(&b, 1e-13).unwrap();
        for xi in &x {
            assert_abs_diff_eq!(*xi, 1.0, epsilon = 1e-12);
        }
    }

    fn random_banded(n: usize, kl: usize, ku: usize, cyclic: bool, rng: &mut StdRng) -> (BandedSystem, Vec<Vec<f64>>) {
        let mut sys = BandedSystem::new(n, kl, ku);
        let mut dense = vec![vec![0.0; n]; n];
        for r in 0..n {
            for c in 0..n {
                let within = (r as isize - c as isize) <= kl as isize
                    && (c as isize - r as isize) <= ku as isize;
                let wrap = cyclic
                    && ((r < kl && c >= n - kl) || (c < ku && r >= n - ku));
                if within || wrap {
                    let mut v = rng.gen_range(-1.0..1.0);
                    if r == c {
                        // SPD-ish perturbation keeps it comfortably nonsingular
                        v += (kl + ku + 3) as f64;
                    }
                    sys.add(r, c, v);
                    dense[r][c] += v;
                }
            }
        }
        (sys, dense)
    }

    #[test]
    fn random_systems_match_dense_lu_oracle() {
        use nalgebra::{DMatrix, DVector};
        let mut rng = StdRng::seed_from_u64(42);
        for &(n, kl, ku, cyclic) in &[
            (20usize, 1usize, 1usize, false),
            (50, 3, 3, true),
            (200, 2, 4, true),
            (97, 5, 2, false),
        ] {
            let (mut sys, dense) = random_banded(n, kl, ku, cyclic, &mut rng);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = sys.solve(&b, 1e-12).unwrap();
            let a = DMatrix::from_fn(n, n, |r, c| dense[r][c]);
            let xe = a.lu().solve(&DVector::from_vec(b.clone())).unwrap();
            for i in 0..n {
                assert_abs_diff_eq!(x[i], xe[i], epsilon = 1e-9 * xe[i].abs().max(1.0));
            }
            // residual contract
            let mut r = vec![0.0; n];
            sys.matvec(&x, &mut r);
            let res: f64 = r
                .iter()
                .zip(&b)
                .map(|(ri, bi)| (bi - ri) * (bi - ri))
                .sum::<f64>()
                .sqrt();
            assert!(res <= 1e-12 * norm2(&b).max(1.0) * 10.0);
        }
    }

    #[test]
    fn pivoting_handles_small_leading_diagonal() {
        let mut sys = BandedSystem::new(3, 1, 1);
        sys.add(0, 0, 1e-16);
        sys.add(0, 1, 1.0);
        sys.add(1, 0, 1.0);
        sys.add(1, 1, 2.0);
        sys.add(1, 2, 1.0);
        sys.add(2, 1, 1.0);
        sys.add(2, 2, 2.0);
        let b = vec![1.0, 4.0, 3.0];
        let x = sys.solve(&b, 1e-12).unwrap();
        let mut y = vec![0.0; 3];
        sys.matvec(&x, &mut y);
        for (yi, bi) in y.iter().zip(&b) {
            assert_abs_diff_eq!(yi, bi, epsilon = 1e-10);
        }
    }

    #[test]
    fn sparse_matches_banded_direct_path() {
        // same cyclic matrix through both solvers agrees to 1e-10 relative
        let mut rng = StdRng::seed_from_u64(7);
        let n = 512;
        let (mut banded, dense) = random_banded(n, 2, 2, true, &mut rng);
        let mut trips: Vec<(usize, usize, f64)> = Vec::new();
        for (r, row) in dense.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if *v != 0.0 {
                    trips.push((r, c, *v));
                }
            }
        }
        let mut sparse = SparseSystem::from_triplets(n, &mut trips).unwrap();
        let b: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let xd = banded.solve(&b, 1e-13).unwrap();
        let xi = sparse.solve(&b, 1e-13).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(xd[i], xi[i], epsilon = 1e-10 * xd[i].abs().max(1.0));
        }
    }

    #[test]
    fn sparse_five_point_poisson_like() {
        // mass + 2D five-point Laplacian on a 20x20 periodic grid
        let nx = 20;
        let n = nx * nx;
        let mut trips = Vec::new();
        for j in 0..nx {
            for i in 0..nx {
                let r = j * nx + i;
                trips.push((r, r, 4.5));
                trips.push((r, j * nx + (i + 1) % nx, -1.0));
                trips.push((r, j * nx + (i + nx - 1) % nx, -1.0));
                trips.push((r, ((j + 1) % nx) * nx + i, -1.0));
                trips.push((r, ((j + nx - 1) % nx) * nx + i, -1.0));
            }
        }
        let mut sys = SparseSystem::from_triplets(n, &mut trips).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = sys.solve(&b, 1e-12).unwrap();
        // residual check through an independent matvec
        let mut y = vec![0.0; n];
        for j in 0..nx {
            for i in 0..nx {
                let r = j * nx + i;
                y[r] = 4.5 * x[r]
                    - x[j * nx + (i + 1) % nx]
                    - x[j * nx + (i + nx - 1) % nx]
                    - x[((j + 1) % nx) * nx + i]
                    - x[((j + nx - 1) % nx) * nx + i];
            }
        }
        let res: f64 = y
            .iter()
            .zip(&b)
            .map(|(yi, bi)| (yi - bi) * (yi - bi))
            .sum::<f64>()
            .sqrt();
        assert!(res <= 1e-11 * norm2(&b));
    }
}
