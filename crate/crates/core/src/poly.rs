//! Legendre polynomials, fully-normalized associated Legendre functions and
//! Gauss-Legendre quadrature nodes.

/// Evaluate the Legendre polynomial P_n(x) by the three-term recurrence
/// (n+1) P_{n+1} = (2n+1) x P_n - n P_{n-1}.
pub fn legendre(n: usize, x: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut p_prev = 1.0;
    let mut p_curr = x;
    for k in 1..n {
        let p_next = ((2 * k + 1) as f64 * x * p_curr - k as f64 * p_prev) / (k + 1) as f64;
        p_prev = p_curr;
        p_curr = p_next;
    }
    p_curr
}

/// Evaluate P_n(x) and its derivative together.
pub fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    if n == 1 {
        return (x, 1.0);
    }
    let mut p_prev = 1.0;
    let mut p_curr = x;
    for k in 1..n {
        let p_next = ((2 * k + 1) as f64 * x * p_curr - k as f64 * p_prev) / (k + 1) as f64;
        p_prev = p_curr;
        p_curr = p_next;
    }
    let dp = if (x.abs() - 1.0).abs() < 1e-14 {
        let s = if x > 0.0 || n % 2 == 1 { 1.0 } else { -1.0 };
        s * (n * (n + 1)) as f64 / 2.0
    } else {
        n as f64 * (x * p_curr - p_prev) / (x * x - 1.0)
    };
    (p_curr, dp)
}

/// Gauss-Legendre nodes and weights on [-1, 1], exact for polynomials of
/// degree <= 2n - 1. Newton iteration from the Chebyshev initial guess.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                let (_, d) = legendre_and_derivative(n, x);
                dp = d;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x.abs();
        weights[i] = w;
        nodes[n - 1 - i] = x.abs();
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
        let (_, d) = legendre_and_derivative(n, 0.0);
        weights[n / 2] = 2.0 / (d * d);
    }
    (nodes, weights)
}

/// Fully-normalized associated Legendre values Pbar_l^m(mu) for all
/// 0 <= m <= l <= lmax, packed as `out[l*(l+1)/2 + m]`.
///
/// Normalization: the real spherical harmonics built from these values with
/// the sqrt(2) factor on m != 0 are orthonormal on the unit sphere.
/// No Condon-Shortley phase.
pub fn normalized_assoc_legendre(lmax: usize, mu: f64, out: &mut Vec<f64>) {
    let len = (lmax + 1) * (lmax + 2) / 2;
    out.clear();
    out.resize(len, 0.0);
    let idx = |l: usize, m: usize| l * (l + 1) / 2 + m;
    let s = (1.0 - mu * mu).max(0.0).sqrt();

    out[idx(0, 0)] = (1.0 / (4.0 * std::f64::consts::PI)).sqrt();
    // Diagonal: Pbar_m^m = sqrt((2m+1)/(2m)) * s * Pbar_{m-1}^{m-1}
    for m in 1..=lmax {
        out[idx(m, m)] = ((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * s * out[idx(m - 1, m - 1)];
    }
    // First off-diagonal: Pbar_{m+1}^m = sqrt(2m+3) * mu * Pbar_m^m
    for m in 0..lmax {
        out[idx(m + 1, m)] = ((2 * m + 3) as f64).sqrt() * mu * out[idx(m, m)];
    }
    // General: Pbar_l^m = a (mu Pbar_{l-1}^m - b Pbar_{l-2}^m)
    for m in 0..=lmax {
        for l in (m + 2)..=lmax {
            let lf = l as f64;
            let mf = m as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0))
                .sqrt();
            out[idx(l, m)] = a * (mu * out[idx(l - 1, m)] - b * out[idx(l - 2, m)]);
        }
    }
}
