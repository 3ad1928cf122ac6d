//! Modified Bessel functions of the first kind and the Marcum-type Π function.

use crate::error::{Error, Result};

const SERIES_TOL: f64 = 1e-16;

/// `I_order(x)` for `order` in {0, 1} and `x >= 0` by its power series.
pub fn bessel_i(order: u32, x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("Bessel argument must be >= 0, got {x}")));
    }
    let s = 0.25 * x * x;
    match order {
        0 => Ok(i0_sq(s)),
        1 => Ok(0.5 * x * i1_ratio_sq(s)),
        _ => Err(Error::Domain(format!("Bessel order {order} is not supported"))),
    }
}

/// `I0(2 sqrt(s)) = sum s^k / (k!)^2`, valid for any real `s`.
pub fn i0_sq(s: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= s / (k * k);
        sum += term;
        if term.abs() <= SERIES_TOL * sum.abs() || k > 500.0 {
            return sum;
        }
        k += 1.0;
    }
}

/// `I1(2 sqrt(s)) / sqrt(s) = sum s^k / (k! (k+1)!)`, valid for any real `s`.
pub fn i1_ratio_sq(s: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= s / (k * (k + 1.0));
        sum += term;
        if term.abs() <= SERIES_TOL * sum.abs() || k > 500.0 {
            return sum;
        }
        k += 1.0;
    }
}

/// Π(s1, s2) through the double series `sum_k s1^k/k! * sum_{j<=k} s2^j/j!`.
///
/// Expanding the Bessel integrand and integrating term by term collapses the
/// integral definition to this form; it is the fast path used by the kernels.
pub fn pi_series(s1: f64, s2: f64) -> f64 {
    let mut outer = 1.0; // s1^k / k!
    let mut inner_term = 1.0; // s2^k / k!
    let mut partial = 1.0; // sum_{j<=k} s2^j / j!
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        outer *= s1 / k;
        inner_term *= s2 / k;
        partial += inner_term;
        let term = outer * partial;
        sum += term;
        if (term.abs() <= SERIES_TOL * sum.abs() && k > s1.abs()) || k > 1000.0 {
            return sum;
        }
        k += 1.0;
    }
}

/// Π(s1, s2) from its integral definition by adaptive Simpson quadrature.
pub fn pi_function(s1: f64, s2: f64) -> Result<f64> {
    if !(s1 >= 0.0 && s2 >= 0.0) {
        return Err(Error::Domain(format!("Π requires non-negative arguments, got ({s1}, {s2})")));
    }
    let g = |tau: f64| (-tau * s2).exp() * i0_sq(tau * s1 * s2);
    let integral = adaptive_simpson(&g, 0.0, 1.0, 1e-13);
    Ok((s1 + s2).exp() * (1.0 - s2 * (-s1).exp() * integral))
}

/// Adaptive Simpson quadrature on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}
