//! Explicit backstepping kernels.
//!
//! The pair (F, H) solves a first-order hyperbolic system on the triangle
//! `0 <= y <= x <= 1` in closed form through Bessel functions and the Π
//! function. The controller only needs the `x = 1` traces of the composite
//! kernels Ψ, Φ together with their `y`-derivatives; diagnostics need the full
//! triangle. [`oracle`] integrates the kernel PDEs along characteristics as an
//! independent check.

pub mod oracle;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::params::{PlantParameters, Theta};
use crate::quad;
use crate::special::{i0_sq, i1_ratio_sq, pi_series};

/// Closed-form evaluator of (F, H) for fixed speeds, boundary gain and couplings.
#[derive(Debug, Clone, Copy)]
pub struct FhKernel {
    q1: f64,
    q2: f64,
    p: f64,
    d1: f64,
    d2: f64,
    qs: f64,
    bessel_scale: f64,
    mixed: f64,
    f_lead: f64,
}

impl FhKernel {
    pub fn new(q1: f64, q2: f64, p: f64, d1: f64, d2: f64) -> Self {
        let qs = q1 + q2;
        Self {
            q1,
            q2,
            p,
            d1,
            d2,
            qs,
            bessel_scale: d1 * d2 / (qs * qs),
            mixed: d1 * d2 / qs,
            f_lead: d1 * q2 / (p * q1),
        }
    }

    pub fn for_theta(params: &PlantParameters, theta: &Theta) -> Self {
        Self::new(params.q1, params.q2, params.p, theta.d1, theta.d2)
    }

    /// (F, H) at `(x, y)`; the caller guarantees `0 <= y <= x`.
    ///
    /// Both Bessel terms are written through entire functions of
    /// `s = d1 d2 (x - y)(q1 x/q2 + y)/(q1+q2)^2`, which removes the 0/0 ratio
    /// on the diagonal and at the origin.
    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> (f64, f64) {
        let u = x - y;
        let v = self.q1 * x / self.q2 + y;
        let s = self.bessel_scale * u * v;
        let i0 = i0_sq(s);
        let g = i1_ratio_sq(s);
        let s1 = self.p * self.q1 * self.d2 / self.q2 * u / self.qs;
        let s2 = self.d1 / (self.p * self.q1) * (self.q1 * x + self.q2 * y) / self.qs;
        let pi = pi_series(s1, s2);
        let f = -1.0 / (self.p * self.qs)
            * (self.f_lead * i0 + self.mixed * u * g + (self.p * self.d2 - self.f_lead) * pi);
        let h = -1.0 / self.qs
            * (self.d1 / self.p * i0
                + self.mixed * v * g
                + (self.p * self.d2 * self.q1 / self.q2 - self.d1 / self.p) * pi);
        (f, h)
    }
}

/// Checked evaluation of the closed-form kernels at one point.
pub fn kernel_fh(params: &PlantParameters, theta: &Theta, x: f64, y: f64) -> Result<(f64, f64)> {
    if params.p == 0.0 {
        return Err(Error::InvalidParameter("p = 0 makes the kernels singular".into()));
    }
    if !(0.0..=1.0).contains(&y) || !(0.0..=1.0).contains(&x) || y > x {
        return Err(Error::Domain(format!("kernel evaluated outside 0 <= y <= x <= 1 at ({x}, {y})")));
    }
    Ok(FhKernel::for_theta(params, theta).eval(x, y))
}

/// Samples on the lower triangle of a uniform `(n+1) x (n+1)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleTable {
    pub n: usize,
    data: Vec<f64>,
}

impl TriangleTable {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; (n + 1) * (n + 2) / 2] }
    }

    #[inline]
    fn idx(i: usize, j: usize) -> usize {
        debug_assert!(j <= i);
        i * (i + 1) / 2 + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[Self::idx(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[Self::idx(i, j)] = v;
    }

    /// Row `i` as a slice over `j = 0..=i`.
    pub fn row(&self, i: usize) -> &[f64] {
        let s = Self::idx(i, 0);
        &self.data[s..=s + i]
    }

    pub fn max_abs_diff(&self, other: &TriangleTable) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Piecewise-linear interpolation on the triangulated grid.
    pub fn interpolate(&self, x: f64, y: f64) -> f64 {
        let n = self.n as f64;
        let sx = (x * n).clamp(0.0, n);
        let sy = (y * n).clamp(0.0, sx);
        let i = (sx.floor() as usize).min(self.n.saturating_sub(1));
        let j = (sy.floor() as usize).min(i);
        let a = sx - i as f64;
        let b = sy - j as f64;
        if self.n == 0 {
            return self.data[0];
        }
        let f00 = self.get(i, j);
        let f10 = self.get(i + 1, j);
        let f11 = self.get(i + 1, j + 1);
        if a >= b || j == i {
            f00 + a * (f10 - f00) + b * (f11 - f10)
        } else {
            let f01 = self.get(i, j + 1);
            f00 + b * (f01 - f00) + a * (f11 - f01)
        }
    }

    /// Writes the table as a plain-text matrix, zero above the diagonal.
    pub fn write_matrix(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        for i in 0..=self.n {
            let row: Vec<String> = (0..=self.n)
                .map(|j| if j <= i { format!("{:.12e}", self.get(i, j)) } else { "0".into() })
                .collect();
            writeln!(out, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// (F, H) sampled on the triangle with `n` intervals per axis.
pub fn fh_tables(kernel: &FhKernel, n: usize) -> (TriangleTable, TriangleTable) {
    let mut f = TriangleTable::zeros(n);
    let mut h = TriangleTable::zeros(n);
    let step = 1.0 / n as f64;
    for i in 0..=n {
        for j in 0..=i {
            let (fv, hv) = kernel.eval(i as f64 * step, j as f64 * step);
            f.set(i, j, fv);
            h.set(i, j, hv);
        }
    }
    (f, h)
}

/// Linear chain `g_i = G_i . y` used by the distal-ODE backstepping.
///
/// Returns rows `G_0 = 0, G_1, ..., G_{n-1}`. Each step applies
/// `g_i = -kappa_i (y_i - g_{i-1}) + sum_j dg_{i-1}/dy_j y_{j+1}`.
pub fn g_chain(kappas: &[f64]) -> Vec<DVector<f64>> {
    let n = kappas.len();
    let mut rows = vec![DVector::zeros(n)];
    for i in 1..n {
        let prev = &rows[i - 1];
        let mut next = DVector::zeros(n);
        for j in 0..n - 1 {
            next[j + 1] += prev[j];
        }
        let mut zi = -prev.clone();
        zi[i - 1] += 1.0;
        next -= zi * kappas[i - 1];
        rows.push(next);
    }
    rows
}

/// Row `e_{i} - G_{i-1}` mapping `Y` to the `i`-th target coordinate (1-based `i`).
pub fn target_row(chain: &[DVector<f64>], i: usize) -> DVector<f64> {
    let mut r = -chain[i - 1].clone();
    r[i - 1] += 1.0;
    r
}

/// Gain row `K` such that the last target coordinate sees `-kappa_n z_n - b K Y`.
pub fn gain_vector(l: &[f64], kappas: &[f64], b: f64) -> Result<DVector<f64>> {
    let n = l.len();
    if kappas.len() != n {
        return Err(Error::InvalidParameter(format!("need {n} kappas, got {}", kappas.len())));
    }
    if kappas.iter().any(|&k| !(k > 0.0)) {
        return Err(Error::InvalidParameter("kappas must be positive".into()));
    }
    if b == 0.0 {
        return Err(Error::InvalidParameter("b must be nonzero".into()));
    }
    let chain = g_chain(kappas);
    let last = &chain[n - 1];
    let mut shifted = DVector::zeros(n);
    for j in 0..n - 1 {
        shifted[j + 1] = last[j];
    }
    let zn = target_row(&chain, n);
    let k = -(DVector::from_column_slice(l) - shifted + zn * kappas[n - 1]) / b;
    Ok(k)
}

/// Evaluates `lambda(x) = K e^{A x/q2}` and `gamma(x) = p K e^{-A x/q1}`.
#[derive(Debug, Clone)]
pub struct LambdaGamma {
    a: DMatrix<f64>,
    k: RowDVector<f64>,
    q1: f64,
    q2: f64,
    p: f64,
}

impl LambdaGamma {
    pub fn new(params: &PlantParameters, k: &DVector<f64>) -> Self {
        Self { a: params.a_matrix(), k: k.transpose(), q1: params.q1, q2: params.q2, p: params.p }
    }

    pub fn lambda(&self, x: f64) -> RowDVector<f64> {
        &self.k * linalg::expm(&(&self.a * (x / self.q2)))
    }

    pub fn gamma(&self, x: f64) -> RowDVector<f64> {
        &self.k * linalg::expm(&(&self.a * (-x / self.q1))) * self.p
    }
}

/// `(lambda(x), gamma(x))`.
pub fn lambda_gamma(params: &PlantParameters, k: &DVector<f64>, x: f64) -> (RowDVector<f64>, RowDVector<f64>) {
    let lg = LambdaGamma::new(params, k);
    (lg.lambda(x), lg.gamma(x))
}

/// Scalar `lambda(s) B` on `s = i/n`, `i = 0..=n`. It does not depend on `b`.
fn lambda_b_samples(params: &PlantParameters, kappas: &[f64], n: usize) -> Result<Vec<f64>> {
    let k = gain_vector(&params.l, kappas, 1.0)?;
    let lg = LambdaGamma::new(params, &k);
    let bvec = params.b_vector(1.0);
    let step = linalg::expm(&(params.a_matrix() * (1.0 / (n as f64 * params.q2))));
    let mut row = lg.k.clone();
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..=n {
        if i % 64 == 0 {
            row = lg.lambda(i as f64 / n as f64);
        }
        out.push((&row * &bvec)[0]);
        row = &row * &step;
    }
    Ok(out)
}

/// Scalar `lambda(s) B` at one point (independent of `b`).
fn lambda_b(params: &PlantParameters, kappas: &[f64], s: f64) -> Result<f64> {
    let k = gain_vector(&params.l, kappas, 1.0)?;
    Ok((LambdaGamma::new(params, &k).lambda(s) * params.b_vector(1.0))[0])
}

/// `Ψ(1,·)`, `Φ(1,·)` and their first two `y`-derivatives on a uniform grid.
///
/// These traces depend on `(d1, d2)` only; `b` cancels between `K` and `B`.
#[derive(Debug, Clone)]
pub struct KernelRows {
    pub n: usize,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi_y: Vec<f64>,
    pub psi_yy: Vec<f64>,
    pub phi_y: Vec<f64>,
    pub phi_yy: Vec<f64>,
}

impl KernelRows {
    /// Evaluates the rows with `n` intervals (`n >= 5`).
    pub fn build(params: &PlantParameters, d1: f64, d2: f64, kappas: &[f64], n: usize) -> Result<Self> {
        if n < 5 {
            return Err(Error::InvalidParameter(format!("kernel grid needs at least 5 intervals, got {n}")));
        }
        let kernel = FhKernel::new(params.q1, params.q2, params.p, d1, d2);
        let h = 1.0 / n as f64;
        // L(1, r_i) = -lambda(1 - r_i) B / q2
        let lb = lambda_b_samples(params, kappas, n)?;
        let l1: Vec<f64> = (0..=n).map(|i| -lb[n - i] / params.q2).collect();
        let mut psi = vec![0.0; n + 1];
        let mut phi = vec![0.0; n + 1];
        let mut fcol = vec![0.0; n + 1];
        let mut hcol = vec![0.0; n + 1];
        for j in 0..=n {
            let y = j as f64 * h;
            for i in j..=n {
                let (fv, hv) = kernel.eval(i as f64 * h, y);
                fcol[i] = fv;
                hcol[i] = hv;
            }
            let (int_f, int_h) = if n - j == 1 {
                // One interval left: Simpson with a closed-form midpoint sample.
                let (fm, hm) = kernel.eval(1.0 - 0.5 * h, y);
                let lm = -lambda_b(params, kappas, 0.5 * h)? / params.q2;
                let w = h / 6.0;
                (
                    w * (l1[j] * fcol[j] + 4.0 * lm * fm + l1[n] * fcol[n]),
                    w * (l1[j] * hcol[j] + 4.0 * lm * hm + l1[n] * hcol[n]),
                )
            } else {
                let w = quad::simpson_weights(n - j, h);
                let mut acc = (0.0, 0.0);
                for (k, wk) in w.iter().enumerate() {
                    let i = j + k;
                    acc.0 += wk * l1[i] * fcol[i];
                    acc.1 += wk * l1[i] * hcol[i];
                }
                acc
            };
            psi[j] = fcol[n] + int_f;
            phi[j] = hcol[n] - l1[j] + int_h;
        }
        let (psi_y, psi_yy) = quad::derivatives4(&psi, h);
        let (phi_y, phi_yy) = quad::derivatives4(&phi, h);
        Ok(Self { n, psi, phi, psi_y, psi_yy, phi_y, phi_yy })
    }

    /// Keeps every `stride`-th sample.
    pub fn subsample(&self, stride: usize) -> Self {
        let pick = |v: &Vec<f64>| v.iter().step_by(stride).copied().collect::<Vec<_>>();
        Self {
            n: self.n / stride,
            psi: pick(&self.psi),
            phi: pick(&self.phi),
            psi_y: pick(&self.psi_y),
            psi_yy: pick(&self.psi_yy),
            phi_y: pick(&self.phi_y),
            phi_yy: pick(&self.phi_yy),
        }
    }

    /// Resamples onto `n` intervals by local cubic interpolation.
    pub fn resample(&self, n: usize) -> Self {
        let pts = quad::nodes(n);
        let map = |v: &Vec<f64>| pts.iter().map(|&x| quad::interpolate(v, x)).collect::<Vec<_>>();
        Self {
            n,
            psi: map(&self.psi),
            phi: map(&self.phi),
            psi_y: map(&self.psi_y),
            psi_yy: map(&self.psi_yy),
            phi_y: map(&self.phi_y),
            phi_yy: map(&self.phi_yy),
        }
    }
}

/// Smallest kernel resolution used when deriving rows for a coarse simulation grid.
pub const MIN_KERNEL_INTERVALS: usize = 400;

/// Kernel resolution for a simulation grid: a multiple of `nx` with at least
/// [`MIN_KERNEL_INTERVALS`] intervals, so rows subsample onto the grid exactly.
pub fn refinement_factor(nx: usize) -> usize {
    MIN_KERNEL_INTERVALS.div_ceil(nx).max(1)
}

/// Kernel data for one parameter triple on the simulation grid.
#[derive(Debug, Clone)]
pub struct KernelContext {
    pub theta: Theta,
    pub k: DVector<f64>,
    /// `lambda(1)`.
    pub lambda1: RowDVector<f64>,
    pub rows: KernelRows,
}

impl KernelContext {
    /// Builds rows on a refined grid and subsamples them onto `nx` intervals.
    pub fn build(params: &PlantParameters, theta: &Theta, kappas: &[f64], nx: usize) -> Result<Self> {
        let r = refinement_factor(nx);
        let rows = KernelRows::build(params, theta.d1, theta.d2, kappas, nx * r)?.subsample(r);
        Self::from_rows(params, theta, kappas, rows)
    }

    /// Attaches the `b`-dependent pieces to precomputed rows.
    pub fn from_rows(params: &PlantParameters, theta: &Theta, kappas: &[f64], rows: KernelRows) -> Result<Self> {
        let k = gain_vector(&params.l, kappas, theta.b)?;
        let lambda1 = LambdaGamma::new(params, &k).lambda(1.0);
        Ok(Self { theta: *theta, k, lambda1, rows })
    }
}

/// Ψ and Φ on the whole triangle from the closed-form (F, H).
pub fn psi_phi_tables(params: &PlantParameters, theta: &Theta, kappas: &[f64], n: usize) -> Result<(TriangleTable, TriangleTable)> {
    let kernel = FhKernel::for_theta(params, theta);
    let (f, h) = fh_tables(&kernel, n);
    let lb = lambda_b_samples(params, kappas, n)?;
    // L(x_i, r_k) = -lambda((i - k) h) B / q2
    let ell: Vec<f64> = lb.iter().map(|v| -v / params.q2).collect();
    let ell_half = -lambda_b(params, kappas, 0.5 / n as f64)? / params.q2;
    let step = 1.0 / n as f64;
    let mut psi = TriangleTable::zeros(n);
    let mut phi = TriangleTable::zeros(n);
    for i in 0..=n {
        for j in 0..=i {
            let (int_f, int_h) = if i - j == 1 {
                let (fm, hm) = kernel.eval((i as f64 - 0.5) * step, j as f64 * step);
                let w = step / 6.0;
                (
                    w * (ell[1] * f.get(j, j) + 4.0 * ell_half * fm + ell[0] * f.get(i, j)),
                    w * (ell[1] * h.get(j, j) + 4.0 * ell_half * hm + ell[0] * h.get(i, j)),
                )
            } else {
                let w = quad::simpson_weights(i - j, step);
                let mut acc = (0.0, 0.0);
                for (m, wm) in w.iter().enumerate() {
                    let k = j + m;
                    acc.0 += wm * ell[i - k] * f.get(k, j);
                    acc.1 += wm * ell[i - k] * h.get(k, j);
                }
                acc
            };
            psi.set(i, j, f.get(i, j) + int_f);
            phi.set(i, j, h.get(i, j) - ell[i - j] + int_h);
        }
    }
    Ok((psi, phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::reference_parameters;

    fn reference() -> (PlantParameters, Theta) {
        let p = reference_parameters();
        let t = p.theta;
        (p, t)
    }

    #[test]
    fn boundary_values_of_fh() {
        let (p, t) = reference();
        let (f, _) = kernel_fh(&p, &t, 0.7, 0.7).unwrap();
        assert!((f + 0.5).abs() < 1e-12);
        for x in [0.0, 0.3, 1.0] {
            let (f0, h0) = kernel_fh(&p, &t, x, 0.0).unwrap();
            assert!((h0 - p.q1 / p.q2 * p.p * f0).abs() < 1e-10);
            let (fd, _) = kernel_fh(&p, &t, x, x).unwrap();
            assert!((fd + 0.5).abs() < 1e-10);
        }
    }

    #[test]
    fn fh_vanish_without_coupling() {
        let (p, _) = reference();
        let t = Theta::new(0.0, 0.0, 1.0);
        let (f, h) = kernel_fh(&p, &t, 0.8, 0.2).unwrap();
        assert_eq!((f, h), (0.0, 0.0));
    }

    #[test]
    fn fh_rejects_upper_triangle() {
        let (p, t) = reference();
        assert!(matches!(kernel_fh(&p, &t, 0.2, 0.5), Err(Error::Domain(_))));
        let mut q = p.clone();
        q.p = 0.0;
        assert!(kernel_fh(&q, &t, 0.5, 0.2).is_err());
    }

    #[test]
    fn gain_vector_examples() {
        let k = gain_vector(&[1.0, -0.5], &[30.0, 10.0], 1.0).unwrap();
        assert!((k[0] + 301.0).abs() < 1e-12 && (k[1] + 39.5).abs() < 1e-12);
        let k = gain_vector(&[0.0, 0.0], &[1.0, 1.0], 1.0).unwrap();
        assert!((k[0] + 1.0).abs() < 1e-12 && (k[1] + 2.0).abs() < 1e-12);
        let k = gain_vector(&[0.7], &[2.0], 2.0).unwrap();
        assert!((k[0] - (-0.7 - 2.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn lambda_gamma_at_zero() {
        let (p, _) = reference();
        let k = gain_vector(&p.l, &[30.0, 10.0], 1.0).unwrap();
        let (l0, g0) = lambda_gamma(&p, &k, 0.0);
        assert!((l0.transpose() - &k).amax() < 1e-15);
        assert!((g0.transpose() - &k * p.p).amax() < 1e-15);
    }

    #[test]
    fn rows_without_coupling() {
        let (p, _) = reference();
        let rows = KernelRows::build(&p, 0.0, 0.0, &[30.0, 10.0], 40).unwrap();
        let lb = lambda_b_samples(&p, &[30.0, 10.0], 40).unwrap();
        for j in 0..=40 {
            assert!(rows.psi[j].abs() < 1e-14);
            assert!((rows.phi[j] - lb[40 - j] / p.q2).abs() < 1e-9);
        }
    }

    #[test]
    fn row_boundary_identities() {
        let (p, t) = reference();
        let ctx = KernelContext::build(&p, &t, &[30.0, 10.0], 100).unwrap();
        let rows = &ctx.rows;
        assert!((rows.psi[rows.n] + 0.5).abs() < 1e-12);
        let lb = (&ctx.lambda1 * p.b_vector(t.b))[0];
        let res = rows.phi[0] - p.q1 * p.p / p.q2 * rows.psi[0] - lb / p.q2;
        assert!(res.abs() < 1e-6, "residual {res}");
    }

    #[test]
    fn subsampled_rows_match_direct_build() {
        let (p, t) = reference();
        let fine = KernelRows::build(&p, t.d1, t.d2, &[30.0, 10.0], 400).unwrap().subsample(20);
        let coarse = KernelRows::build(&p, t.d1, t.d2, &[30.0, 10.0], 20).unwrap();
        assert_eq!(fine.n, 20);
        for j in 0..=20 {
            assert!((fine.psi[j] - coarse.psi[j]).abs() < 1e-5 * fine.psi[j].abs().max(1.0));
            assert!((fine.phi[j] - coarse.phi[j]).abs() < 1e-5 * fine.phi[j].abs().max(1.0));
        }
    }

    #[test]
    fn triangle_tables_agree_with_rows() {
        let (p, t) = reference();
        let (psi, phi) = psi_phi_tables(&p, &t, &[30.0, 10.0], 60).unwrap();
        let rows = KernelRows::build(&p, t.d1, t.d2, &[30.0, 10.0], 60).unwrap();
        for j in 0..=60 {
            assert!((psi.get(60, j) - rows.psi[j]).abs() < 1e-12);
            assert!((phi.get(60, j) - rows.phi[j]).abs() < 1e-12);
        }
        for i in 0..=60 {
            assert!((psi.get(i, i) + 0.5).abs() < 1e-12);
        }
    }
}
