//! Characteristics-based solver for 2x2 first-order kernel systems on the
//! triangle `0 <= y <= x <= 1`.
//!
//! Every system handled here has the shape
//!
//! ```text
//! A(x,y) = a_diag + ∫_0^{s*} a_coef · B(x - ax·s, y + ay·s) ds,   s* = (x-y)/(ax+ay)
//! B(x,y) = rho · A(x-y, 0) + g(x-y) + ∫_0^y b_coef · A(x-s, y-s) ds
//! ```
//!
//! i.e. `A` is carried in from the diagonal and `B` from the `y = 0` edge.
//! The fixed point is found by Gauss-Seidel sweeps; off-node values come from
//! piecewise-linear interpolation on the triangulated grid and line integrals
//! use the trapezoid rule, so the solution is second-order accurate.

use crate::error::{Error, Result};
use crate::kernels::{LambdaGamma, TriangleTable};
use crate::params::{PlantParameters, Theta};

#[derive(Debug, Clone)]
pub struct KernelSystem {
    pub ax: f64,
    pub ay: f64,
    pub a_coef: f64,
    pub a_diag: f64,
    pub b_coef: f64,
    pub rho: f64,
    /// Boundary forcing `g` sampled at the grid nodes `i/n`.
    pub g: Vec<f64>,
}

impl KernelSystem {
    /// (F, H): `q2 F_x - q1 F_y = d2 H`, `q2 (H_x + H_y) = d1 F`.
    pub fn fh(params: &PlantParameters, theta: &Theta, n: usize) -> Self {
        let (q1, q2) = (params.q1, params.q2);
        Self {
            ax: q2,
            ay: q1,
            a_coef: theta.d2,
            a_diag: -theta.d2 / (q1 + q2),
            b_coef: theta.d1 / q2,
            rho: q1 * params.p / q2,
            g: vec![0.0; n + 1],
        }
    }

    /// (Ψ, Φ): same operator as (F, H) with `lambda(x) B / q2` entering at `y = 0`.
    pub fn psi_phi(params: &PlantParameters, theta: &Theta, kappas: &[f64], n: usize) -> Result<Self> {
        let k = crate::kernels::gain_vector(&params.l, kappas, theta.b)?;
        let lg = LambdaGamma::new(params, &k);
        let bvec = params.b_vector(theta.b);
        let g = (0..=n).map(|i| (lg.lambda(i as f64 / n as f64) * &bvec)[0] / params.q2).collect();
        Ok(Self { g, ..Self::fh(params, theta, n) })
    }

    /// (φ̃, φ) of the first transformation:
    /// `q2 φ̃_y - q1 φ̃_x = d1 φ`, `q1 (φ_x + φ_y) = -d2 φ̃`,
    /// `φ̃(x,x) = d1/(q1+q2)`, `φ(x,0) = q2/(q1 p) φ̃(x,0) - γ(x) B/(q1 p)`.
    pub fn first_transform(params: &PlantParameters, theta: &Theta, kappas: &[f64], n: usize) -> Result<Self> {
        let (q1, q2, p) = (params.q1, params.q2, params.p);
        let k = crate::kernels::gain_vector(&params.l, kappas, theta.b)?;
        let lg = LambdaGamma::new(params, &k);
        let bvec = params.b_vector(theta.b);
        let g = (0..=n).map(|i| -(lg.gamma(i as f64 / n as f64) * &bvec)[0] / (q1 * p)).collect();
        Ok(Self {
            ax: q1,
            ay: q2,
            a_coef: -theta.d1,
            a_diag: theta.d1 / (q1 + q2),
            b_coef: -theta.d2 / q1,
            rho: q2 / (q1 * p),
            g,
        })
    }
}

/// Result of [`solve`]: the two kernels and the number of sweeps used.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub a: TriangleTable,
    pub b: TriangleTable,
    pub sweeps: usize,
}

/// Solves `sys` with `n` intervals per axis until a sweep changes no value by more than `tol`.
pub fn solve(sys: &KernelSystem, n: usize, tol: f64, max_sweeps: usize) -> Result<OracleSolution> {
    assert_eq!(sys.g.len(), n + 1, "boundary forcing must be sampled on the grid");
    let h = 1.0 / n as f64;
    let mut a = TriangleTable::zeros(n);
    let mut b = TriangleTable::zeros(n);
    let mut change = f64::INFINITY;
    for sweep in 1..=max_sweeps {
        change = 0.0;
        for i in 0..=n {
            for j in 0..=i {
                // B from the y = 0 edge along the diagonal direction; nodes are hit exactly.
                let mut acc = 0.0;
                for k in 0..=j {
                    let w = if k == 0 || k == j { 0.5 } else { 1.0 };
                    acc += w * a.get(i - k, j - k);
                }
                let line = if j == 0 { 0.0 } else { sys.b_coef * h * acc };
                let bv = sys.rho * a.get(i - j, 0) + sys.g[i - j] + line;
                change = change.max((bv - b.get(i, j)).abs());
                b.set(i, j, bv);
            }
            for j in (0..=i).rev() {
                let av = if i == j { sys.a_diag } else { a_line(sys, &b, i, j, h) };
                change = change.max((av - a.get(i, j)).abs());
                a.set(i, j, av);
            }
        }
        if change < tol {
            return Ok(OracleSolution { a, b, sweeps: sweep });
        }
    }
    Err(Error::OracleDivergence { sweeps: max_sweeps, change })
}

fn a_line(sys: &KernelSystem, b: &TriangleTable, i: usize, j: usize, h: f64) -> f64 {
    let x = i as f64 * h;
    let y = j as f64 * h;
    let s_end = (x - y) / (sys.ax + sys.ay);
    let segments = (i - j).max(1);
    let ds = s_end / segments as f64;
    let mut acc = 0.0;
    for k in 0..=segments {
        let s = k as f64 * ds;
        let w = if k == 0 || k == segments { 0.5 } else { 1.0 };
        let xs = x - sys.ax * s;
        let ys = (y + sys.ay * s).min(xs);
        acc += w * b.interpolate(xs, ys);
    }
    sys.a_diag + sys.a_coef * ds * acc
}

/// Solves the (F, H) system to a fixed-point change below 1e-10.
pub fn fh_oracle(params: &PlantParameters, theta: &Theta, n: usize) -> Result<OracleSolution> {
    solve(&KernelSystem::fh(params, theta, n), n, 1e-10, 200)
}
