//! Target-state reconstruction, the Lyapunov function and safety margins.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::controller::{ControllerContext, GainConfig};
use crate::error::{Error, Result};
use crate::kernels::oracle::{self, KernelSystem};
use crate::kernels::{g_chain, gain_vector, psi_phi_tables, target_row, LambdaGamma, TriangleTable};
use crate::linalg;
use crate::params::{PlantParameters, Theta};
use crate::plant::PlantState;
use crate::quad;

/// Kernels of the forward transformation sampled for one parameter triple.
///
/// `β` uses the closed-form kernels on the simulation grid. `α` needs the
/// first-transformation kernels, which only the characteristics oracle
/// provides, so it lives on a coarser grid every `stride` nodes.
#[derive(Debug, Clone)]
pub struct TransformTables {
    pub nx: usize,
    pub stride: usize,
    psi: TriangleTable,
    phi: TriangleTable,
    lambda: Vec<RowDVector<f64>>,
    /// Kernel acting on `z` in `α`.
    alpha_z: TriangleTable,
    /// Kernel acting on `w` in `α`.
    alpha_w: TriangleTable,
    gamma: Vec<RowDVector<f64>>,
    rows: Vec<DVector<f64>>,
}

impl TransformTables {
    /// `coarse` must divide `nx`.
    pub fn build(params: &PlantParameters, theta: &Theta, kappas: &[f64], nx: usize, coarse: usize) -> Result<Self> {
        if coarse == 0 || !nx.is_multiple_of(coarse) {
            return Err(Error::InvalidParameter(format!("diagnostic grid {coarse} must divide nx = {nx}")));
        }
        let (psi, phi) = psi_phi_tables(params, theta, kappas, nx)?;
        let k = gain_vector(&params.l, kappas, theta.b)?;
        let lg = LambdaGamma::new(params, &k);
        let lambda = quad::nodes(nx).iter().map(|&x| lg.lambda(x)).collect();
        let sys = KernelSystem::first_transform(params, theta, kappas, coarse)?;
        let sol = oracle::solve(&sys, coarse, 1e-10, 400)?;
        let gamma = quad::nodes(coarse).iter().map(|&x| lg.gamma(x)).collect();
        let chain = g_chain(kappas);
        let rows = (1..=params.n()).map(|i| target_row(&chain, i)).collect();
        Ok(Self { nx, stride: nx / coarse, psi, phi, lambda, alpha_z: sol.b, alpha_w: sol.a, gamma, rows })
    }

    pub fn coarse(&self) -> usize {
        self.nx / self.stride
    }
}

/// The state in the coordinates of the target system.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetState {
    /// Distal target coordinates `z_1..z_n`.
    pub z: DVector<f64>,
    /// `α` on the coarse grid.
    pub alpha: Vec<f64>,
    /// `β` on the simulation grid.
    pub beta: Vec<f64>,
    /// `h_1..h_m`.
    pub h: Vec<f64>,
}

impl TargetState {
    /// `||β||² + ||α||² + Σ h² + |Z|²`.
    pub fn xi(&self) -> f64 {
        let hb = 1.0 / (self.beta.len() - 1) as f64;
        let ha = 1.0 / (self.alpha.len() - 1) as f64;
        quad::trapezoid_product(&self.beta, &self.beta, hb)
            + quad::trapezoid_product(&self.alpha, &self.alpha, ha)
            + self.h.iter().map(|v| v * v).sum::<f64>()
            + self.z.norm_squared()
    }
}

/// `Z` of the distal chain alone.
pub fn distal_target(y: &DVector<f64>, kappas: &[f64]) -> DVector<f64> {
    let chain = g_chain(kappas);
    DVector::from_iterator(y.len(), (1..=y.len()).map(|i| target_row(&chain, i).dot(y)))
}

/// Maps a plant state to the target coordinates.
pub fn forward_transform(
    state: &PlantState,
    params: &PlantParameters,
    tables: &TransformTables,
    ctx: &ControllerContext,
) -> Result<TargetState> {
    let nx = tables.nx;
    if state.nx() != nx {
        return Err(Error::InvalidParameter(format!("state has {} cells, tables {}", state.nx(), nx)));
    }
    let h = 1.0 / nx as f64;
    let mut beta = vec![0.0; nx + 1];
    for i in 0..=nx {
        let int = if i == 0 {
            0.0
        } else {
            let (pr, fr) = (tables.psi.row(i), tables.phi.row(i));
            let mut acc = 0.5 * (pr[0] * state.z[0] + fr[0] * state.w[0] + pr[i] * state.z[i] + fr[i] * state.w[i]);
            for j in 1..i {
                acc += pr[j] * state.z[j] + fr[j] * state.w[j];
            }
            h * acc
        };
        beta[i] = state.w[i] - int - (&tables.lambda[i] * &state.y)[0];
    }
    let coarse = tables.coarse();
    let s = tables.stride;
    let hc = 1.0 / coarse as f64;
    let mut alpha = vec![0.0; coarse + 1];
    for i in 0..=coarse {
        let int = if i == 0 {
            0.0
        } else {
            let (az, aw) = (tables.alpha_z.row(i), tables.alpha_w.row(i));
            let term = |j: usize| az[j] * state.z[j * s] + aw[j] * state.w[j * s];
            let mut acc = 0.5 * (term(0) + term(i));
            for j in 1..i {
                acc += term(j);
            }
            hc * acc
        };
        alpha[i] = state.z[i * s] - int - (&tables.gamma[i] * &state.y)[0];
    }
    let z = DVector::from_iterator(params.n(), tables.rows.iter().map(|r| r.dot(&state.y)));
    let h_chain = ctx.control(state, params, ctx.gains.c_last())?.h;
    Ok(TargetState { z, alpha, beta, h: h_chain })
}

/// Constants of the Lyapunov function.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovConfig {
    pub q: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub a0: f64,
    pub r: f64,
    pub sigma0: f64,
    /// Lower and upper equivalence constants between `V` and `Ξ`.
    pub xi1: f64,
    pub xi2: f64,
}

/// Bidiagonal target matrix with `-κ_i` on the diagonal.
pub fn target_matrix(kappas: &[f64]) -> DMatrix<f64> {
    let n = kappas.len();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = -kappas[i];
        if i + 1 < n {
            a[(i, i + 1)] = 1.0;
        }
    }
    a
}

/// Solves the Lyapunov equation for the distal target matrix and picks the
/// analysis constants at 1.01 times their lower bounds.
pub fn lyapunov_rate(params: &PlantParameters, gains: &GainConfig, q: &DMatrix<f64>, b: f64) -> Result<LyapunovConfig> {
    if gains.kappas.iter().any(|&k| !(k > 0.0)) {
        return Err(Error::InvalidParameter("target matrix is not Hurwitz: every kappa must be positive".into()));
    }
    let az = target_matrix(&gains.kappas);
    let p = linalg::lyapunov(&az, q)?;
    let (qmin, _) = linalg::eig_extremes(q);
    if !(qmin > 0.0) {
        return Err(Error::InvalidParameter("Q must be positive definite".into()));
    }
    let (pmin, pmax) = linalg::eig_extremes(&p);
    let pb = &p * params.b_vector(b);
    let e = std::f64::consts::E;
    let (q1, q2) = (params.q1, params.q2);
    let a0 = 1.01 * (q1 * params.p * params.p / q2 + 4.0 * pb.norm_squared() / (q2 * qmin));
    let r = 1.01 * (q2 * a0 * e / 3.0 + 1.0);
    let xi1 = pmin.min(r / 2.0).min(0.5 / e).min(a0 / 2.0);
    let xi2 = pmax.max(r / 2.0).max(0.5).max(a0 * e / 2.0);
    let sigma0 = 1.0f64.min(qmin / 2.0).min(q1 / (2.0 * e)).min(q2 * a0 / 2.0) / xi2;
    Ok(LyapunovConfig { q: q.clone(), p, a0, r, sigma0, xi1, xi2 })
}

/// `V = Z'PZ + r/2 Σ h² + 1/2 ∫ e^{-x} α² + a0/2 ∫ e^x β²`.
pub fn lyapunov_v(target: &TargetState, cfg: &LyapunovConfig) -> f64 {
    let zpz = (target.z.transpose() * &cfg.p * &target.z)[0];
    let hh: f64 = target.h.iter().map(|v| v * v).sum();
    let weighted = |f: &[f64], sign: f64| {
        let n = f.len() - 1;
        let g: Vec<f64> = f.iter().enumerate().map(|(i, v)| (sign * i as f64 / n as f64).exp() * v * v).collect();
        quad::trapezoid(&g, 1.0 / n as f64)
    };
    zpz + 0.5 * cfg.r * hh + 0.5 * weighted(&target.alpha, -1.0) + 0.5 * cfg.a0 * weighted(&target.beta, 1.0)
}

/// Running minima of the barrier quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginsReport {
    pub tol: f64,
    pub y1_initial: f64,
    /// `(value, time)` of the smallest `y1`.
    pub min_y1: (f64, f64),
    /// Smallest `z_i` after the transport delay.
    pub min_z: Vec<(f64, f64)>,
    /// Smallest `β` over space after the transport delay.
    pub min_beta: (f64, f64),
    /// Smallest `h_i` over the run.
    pub min_h: Vec<(f64, f64)>,
    pub max_abs_y1: f64,
    pub diverged: bool,
    pub violations: Vec<String>,
}

/// Collects the margins along a run.
#[derive(Debug, Clone)]
pub struct SafetyMonitor {
    delay: f64,
    divergence_factor: f64,
    report: MarginsReport,
}

fn lower(slot: &mut (f64, f64), v: f64, t: f64) {
    if v < slot.0 {
        *slot = (v, t);
    }
}

impl SafetyMonitor {
    pub fn new(params: &PlantParameters, y1_initial: f64, tol: f64) -> Self {
        let inf = (f64::INFINITY, f64::NAN);
        Self {
            delay: 1.0 / params.q2,
            divergence_factor: 10.0,
            report: MarginsReport {
                tol,
                y1_initial,
                min_y1: inf,
                min_z: vec![inf; params.n()],
                min_beta: inf,
                min_h: vec![inf; params.m()],
                max_abs_y1: y1_initial.abs(),
                diverged: false,
                violations: vec![],
            },
        }
    }

    pub fn record_output(&mut self, t: f64, y: &DVector<f64>, z: &DVector<f64>) {
        let r = &mut self.report;
        lower(&mut r.min_y1, y[0], t);
        r.max_abs_y1 = r.max_abs_y1.max(y[0].abs());
        if t >= self.delay - 1e-12 {
            for (slot, &v) in r.min_z.iter_mut().zip(z.iter()) {
                lower(slot, v, t);
            }
        }
    }

    pub fn record_chain(&mut self, t: f64, h: &[f64]) {
        for (slot, &v) in self.report.min_h.iter_mut().zip(h) {
            lower(slot, v, t);
        }
    }

    pub fn record_beta(&mut self, t: f64, beta: &[f64]) {
        if t >= self.delay - 1e-12 {
            let m = beta.iter().copied().fold(f64::INFINITY, f64::min);
            lower(&mut self.report.min_beta, m, t);
        }
    }

    pub fn mark_diverged(&mut self) {
        self.report.diverged = true;
    }

    /// Final report with violations listed against the tolerance.
    pub fn finish(mut self) -> MarginsReport {
        let r = &mut self.report;
        let tol = r.tol;
        let mut v = vec![];
        if r.min_y1.0 < -tol {
            v.push(format!("y1 reached {:.3e} at t = {:.3}", r.min_y1.0, r.min_y1.1));
        }
        for (i, m) in r.min_z.iter().enumerate() {
            if m.0 < -tol {
                v.push(format!("z{} reached {:.3e} at t = {:.3}", i + 1, m.0, m.1));
            }
        }
        if r.min_beta.0 < -tol {
            v.push(format!("beta reached {:.3e} at t = {:.3}", r.min_beta.0, r.min_beta.1));
        }
        for (i, m) in r.min_h.iter().enumerate() {
            if m.0 < -tol {
                v.push(format!("h{} reached {:.3e} at t = {:.3}", i + 1, m.0, m.1));
            }
        }
        if r.max_abs_y1 > self.divergence_factor * r.y1_initial.abs().max(1e-300) {
            r.diverged = true;
        }
        r.violations = v;
        self.report
    }
}
