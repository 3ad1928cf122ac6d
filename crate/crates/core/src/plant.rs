//! Finite-difference simulation of the ODE-PDE-ODE cascade.
//!
//! `z` travels rightward at speed `q1` with inflow `z(0) = p w(0)`, `w`
//! travels leftward at speed `q2` with inflow `w(1) = x1`. Both transport
//! equations use first-order upwinding with the in-domain couplings taken
//! explicitly. The distal state `Y` is driven by `w(0)`; the actuator chain
//! `X` is driven by the control input and by `z(1)` and its time derivatives.

use log::warn;
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::kernels::{fh_tables, FhKernel, KernelContext};
use crate::linalg;
use crate::params::{PlantParameters, SimGrid, Theta};
use crate::quad::{self, End};

/// Sampled PDE profiles plus the two ODE states at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub t: f64,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    pub x: Vec<f64>,
    pub y: DVector<f64>,
    /// Running time integrals of the stepper's registered integrands.
    pub acc: Vec<f64>,
}

impl PlantState {
    pub fn zeros(params: &PlantParameters, nx: usize) -> Self {
        Self {
            t: 0.0,
            z: vec![0.0; nx + 1],
            w: vec![0.0; nx + 1],
            x: vec![0.0; params.m()],
            y: DVector::zeros(params.n()),
            acc: vec![],
        }
    }

    /// Samples the profiles from functions on `[0, 1]`.
    pub fn from_fns(
        nx: usize,
        z: impl Fn(f64) -> f64,
        w: impl Fn(f64) -> f64,
        x: &[f64],
        y: &[f64],
    ) -> Self {
        let pts = quad::nodes(nx);
        Self {
            t: 0.0,
            z: pts.iter().map(|&s| z(s)).collect(),
            w: pts.iter().map(|&s| w(s)).collect(),
            x: x.to_vec(),
            y: DVector::from_column_slice(y),
            acc: vec![],
        }
    }

    pub fn nx(&self) -> usize {
        self.z.len() - 1
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.nx() as f64
    }

    /// `||w||^2 + ||z||^2 + |X|^2 + |Y|^2` with trapezoid spatial norms.
    pub fn norm2(&self) -> f64 {
        let h = self.dx();
        quad::trapezoid_product(&self.w, &self.w, h)
            + quad::trapezoid_product(&self.z, &self.z, h)
            + self.x.iter().map(|v| v * v).sum::<f64>()
            + self.y.norm_squared()
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().chain(&self.w).chain(&self.x).chain(self.y.iter()).all(|v| v.is_finite())
    }

    /// Overwrites `z(0)` and `w(1)` so the boundary relations hold; returns
    /// the largest change made.
    pub fn enforce_boundaries(&mut self, p: f64) -> f64 {
        let n = self.nx();
        let new_z0 = p * self.w[0];
        let change = (self.z[0] - new_z0).abs().max((self.w[n] - self.x[0]).abs());
        self.z[0] = new_z0;
        self.w[n] = self.x[0];
        change
    }
}

/// A time derivative at a boundary written as a polynomial in `d/dx`
/// applied to `z` and `w`: `sum_k zc[k] z^(k) + sum_k wc[k] w^(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateOperator {
    pub zc: Vec<f64>,
    pub wc: Vec<f64>,
}

impl RateOperator {
    fn identity_z() -> Self {
        Self { zc: vec![1.0], wc: vec![0.0] }
    }

    fn identity_w() -> Self {
        Self { zc: vec![0.0], wc: vec![1.0] }
    }

    /// One more time derivative, substituting both transport equations.
    fn advance(&self, q1: f64, q2: f64, th: &Theta) -> Self {
        let len = self.zc.len() + 1;
        let mut zc = vec![0.0; len];
        let mut wc = vec![0.0; len];
        for (k, (&a, &b)) in self.zc.iter().zip(&self.wc).enumerate() {
            zc[k + 1] -= q1 * a;
            wc[k] += th.d1 * a;
            wc[k + 1] += q2 * b;
            zc[k] += th.d2 * b;
        }
        Self { zc, wc }
    }

    /// Operator for the `order`-th time derivative of `z` (or `w`).
    pub fn for_field(q1: f64, q2: f64, th: &Theta, field_is_z: bool, order: usize) -> Self {
        let mut op = if field_is_z { Self::identity_z() } else { Self::identity_w() };
        for _ in 0..order {
            op = op.advance(q1, q2, th);
        }
        op
    }

    /// Node weights on `z` and on `w` at one end of a grid with `len` nodes.
    pub fn weights(&self, len: usize, h: f64, end: End) -> (Vec<(usize, f64)>, Vec<(usize, f64)>) {
        let collect = |coefs: &[f64]| {
            let mut out = Vec::new();
            for (k, &c) in coefs.iter().enumerate() {
                if c != 0.0 {
                    out.extend(quad::boundary_stencil(len, h, k, end).into_iter().map(|(i, s)| (i, c * s)));
                }
            }
            out
        };
        (collect(&self.zc), collect(&self.wc))
    }

    pub fn eval(&self, z: &[f64], w: &[f64], h: f64, end: End) -> f64 {
        let (wz, ww) = self.weights(z.len(), h, end);
        wz.iter().map(|&(i, c)| c * z[i]).sum::<f64>() + ww.iter().map(|&(i, c)| c * w[i]).sum::<f64>()
    }
}

/// Time derivatives of the boundary traces, all of the same order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryRates {
    pub z1: f64,
    pub z0: f64,
    pub w0: f64,
    pub w1: f64,
}

/// The `(j+1)`-th time derivatives of `z(1)`, `z(0)`, `w(0)`, `w(1)`,
/// obtained by substituting the transport equations `j+1` times and using
/// one-sided second-order differences at the ends. `j = 0` gives `z_t`.
pub fn boundary_time_derivatives(
    state: &PlantState,
    params: &PlantParameters,
    theta: &Theta,
    j: usize,
) -> Result<BoundaryRates> {
    if j + 1 > params.m() || j > 1 {
        return Err(Error::InvalidParameter(format!(
            "boundary derivative index {j} exceeds the actuator chain length {}",
            params.m()
        )));
    }
    let h = state.dx();
    let oz = RateOperator::for_field(params.q1, params.q2, theta, true, j + 1);
    let ow = RateOperator::for_field(params.q1, params.q2, theta, false, j + 1);
    Ok(BoundaryRates {
        z1: oz.eval(&state.z, &state.w, h, End::Right),
        z0: oz.eval(&state.z, &state.w, h, End::Left),
        w0: ow.eval(&state.z, &state.w, h, End::Left),
        w1: ow.eval(&state.z, &state.w, h, End::Right),
    })
}

/// `sum_k a_k z_k + sum_k b_k w_k + c . Y + d * dx1/dt` over the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForm {
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    pub y: DVector<f64>,
    pub x1_rate: f64,
}

impl LinearForm {
    pub fn zeros(nx: usize, n: usize) -> Self {
        Self { z: vec![0.0; nx + 1], w: vec![0.0; nx + 1], y: DVector::zeros(n), x1_rate: 0.0 }
    }

    pub fn add_stencil(target: &mut [f64], stencil: &[(usize, f64)], scale: f64) {
        for &(i, c) in stencil {
            target[i] += scale * c;
        }
    }

    pub fn eval(&self, state: &PlantState, x1_rate: f64) -> f64 {
        let mut acc = self.x1_rate * x1_rate + self.y.dot(&state.y);
        for k in 0..self.z.len() {
            acc += self.z[k] * state.z[k] + self.w[k] * state.w[k];
        }
        acc
    }

    pub fn scaled_add(&mut self, other: &LinearForm, s: f64) {
        for k in 0..self.z.len() {
            self.z[k] += s * other.z[k];
            self.w[k] += s * other.w[k];
        }
        self.y += &other.y * s;
        self.x1_rate += s * other.x1_rate;
    }
}

/// Time derivative of a linear form along the semi-discrete upwind dynamics
/// with couplings `theta`. The weight on `w(1) = x1` becomes the `dx1/dt`
/// coefficient, so the input form must not already carry one.
pub fn semi_discrete_rate(params: &PlantParameters, theta: &Theta, form: &LinearForm) -> Result<LinearForm> {
    if form.x1_rate != 0.0 {
        return Err(Error::InvalidParameter("cannot differentiate a form that already uses dx1/dt".into()));
    }
    let nx = form.z.len() - 1;
    let h = 1.0 / nx as f64;
    let (cz, cw) = (params.q1 / h, params.q2 / h);
    let a = &form.z;
    let b = &form.w;
    let mut out = LinearForm::zeros(nx, form.y.len());
    for k in 1..=nx {
        out.z[k] -= cz * a[k];
        out.z[k - 1] += cz * a[k];
        out.w[k] += theta.d1 * a[k];
    }
    for k in 0..nx {
        // z(0) = p w(0) moves the z(0) weight onto w(0).
        let bk = if k == 0 { b[0] + params.p * a[0] } else { b[k] };
        out.w[k + 1] += cw * bk;
        out.w[k] -= cw * bk;
        out.z[k] += theta.d2 * bk;
    }
    out.x1_rate = b[nx];
    out.y = params.a_matrix().transpose() * &form.y;
    out.w[0] += form.y.dot(&params.b_vector(theta.b));
    Ok(out)
}

/// Forms for `z(1)`, `d/dt z(1)`, ... up to order `m-1` along the
/// semi-discrete dynamics with couplings `theta`.
pub fn z1_rate_forms(params: &PlantParameters, theta: &Theta, nx: usize) -> Result<Vec<LinearForm>> {
    let mut f = LinearForm::zeros(nx, params.n());
    f.z[nx] = 1.0;
    let mut out = vec![f];
    for i in 1..params.m() {
        let next = semi_discrete_rate(params, theta, &out[i - 1])?;
        out.push(next);
    }
    Ok(out)
}

/// Right-hand side of the actuator chain given the `z(1)` signals.
pub fn actuator_rhs(params: &PlantParameters, x: &[f64], z1: &[f64], y: &DVector<f64>, u: f64) -> Vec<f64> {
    let m = params.m();
    let mut dx = vec![0.0; m];
    for j in 0..m {
        dx[j] = params.f[j].eval(x);
        if j + 1 < m {
            dx[j] += x[j + 1];
        }
    }
    let my: f64 = params.m_row.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    let qz: f64 = params.qbar.iter().zip(z1).map(|(a, b)| a * b).sum();
    dx[m - 1] += qz + my + u;
    dx
}

/// Row-sum bound of the open-loop actuator Jacobian, used to size substeps.
fn actuator_stiffness(params: &PlantParameters, x: &[f64]) -> f64 {
    let m = params.m();
    let mut rho: f64 = 0.0;
    for j in 0..m {
        let mut row = if j + 1 < m { 1.0 } else { 0.0 };
        for k in 0..m {
            row += params.f[j].partial(x, k).abs();
        }
        rho = rho.max(row);
    }
    rho
}

/// Time derivative of every evolving component of a [`PlantState`].
struct Rates {
    z: Vec<f64>,
    w: Vec<f64>,
    x: Vec<f64>,
    y: DVector<f64>,
    acc: Vec<f64>,
}

/// Method-of-lines stepper.
///
/// Interior nodes follow the upwind semi-discretization, the two ODEs their
/// own equations, and every registered integrand is accumulated as an extra
/// state. One classical Runge-Kutta step advances all of them together with
/// the input re-evaluated at each stage, and the boundary nodes are
/// re-imposed after every stage. Accumulated integrals therefore satisfy any
/// linear identity of the semi-discrete system to roundoff.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: PlantParameters,
    pub grid: SimGrid,
    z1_forms: Vec<LinearForm>,
    integrands: Vec<LinearForm>,
    step_index: usize,
}

/// Largest substep count per time step before the step is declared faulty.
const MAX_SUBSTEPS: usize = 10_000;

impl Plant {
    pub fn new(params: PlantParameters, grid: SimGrid) -> Result<Self> {
        params.check()?;
        grid.check(&params)?;
        let z1_forms = z1_rate_forms(&params, &params.theta, grid.nx)?;
        Ok(Self { params, grid, z1_forms, integrands: vec![], step_index: 0 })
    }

    /// Registers linear functionals whose running time integrals are kept in
    /// [`PlantState::acc`].
    pub fn set_integrands(&mut self, forms: Vec<LinearForm>) {
        self.integrands = forms;
    }

    pub fn integrands(&self) -> &[LinearForm] {
        &self.integrands
    }

    pub fn steps_taken(&self) -> usize {
        self.step_index
    }

    /// Sets compatible boundary samples at `t = 0` (warning when data change)
    /// and zeroes the accumulators.
    pub fn prepare(&self, state: &mut PlantState) -> Result<()> {
        if state.nx() != self.grid.nx {
            return Err(Error::InvalidParameter(format!(
                "state has {} cells, grid has {}",
                state.nx(),
                self.grid.nx
            )));
        }
        let change = state.enforce_boundaries(self.params.p);
        if change > 0.0 {
            warn!("initial data violate the boundary relations; overwrote boundary samples (max change {change:.3e})");
        }
        state.acc = vec![0.0; self.integrands.len()];
        Ok(())
    }

    /// `z(1)`, `d/dt z(1)`, ... as seen by the actuator chain.
    pub fn z1_signals(&self, state: &PlantState) -> Vec<f64> {
        self.z1_forms.iter().map(|f| f.eval(state, 0.0)).collect()
    }

    fn rates(&self, s: &PlantState, u: f64) -> Rates {
        let p = &self.params;
        let th = p.theta;
        let n = s.nx();
        let inv_h = n as f64;
        let mut z = vec![0.0; n + 1];
        let mut w = vec![0.0; n + 1];
        for j in 1..=n {
            z[j] = -p.q1 * inv_h * (s.z[j] - s.z[j - 1]) + th.d1 * s.w[j];
        }
        for j in 0..n {
            w[j] = p.q2 * inv_h * (s.w[j + 1] - s.w[j]) + th.d2 * s.z[j];
        }
        let mut y = p.a_matrix() * &s.y;
        y[p.n() - 1] += th.b * s.w[0];
        let x = actuator_rhs(p, &s.x, &self.z1_signals(s), &s.y, u);
        let acc = self.integrands.iter().map(|f| f.eval(s, 0.0)).collect();
        Rates { z, w, x, y, acc }
    }

    fn advance(&self, s: &PlantState, dt: f64, k: &Rates) -> PlantState {
        let axpy = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u + dt * v).collect::<Vec<_>>();
        let mut out = PlantState {
            t: s.t + dt,
            z: axpy(&s.z, &k.z),
            w: axpy(&s.w, &k.w),
            x: axpy(&s.x, &k.x),
            y: &s.y + &k.y * dt,
            acc: axpy(&s.acc, &k.acc),
        };
        out.enforce_boundaries(self.params.p);
        out
    }

    /// Advances one time step under a constant input.
    pub fn step(&mut self, state: &PlantState, u: f64) -> Result<PlantState> {
        self.step_with(state, |_| Ok(u)).map(|(s, _)| s)
    }

    /// Advances one time step with the input given as a feedback of the
    /// state, evaluated at every stage. Returns the new state and the input
    /// at the start of the step.
    pub fn step_with(
        &mut self,
        state: &PlantState,
        mut control: impl FnMut(&PlantState) -> Result<f64>,
    ) -> Result<(PlantState, f64)> {
        let dt = self.grid.dt;
        let rho = actuator_stiffness(&self.params, &state.x);
        let subs = ((dt * rho / 0.5).ceil() as usize).max(1);
        if subs > MAX_SUBSTEPS || !rho.is_finite() {
            self.step_index += 1;
            return Err(Error::NumericFault { step: self.step_index });
        }
        let h = dt / subs as f64;
        let mut s = state.clone();
        let mut u0 = None;
        for _ in 0..subs {
            let u1 = control(&s)?;
            u0.get_or_insert(u1);
            let k1 = self.rates(&s, u1);
            let s2 = self.advance(&s, 0.5 * h, &k1);
            let k2 = self.rates(&s2, control(&s2)?);
            let s3 = self.advance(&s, 0.5 * h, &k2);
            let k3 = self.rates(&s3, control(&s3)?);
            let s4 = self.advance(&s, h, &k3);
            let k4 = self.rates(&s4, control(&s4)?);
            let comb = |a: &[f64], b: &[f64], c: &[f64], d: &[f64]| {
                (0..a.len()).map(|i| (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i]) / 6.0).collect::<Vec<_>>()
            };
            let k = Rates {
                z: comb(&k1.z, &k2.z, &k3.z, &k4.z),
                w: comb(&k1.w, &k2.w, &k3.w, &k4.w),
                x: comb(&k1.x, &k2.x, &k3.x, &k4.x),
                y: (&k1.y + &k2.y * 2.0 + &k3.y * 2.0 + &k4.y) / 6.0,
                acc: comb(&k1.acc, &k2.acc, &k3.acc, &k4.acc),
            };
            s = self.advance(&s, h, &k);
        }
        s.t = state.t + dt;
        self.step_index += 1;
        if !s.is_finite() {
            return Err(Error::NumericFault { step: self.step_index });
        }
        Ok((s, u0.unwrap_or(0.0)))
    }
}

/// Free response of the distal ODE before any control reaches it, split as
/// `Y(t_k) = homogeneous[k] + b * forced[k]` on `t_k = x_k / q2`.
#[derive(Debug, Clone)]
pub struct FreeResponse {
    pub t: Vec<f64>,
    pub homogeneous: Vec<DVector<f64>>,
    pub forced: Vec<DVector<f64>>,
}

impl FreeResponse {
    pub fn y(&self, k: usize, b: f64) -> DVector<f64> {
        &self.homogeneous[k] + &self.forced[k] * b
    }

    pub fn last(&self, b: f64) -> DVector<f64> {
        self.y(self.t.len() - 1, b)
    }
}

/// Closed-form prediction of `Y` on `[0, horizon]`, `horizon <= 1/q2`,
/// using the couplings `(d1, d2)`; `b` enters linearly through [`FreeResponse::y`].
pub fn predict_y_free(params: &PlantParameters, state0: &PlantState, d1: f64, d2: f64, horizon: f64) -> Result<FreeResponse> {
    if horizon > 1.0 / params.q2 * (1.0 + 1e-12) || horizon < 0.0 {
        return Err(Error::InvalidParameter(format!("prediction horizon {horizon} exceeds 1/q2")));
    }
    let nx = state0.nx();
    let h = state0.dx();
    let kmax = ((horizon * params.q2 * nx as f64) + 1e-9).floor() as usize;
    let kernel = FhKernel::new(params.q1, params.q2, params.p, d1, d2);
    let (ft, ht) = fh_tables(&kernel, nx);
    // eta(x_j, 0) = w - int F z - int H w
    let eta: Vec<f64> = (0..=kmax)
        .map(|j| {
            let fz: Vec<f64> = (0..=j).map(|k| ft.get(j, k) * state0.z[k]).collect();
            let hw: Vec<f64> = (0..=j).map(|k| ht.get(j, k) * state0.w[k]).collect();
            state0.w[j] - quad::trapezoid(&fz, h) - quad::trapezoid(&hw, h)
        })
        .collect();
    let a = params.a_matrix();
    let e = linalg::expm(&(&a * (h / params.q2)));
    let unit_b = params.b_vector(1.0);
    let mut hom = Vec::with_capacity(kmax + 1);
    let mut forced = Vec::with_capacity(kmax + 1);
    let mut yh = state0.y.clone();
    let mut acc = DVector::zeros(params.n());
    hom.push(yh.clone());
    forced.push(acc.clone());
    let half = 0.5 * h / params.q2;
    for k in 1..=kmax {
        yh = &e * &yh;
        acc = &e * &acc + (&e * &unit_b * eta[k - 1] + &unit_b * eta[k]) * half;
        hom.push(yh.clone());
        forced.push(acc.clone());
    }
    let t = (0..=kmax).map(|k| k as f64 * h / params.q2).collect();
    Ok(FreeResponse { t, homogeneous: hom, forced })
}

/// Outcome of one assumption check.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Pass/fail per standing assumption for the given initial data.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Checks the structural, bound and initial-data assumptions.
pub fn validate(params: &PlantParameters, state0: &PlantState, grid: &SimGrid, kappas: &[f64]) -> Result<ValidationReport> {
    let mut checks = Vec::new();
    let structural = params.check();
    checks.push(AssumptionCheck {
        name: "nonlinearities",
        passed: params.f.iter().all(|f| f.vanishes_at_origin()),
        detail: "f_j(0) = 0 for all j".into(),
    });
    checks.push(AssumptionCheck {
        name: "parameter bounds",
        passed: structural.is_ok(),
        detail: match &structural {
            Ok(()) => "parameters inside the known box".into(),
            Err(e) => e.to_string(),
        },
    });
    let grid_ok = grid.check(params);
    checks.push(AssumptionCheck {
        name: "grid",
        passed: grid_ok.is_ok() && state0.nx() == grid.nx,
        detail: match grid_ok {
            Ok(()) if state0.nx() == grid.nx => format!("nx = {}, dt = {}", grid.nx, grid.dt),
            Ok(()) => format!("state has {} cells but grid has {}", state0.nx(), grid.nx),
            Err(e) => e.to_string(),
        },
    });
    if structural.is_err() {
        return Ok(ValidationReport { checks });
    }

    let y10 = state0.y[0];
    checks.push(AssumptionCheck {
        name: "initial output sign",
        passed: y10 >= 0.0,
        detail: format!("y1(0) = {y10:.6e}"),
    });

    let th = params.theta;
    let free = predict_y_free(params, state0, th.d1, th.d2, 1.0 / params.q2)?;
    let last = free.t.len() - 1;
    let mut worst = (f64::INFINITY, 0.0);
    for k in 1..last {
        let v = free.y(k, th.b)[0];
        if v < worst.0 {
            worst = (v, free.t[k] * params.q2);
        }
    }
    let end = free.last(th.b)[0];
    let ok = worst.0 >= 0.0 && end > 0.0;
    checks.push(AssumptionCheck {
        name: "uncontrolled output stays safe",
        passed: ok,
        detail: if worst.0 < 0.0 {
            format!("predicted y1 = {:.6e} < 0 at s = {:.4}", worst.0, worst.1)
        } else {
            format!("min predicted y1 on (0,1) = {:.6e}, y1(1/q2) = {end:.6e}", worst.0.min(end))
        },
    });

    let ctx = KernelContext::build(params, &th, kappas, state0.nx())?;
    let gamma0 = ctx.gamma(state0);
    let x10 = state0.x[0];
    checks.push(AssumptionCheck {
        name: "actuator initial value",
        passed: x10 > gamma0,
        detail: format!("x1(0) = {x10:.6e}, required > {gamma0:.6e}"),
    });
    Ok(ValidationReport { checks })
}

impl KernelContext {
    /// `int Psi(1,y) z + int Phi(1,y) w + lambda(1) Y`.
    pub fn gamma(&self, state: &PlantState) -> f64 {
        let h = state.dx();
        quad::trapezoid_product(&self.rows.psi, &state.z, h)
            + quad::trapezoid_product(&self.rows.phi, &state.w, h)
            + (&self.lambda1 * &state.y)[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{reference_parameters, Polynomial};
    use std::f64::consts::PI;

    fn benchmark_state(nx: usize) -> PlantState {
        PlantState::from_fns(nx, |x| 2.0 * (3.0 * PI * x).sin(), |x| (2.0 * PI * x).cos(), &[1.0, -1.0], &[5.0, 0.0])
    }

    #[test]
    fn zero_state_is_an_equilibrium() {
        let p = reference_parameters();
        let mut plant = Plant::new(p.clone(), SimGrid { nx: 50, dt: 1e-3 }).unwrap();
        let mut s = PlantState::zeros(&p, 50);
        for _ in 0..100 {
            s = plant.step(&s, 0.0).unwrap();
        }
        assert_eq!(s.norm2(), 0.0);
    }

    #[test]
    fn boundary_relations_hold_after_each_step() {
        let p = reference_parameters();
        let mut plant = Plant::new(p.clone(), SimGrid { nx: 40, dt: 1e-3 }).unwrap();
        let mut s = benchmark_state(40);
        plant.prepare(&mut s).unwrap();
        for _ in 0..50 {
            s = plant.step(&s, 0.3).unwrap();
            assert_eq!(s.z[0], p.p * s.w[0]);
            assert_eq!(s.w[40], s.x[0]);
        }
    }

    #[test]
    fn rates_of_constant_profiles() {
        let p = reference_parameters();
        let s = PlantState::from_fns(10, |_| 2.0, |_| 3.0, &[3.0, 0.0], &[0.0, 0.0]);
        let r = boundary_time_derivatives(&s, &p, &p.theta, 0).unwrap();
        assert!((r.z1 - p.theta.d1 * 3.0).abs() < 1e-12);
        assert!((r.w0 - p.theta.d2 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn rates_without_coupling() {
        let p = reference_parameters();
        let th = Theta::new(0.0, 0.0, 1.0);
        let nx = 400;
        let s = PlantState::from_fns(nx, |x| (PI * x).sin(), |_| 0.0, &[0.0, 0.0], &[0.0, 0.0]);
        let r = boundary_time_derivatives(&s, &p, &th, 0).unwrap();
        assert!((r.z1 - p.q1 * PI).abs() < 1e-3);
        let s = PlantState::from_fns(nx, |x| x * x * x - x, |_| 0.0, &[0.0, 0.0], &[0.0, 0.0]);
        let r = boundary_time_derivatives(&s, &p, &th, 1).unwrap();
        assert!((r.z1 - p.q1 * p.q1 * 6.0).abs() < 1e-2);
        assert!(boundary_time_derivatives(&s, &p, &th, 2).is_err());
    }

    #[test]
    fn free_prediction_without_inflow() {
        let p = reference_parameters();
        let s = PlantState::from_fns(50, |_| 0.0, |_| 0.0, &[0.0, 0.0], &[1.0, 2.0]);
        let fr = predict_y_free(&p, &s, 0.8, 1.0, 1.0).unwrap();
        let expect = linalg::expm(&p.a_matrix()) * &s.y;
        assert!((fr.last(1.0) - expect).amax() < 1e-12);
    }

    #[test]
    fn free_prediction_constant_inflow() {
        let mut p = reference_parameters();
        p.l = vec![0.0];
        p.m_row = vec![0.0];
        p.theta = Theta::new(0.0, 0.0, 1.3);
        p.theta_box.d1 = [0.0, 1.0];
        p.theta_box.d2 = [0.0, 1.0];
        let s = PlantState::from_fns(40, |_| 0.0, |_| 1.0, &[1.0, 0.0], &[0.5]);
        let fr = predict_y_free(&p, &s, 0.0, 0.0, 1.0).unwrap();
        assert!((fr.last(1.3)[0] - (0.5 + 1.3 / p.q2)).abs() < 1e-12);
    }

    #[test]
    fn benchmark_initial_data_pass_validation() {
        let p = reference_parameters();
        let grid = SimGrid { nx: 200, dt: 1e-3 };
        let mut s = benchmark_state(200);
        Plant::new(p.clone(), grid).unwrap().prepare(&mut s).unwrap();
        let rep = validate(&p, &s, &grid, &[30.0, 10.0]).unwrap();
        assert!(rep.all_passed(), "{:?}", rep.failed());
        let mut bad = s.clone();
        bad.y[0] = -1.0;
        let rep = validate(&p, &bad, &grid, &[30.0, 10.0]).unwrap();
        assert!(rep.failed().iter().any(|c| c.name == "initial output sign"));
        let zero = PlantState::zeros(&p, 200);
        let rep = validate(&p, &zero, &grid, &[30.0, 10.0]).unwrap();
        assert!(rep.failed().iter().any(|c| c.name == "actuator initial value"));
    }

    #[test]
    fn pure_transport_translates_profiles() {
        let mut p = reference_parameters();
        p.theta = Theta::new(0.0, 0.0, 1.0);
        p.theta_box.d1 = [0.0, 1.0];
        p.theta_box.d2 = [0.0, 1.0];
        p.f = vec![Polynomial::zero(), Polynomial::zero()];
        p.qbar = vec![0.0, 0.0];
        p.m_row = vec![0.0, 0.0];
        p.p = 1.0;
        let bump = |x: f64| if (0.1..0.4).contains(&x) { (PI * (x - 0.1) / 0.3).sin().powi(2) } else { 0.0 };
        let err_at = |nx: usize| {
            let k = nx / 4;
            let mut plant = Plant::new(p.clone(), SimGrid { nx, dt: 0.5 / nx as f64 }).unwrap();
            let mut s = PlantState::from_fns(nx, bump, |_| 0.0, &[0.0, 0.0], &[0.0, 0.0]);
            for _ in 0..2 * k {
                s = plant.step(&s, 0.0).unwrap();
            }
            quad::nodes(nx).iter().zip(&s.z).map(|(&x, &v)| (v - bump(x - 0.25)).abs()).fold(0.0, f64::max)
        };
        let (coarse, fine) = (err_at(200), err_at(400));
        assert!(coarse < 0.2, "error {coarse}");
        let order = (coarse / fine).log2();
        assert!((0.8..1.3).contains(&order), "observed order {order}");
    }

    #[test]
    fn open_loop_output_grows() {
        let p = reference_parameters();
        let nx = 100;
        let mut plant = Plant::new(p.clone(), SimGrid { nx, dt: 1e-2 }).unwrap();
        let mut s = benchmark_state(nx);
        plant.prepare(&mut s).unwrap();
        let y0 = s.y[0].abs();
        let mut peak: f64 = 0.0;
        for _ in 0..200 {
            match plant.step(&s, 0.0) {
                Ok(n) => s = n,
                Err(Error::NumericFault { .. }) => {
                    peak = f64::INFINITY;
                    break;
                }
                Err(e) => panic!("{e}"),
            }
            peak = peak.max(s.y[0].abs());
        }
        assert!(peak > 10.0 * y0, "peak {peak}");
    }
}
