//! Nominal output-positive control law.
//!
//! Every `Γ^{(i)}` is linear in the sampled profiles, the distal state and
//! the actuator rate `dx1/dt` (which equals `w_t(1)`), so a context stores
//! one [`LinearForm`] per derivative order. The control input then follows
//! from the actuator states and those values through the `τ` chain.

use nalgebra::{DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{g_chain, target_row, KernelContext};
use crate::params::{PlantParameters, Theta};
pub use crate::plant::LinearForm;
use crate::plant::{semi_discrete_rate, z1_rate_forms, FreeResponse, PlantState, RateOperator};
use crate::quad::{self, End};

/// Design constants of the backstepping chain and the filter rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainConfig {
    pub kappas: Vec<f64>,
    pub cs: Vec<f64>,
    pub cbar: f64,
}

impl GainConfig {
    /// Gains of the benchmark scenario.
    pub fn reference() -> Self {
        Self { kappas: vec![30.0, 10.0], cs: vec![38.0, 20.0], cbar: 20.0 }
    }

    pub fn c_last(&self) -> f64 {
        *self.cs.last().expect("at least one c")
    }

    /// Checks sizes, signs and the supplied thresholds.
    pub fn check(&self, params: &PlantParameters, kappa_thresholds: &[f64], c_thresholds: &[f64]) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.kappas.len() != params.n() {
            return bad(format!("need {} kappas, got {}", params.n(), self.kappas.len()));
        }
        if self.cs.len() != params.m() {
            return bad(format!("need {} c gains, got {}", params.m(), self.cs.len()));
        }
        if let Some(k) = self.kappas.iter().position(|&k| !(k > 0.0)) {
            return bad(format!("kappa_{} must be positive", k + 1));
        }
        for (i, (&k, &thr)) in self.kappas.iter().zip(kappa_thresholds).enumerate() {
            if !(k > thr) {
                return bad(format!("kappa_{} = {k} must exceed its threshold {thr:.6}", i + 1));
            }
        }
        let m = params.m();
        for i in 0..m - 1 {
            let thr = c_thresholds.get(i).copied().unwrap_or(f64::NEG_INFINITY).max(2.0);
            if !(self.cs[i] > thr) {
                return bad(format!("c_{} = {} must exceed {thr:.6}", i + 1, self.cs[i]));
            }
        }
        if !(self.c_last() > 1.0) {
            return bad(format!("c_{m} must exceed 1"));
        }
        if !(self.cbar >= self.c_last()) {
            return bad(format!("cbar = {} must be at least c_{m} = {}", self.cbar, self.c_last()));
        }
        Ok(())
    }
}

/// `R_0..R_m` and `P_0..P_m` on the simulation grid.
#[derive(Debug, Clone)]
pub struct RpTables {
    pub r: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
}

impl RpTables {
    /// Closed forms in terms of the `Ψ(1,·)`, `Φ(1,·)` traces (orders up to 2).
    pub fn closed_form(params: &PlantParameters, theta: &Theta, ctx: &KernelContext, m: usize) -> Self {
        let rows = &ctx.rows;
        let (q1, q2, d1, d2) = (params.q1, params.q2, theta.d1, theta.d2);
        let comb = |terms: &[(f64, &Vec<f64>)]| {
            (0..rows.psi.len()).map(|k| terms.iter().map(|(c, v)| c * v[k]).sum()).collect::<Vec<f64>>()
        };
        let mut r = vec![rows.psi.clone()];
        let mut p = vec![rows.phi.clone()];
        if m >= 1 {
            r.push(comb(&[(q1, &rows.psi_y), (d2, &rows.phi)]));
            p.push(comb(&[(-q2, &rows.phi_y), (d1, &rows.psi)]));
        }
        if m >= 2 {
            r.push(comb(&[(q1 * q1, &rows.psi_yy), ((q1 - q2) * d2, &rows.phi_y), (d1 * d2, &rows.psi)]));
            p.push(comb(&[(q2 * q2, &rows.phi_yy), ((q1 - q2) * d1, &rows.psi_y), (d1 * d2, &rows.phi)]));
        }
        Self { r, p }
    }

    /// The recursion `R_i = q1 R'_{i-1} + d2 P_{i-1}`, `P_i = -q2 P'_{i-1} + d1 R_{i-1}`
    /// with numerical differentiation of the previous pair.
    pub fn recursion(params: &PlantParameters, theta: &Theta, psi: &[f64], phi: &[f64], m: usize) -> Self {
        let h = 1.0 / (psi.len() - 1) as f64;
        let mut r = vec![psi.to_vec()];
        let mut p = vec![phi.to_vec()];
        for i in 1..=m {
            let (dr, _) = quad::derivatives4(&r[i - 1], h);
            let (dp, _) = quad::derivatives4(&p[i - 1], h);
            let ri = (0..psi.len()).map(|k| params.q1 * dr[k] + theta.d2 * p[i - 1][k]).collect();
            let pi = (0..psi.len()).map(|k| -params.q2 * dp[k] + theta.d1 * r[i - 1][k]).collect();
            r.push(ri);
            p.push(pi);
        }
        Self { r, p }
    }
}

/// Everything the control law needs for one parameter triple on one grid.
#[derive(Debug, Clone)]
pub struct ControllerContext {
    pub kernel: KernelContext,
    pub tables: RpTables,
    /// `λ(1) A^i`, `i = 0..=m`.
    pub lambda_a: Vec<RowDVector<f64>>,
    /// `Γ, Γ', ..., Γ^{(m)}`.
    pub gamma_forms: Vec<LinearForm>,
    /// `z(1)`, `z_t(1)`, ... up to order `m-1`.
    pub z1_forms: Vec<LinearForm>,
    pub gains: GainConfig,
    /// Form of the whole input minus its actuator-only part, for both rates.
    u_form: LinearForm,
    u_star_form: LinearForm,
}

/// The control input together with the chain it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlEval {
    pub u: f64,
    /// `Γ, ..., Γ^{(m)}`.
    pub gammas: Vec<f64>,
    /// `h_1..h_m`.
    pub h: Vec<f64>,
}

impl ControllerContext {
    pub fn build(params: &PlantParameters, theta: &Theta, gains: &GainConfig, nx: usize) -> Result<Self> {
        let kernel = KernelContext::build(params, theta, &gains.kappas, nx)?;
        Self::from_kernel(params, kernel, gains)
    }

    pub fn from_kernel(params: &PlantParameters, kernel: KernelContext, gains: &GainConfig) -> Result<Self> {
        Self::with_scheme(params, kernel, gains, GammaScheme::Discrete)
    }

    pub fn with_scheme(params: &PlantParameters, kernel: KernelContext, gains: &GainConfig, scheme: GammaScheme) -> Result<Self> {
        let m = params.m();
        let n = params.n();
        let nx = kernel.rows.n;
        let theta = kernel.theta;
        let tables = RpTables::closed_form(params, &theta, &kernel, m);
        let a = params.a_matrix();
        let mut lambda_a = vec![kernel.lambda1.clone()];
        for i in 1..=m {
            let next = &lambda_a[i - 1] * &a;
            lambda_a.push(next);
        }
        let h = 1.0 / nx as f64;
        let len = nx + 1;
        let z_op = |order: usize| RateOperator::for_field(params.q1, params.q2, &theta, true, order);
        let gamma_forms = match scheme {
            GammaScheme::Formula => formula_gamma_forms(params, &theta, &tables, &lambda_a, nx)?,
            GammaScheme::Discrete => discrete_gamma_forms(params, &theta, &tables, &lambda_a, nx, m)?,
        };

        let z1_forms = match scheme {
            GammaScheme::Discrete => z1_rate_forms(params, &theta, nx)?,
            GammaScheme::Formula => (0..m)
                .map(|order| {
                    let mut f = LinearForm::zeros(nx, n);
                    let (sz, sw) = z_op(order).weights(len, h, End::Right);
                    LinearForm::add_stencil(&mut f.z, &sz, 1.0);
                    LinearForm::add_stencil(&mut f.w, &sw, 1.0);
                    f
                })
                .collect(),
        };

        let mut ctx = Self {
            kernel,
            tables,
            lambda_a,
            gamma_forms,
            z1_forms,
            gains: gains.clone(),
            u_form: LinearForm::zeros(nx, n),
            u_star_form: LinearForm::zeros(nx, n),
        };
        ctx.u_form = ctx.input_form(params, gains.c_last());
        ctx.u_star_form = ctx.input_form(params, gains.cbar);
        Ok(ctx)
    }

    pub fn theta(&self) -> Theta {
        self.kernel.theta
    }

    /// The part of the input that is linear in profiles, `Y` and `dx1/dt`.
    ///
    /// With the actuator states fixed, the input is affine in
    /// `Γ, ..., Γ^{(m)}` with coefficients set by the gains, so those
    /// forms collapse into one.
    fn input_form(&self, params: &PlantParameters, c_last: f64) -> LinearForm {
        let cs = &self.gains.cs;
        let n = params.n();
        let nx = self.kernel.rows.n;
        let mut f = LinearForm::zeros(nx, n);
        match params.m() {
            1 => {
                // U = -c1 (x1 - Γ) - f1 - q0 z(1) - M.Y + Γ'
                f.scaled_add(&self.gamma_forms[0], c_last);
                f.scaled_add(&self.gamma_forms[1], 1.0);
            }
            _ => {
                // h2 = x2 + c1 (x1 - Γ) + f1 - Γ', U = -c_last h2 + ... + c1 Γ' + Γ''
                let c1 = cs[0];
                f.scaled_add(&self.gamma_forms[0], c_last * c1);
                f.scaled_add(&self.gamma_forms[1], c_last + c1);
                f.scaled_add(&self.gamma_forms[2], 1.0);
            }
        }
        for (i, q) in params.qbar.iter().enumerate() {
            f.scaled_add(&self.z1_forms[i], -q);
        }
        for (k, m) in params.m_row.iter().enumerate() {
            f.y[k] -= m;
        }
        f
    }

    /// `Γ, ..., Γ^{(order)}` at the given state.
    pub fn gamma_derivs(&self, state: &PlantState, params: &PlantParameters, order: usize) -> Result<Vec<f64>> {
        if order > params.m() {
            return Err(Error::InvalidParameter(format!("Γ derivative order {order} exceeds m = {}", params.m())));
        }
        let rate = x1_rate(params, &state.x);
        Ok(self.gamma_forms[..=order].iter().map(|f| f.eval(state, rate)).collect())
    }

    /// Actuator-only part of the input for rate `c_last`.
    fn actuator_part(&self, params: &PlantParameters, x: &[f64], c_last: f64) -> f64 {
        let cs = &self.gains.cs;
        let f1 = params.f[0].eval(x);
        match params.m() {
            1 => -c_last * x[0] - f1,
            _ => {
                let c1 = cs[0];
                let f2 = params.f[1].eval(x);
                let df1 = params.f[0].partial(x, 0);
                -c_last * (x[1] + c1 * x[0] + f1) - f2 + (-c1 - df1) * (x[1] + f1)
            }
        }
    }

    /// The input `U` (`c_last = c_m`) or `U*` (`c_last = cbar`) by the
    /// collapsed form.
    pub fn input(&self, state: &PlantState, params: &PlantParameters, use_cbar: bool) -> f64 {
        let (form, c_last) = if use_cbar {
            (&self.u_star_form, self.gains.cbar)
        } else {
            (&self.u_form, self.gains.c_last())
        };
        self.actuator_part(params, &state.x, c_last) + form.eval(state, x1_rate(params, &state.x))
    }

    /// The input by the explicit `τ` chain, returning the intermediate values.
    pub fn control(&self, state: &PlantState, params: &PlantParameters, c_last: f64) -> Result<ControlEval> {
        let m = params.m();
        let x = &state.x;
        let g = self.gamma_derivs(state, params, m)?;
        let cs = &self.gains.cs;
        let zr: Vec<f64> = self.z1_forms.iter().map(|f| f.eval(state, 0.0)).collect();
        let qz: f64 = params.qbar.iter().zip(&zr).map(|(a, b)| a * b).sum();
        let my: f64 = params.m_row.iter().zip(state.y.iter()).map(|(a, b)| a * b).sum();
        let f1 = params.f[0].eval(x);
        let h1 = x[0] - g[0];
        let (tau_m, h) = if m == 1 {
            (-c_last * h1 - f1, vec![h1])
        } else {
            let tau1 = -cs[0] * h1 - f1;
            let h2 = x[1] - tau1 - g[1];
            let df1 = params.f[0].partial(x, 0);
            let f2 = params.f[1].eval(x);
            let tau2 = -c_last * h2 - f2 + (-cs[0] - df1) * (x[1] + f1) + cs[0] * g[1];
            (tau2, vec![h1, h2])
        };
        let u = tau_m - qz - my + g[m];
        if !u.is_finite() {
            return Err(Error::Domain(format!("control input is not finite (Γ = {g:?}, h = {h:?})")));
        }
        Ok(ControlEval { u, gammas: g, h })
    }

    /// The last chain state `h_m` for this parameter triple.
    pub fn h_last(&self, state: &PlantState, params: &PlantParameters) -> Result<f64> {
        Ok(*self.control(state, params, self.gains.c_last())?.h.last().unwrap())
    }
}

/// How the time derivatives of `Γ` are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaScheme {
    /// Exact time derivatives of the sampled `Γ` along the upwind semi-discretization.
    #[default]
    Discrete,
    /// The continuous expressions with boundary terms from one-sided stencils.
    Formula,
}

/// `Γ^{(i)}` from the continuous expressions: integrals of `R_i`, `P_i` plus
/// boundary time derivatives evaluated with one-sided stencils.
fn formula_gamma_forms(
    params: &PlantParameters,
    theta: &Theta,
    tables: &RpTables,
    lambda_a: &[RowDVector<f64>],
    nx: usize,
) -> Result<Vec<LinearForm>> {
    let n = params.n();
    let h = 1.0 / nx as f64;
    let len = nx + 1;
    let bvec = params.b_vector(theta.b);
    let trap: Vec<f64> = (0..len).map(|k| if k == 0 || k == nx { 0.5 * h } else { h }).collect();
    let z_op = |order: usize| RateOperator::for_field(params.q1, params.q2, theta, true, order);
    let w_op = |order: usize| RateOperator::for_field(params.q1, params.q2, theta, false, order);
    let mut forms = Vec::with_capacity(lambda_a.len());
    for i in 0..lambda_a.len() {
        let mut f = LinearForm::zeros(nx, n);
        for k in 0..len {
            f.z[k] = trap[k] * tables.r[i][k];
            f.w[k] = trap[k] * tables.p[i][k];
        }
        f.y = lambda_a[i].transpose();
        for j in 0..i {
            let k = i - 1 - j;
            let r_k = &tables.r[k];
            let p_k = &tables.p[k];
            let c_z1 = -params.q1 * r_k[nx];
            let c_z0 = params.q1 * r_k[0];
            let c_w1 = params.q2 * p_k[nx];
            let lab = (&lambda_a[k] * &bvec)[0];
            let c_w0 = -(params.q2 * p_k[0] - lab);
            if j == 0 {
                f.z[nx] += c_z1;
                f.z[0] += c_z0;
                f.w[nx] += c_w1;
                f.w[0] += c_w0;
            } else if j == 1 {
                let (sz, sw) = z_op(j).weights(len, h, End::Right);
                LinearForm::add_stencil(&mut f.z, &sz, c_z1);
                LinearForm::add_stencil(&mut f.w, &sw, c_z1);
                // z^{(j)}(0) = p w^{(j)}(0) and w^{(j)}(0) share one operator.
                let (sz, sw) = w_op(j).weights(len, h, End::Left);
                let c0 = c_w0 + params.p * c_z0;
                LinearForm::add_stencil(&mut f.z, &sz, c0);
                LinearForm::add_stencil(&mut f.w, &sw, c0);
                f.x1_rate += c_w1;
            } else {
                return Err(Error::InvalidParameter("actuator chains longer than 2 are not supported".into()));
            }
        }
        forms.push(f);
    }
    Ok(forms)
}

/// `Γ` by quadrature that leaves the node `w(1) = x1` out, then each further
/// derivative by applying the semi-discrete upwind dynamics to the previous
/// form. The weight a form puts on `w(1)` becomes the coefficient of
/// `dx1/dt` in the next one.
fn discrete_gamma_forms(
    params: &PlantParameters,
    theta: &Theta,
    tables: &RpTables,
    lambda_a: &[RowDVector<f64>],
    nx: usize,
    m: usize,
) -> Result<Vec<LinearForm>> {
    let h = 1.0 / nx as f64;
    let mut f = LinearForm::zeros(nx, params.n());
    for k in 0..=nx {
        f.z[k] = if k == 0 || k == nx { 0.5 * h } else { h } * tables.r[0][k];
    }
    for k in 0..nx {
        f.w[k] = if k == 0 { 0.5 * h } else { h } * tables.p[0][k];
    }
    // w(1) sits in the last interval with its neighbour's value.
    f.w[nx - 1] += 0.5 * h * tables.p[0][nx];
    f.y = lambda_a[0].transpose();
    let mut forms = vec![f];
    for i in 1..=m {
        let next = semi_discrete_rate(params, theta, &forms[i - 1])?;
        forms.push(next);
    }
    Ok(forms)
}

/// `dx1/dt = x2 + f1(x1)` (or `f1 + u` for `m = 1`, where it is never needed).
pub fn x1_rate(params: &PlantParameters, x: &[f64]) -> f64 {
    params.f[0].eval(x) + x.get(1).copied().unwrap_or(0.0)
}

/// Lower bounds on `κ_1..κ_{n-1}` making every distal target coordinate
/// positive when the control first reaches the distal ODE.
pub fn kappa_thresholds(y_arrival: &DVector<f64>, kappas: &[f64]) -> Result<Vec<f64>> {
    let n = y_arrival.len();
    let chain = g_chain(kappas);
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    for i in 1..n {
        let den = target_row(&chain, i).dot(y_arrival);
        if !(den > 0.0) {
            return Err(Error::DegenerateThreshold { index: i });
        }
        let prev = &chain[i - 1];
        let mut num_row = DVector::zeros(n);
        for j in 0..n - 1 {
            num_row[j + 1] += prev[j];
        }
        num_row[i] -= 1.0;
        out.push(num_row.dot(y_arrival) / den);
    }
    Ok(out)
}

/// Componentwise maximum of [`kappa_thresholds`] over free responses and `b` samples.
pub fn kappa_thresholds_over(responses: &[FreeResponse], bs: &[f64], kappas: &[f64]) -> Result<Vec<f64>> {
    let mut worst: Option<Vec<f64>> = None;
    for fr in responses {
        for &b in bs {
            let thr = kappa_thresholds(&fr.last(b), kappas)?;
            worst = Some(match worst {
                None => thr,
                Some(w) => w.iter().zip(&thr).map(|(a, b)| a.max(*b)).collect(),
            });
        }
    }
    worst.ok_or_else(|| Error::InvalidParameter("no free responses supplied".into()))
}

/// `n` evenly spaced samples of `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || hi == lo {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Lower bounds on `c_1..c_{m-1}` making `h_2(0), ..., h_m(0)` positive,
/// maximized over the supplied contexts.
pub fn c_thresholds(params: &PlantParameters, state0: &PlantState, contexts: &[&ControllerContext]) -> Result<Vec<f64>> {
    if params.m() == 1 {
        return Ok(vec![]);
    }
    let x = &state0.x;
    let mut worst = f64::NEG_INFINITY;
    for ctx in contexts {
        let g = ctx.gamma_derivs(state0, params, 1)?;
        let h1 = x[0] - g[0];
        if !(h1 > 0.0) {
            return Err(Error::DegenerateThreshold { index: 1 });
        }
        let num = -x[1] - params.f[0].eval(x) + g[1];
        worst = worst.max(num / h1);
    }
    Ok(vec![worst])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::reference_parameters;
    use crate::plant::{boundary_time_derivatives, Plant};
    use crate::params::SimGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn benchmark_state(nx: usize) -> PlantState {
        let mut s = PlantState::from_fns(nx, |x| 2.0 * (3.0 * PI * x).sin(), |x| (2.0 * PI * x).cos(), &[1.0, -1.0], &[5.0, 0.0]);
        s.enforce_boundaries(1.0);
        s
    }

    fn random_state(rng: &mut ChaCha8Rng, nx: usize) -> PlantState {
        let a: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let mut s = PlantState::from_fns(
            nx,
            |x| a[0] * (PI * x).sin() + a[1] * x * x,
            |x| a[2] * (2.0 * x).cos() + a[3] * x,
            &[a[4], a[5]],
            &[rng.gen_range(0.0..3.0), rng.gen_range(-1.0..1.0)],
        );
        s.enforce_boundaries(1.0);
        s
    }

    #[test]
    fn zero_state_gives_zero_input() {
        let p = reference_parameters();
        let ctx = ControllerContext::build(&p, &p.theta, &GainConfig::reference(), 50).unwrap();
        let s = PlantState::zeros(&p, 50);
        let ev = ctx.control(&s, &p, 20.0).unwrap();
        assert_eq!(ev.u, 0.0);
        assert!(ev.gammas.iter().all(|&g| g == 0.0));
        assert_eq!(ctx.input(&s, &p, true), 0.0);
    }

    #[test]
    fn gamma_of_distal_unit_vector() {
        let p = reference_parameters();
        let ctx = ControllerContext::build(&p, &p.theta, &GainConfig::reference(), 50).unwrap();
        let mut s = PlantState::zeros(&p, 50);
        s.y[0] = 1.0;
        let g = ctx.gamma_derivs(&s, &p, 0).unwrap();
        assert!((g[0] - ctx.kernel.lambda1[0]).abs() < 1e-14);
        assert!(ctx.gamma_derivs(&s, &p, 3).is_err());
    }

    #[test]
    fn uncoupled_tables_are_plain_derivatives() {
        let mut p = reference_parameters();
        p.theta_box.d1 = [0.0, 1.2];
        p.theta_box.d2 = [0.0, 1.2];
        let th = Theta::new(0.0, 0.0, 1.0);
        let ctx = ControllerContext::build(&p, &th, &GainConfig::reference(), 40).unwrap();
        let rows = &ctx.kernel.rows;
        for k in 0..=40 {
            assert_eq!(ctx.tables.r[1][k], p.q1 * rows.psi_y[k]);
            assert_eq!(ctx.tables.p[1][k], -p.q2 * rows.phi_y[k]);
        }
    }

    #[test]
    fn closed_forms_match_recursion() {
        let p = reference_parameters();
        let gains = GainConfig::reference();
        let rows = crate::kernels::KernelRows::build(&p, p.theta.d1, p.theta.d2, &gains.kappas, 800).unwrap();
        let kctx = KernelContext::from_rows(&p, &p.theta, &gains.kappas, rows.clone()).unwrap();
        let closed = RpTables::closed_form(&p, &p.theta, &kctx, 2);
        let rec = RpTables::recursion(&p, &p.theta, &rows.psi, &rows.phi, 2);
        for i in 0..=2 {
            let scale = closed.r[i].iter().chain(&closed.p[i]).fold(0.0f64, |a, v| a.max(v.abs()));
            let err = (0..=800)
                .map(|k| (closed.r[i][k] - rec.r[i][k]).abs().max((closed.p[i][k] - rec.p[i][k]).abs()))
                .fold(0.0, f64::max);
            assert!(err <= 1e-4 * scale.max(1.0), "order {i}: {err} vs scale {scale}");
        }
        // The printed first-order form.
        for k in 0..=800 {
            let r1 = p.q1 * rows.psi_y[k] + p.theta.d2 * rows.phi[k];
            assert!((closed.r[1][k] - r1).abs() <= 1e-12 * r1.abs().max(1.0));
        }
    }

    /// The printed explicit controller for two actuator states, with the
    /// `-f1'(x1)(x2 + f1)` term it leaves out added back.
    fn explicit_u(ctx: &ControllerContext, p: &PlantParameters, s: &PlantState) -> f64 {
        let (c1, c2) = (ctx.gains.cs[0], ctx.gains.cs[1]);
        let nx = s.nx();
        let h = s.dx();
        let (x1, x2) = (s.x[0], s.x[1]);
        let t = &ctx.tables;
        let lam = &ctx.kernel.lambda1;
        let a = p.a_matrix();
        let b = p.b_vector(ctx.theta().b);
        let lb = (lam * &b)[0];
        let lab = (lam * &a * &b)[0];
        let th = ctx.theta();
        let rz: Vec<f64> = (0..=nx).map(|k| c2 * c1 * t.r[0][k] + (c1 + c2) * t.r[1][k] + t.r[2][k]).collect();
        let pw: Vec<f64> = (0..=nx).map(|k| c2 * c1 * t.p[0][k] + (c1 + c2) * t.p[1][k] + t.p[2][k]).collect();
        let rates = boundary_time_derivatives(s, p, &th, 0).unwrap();
        let w_t1 = x2 + x1 * x1;
        let z_t0 = p.p * rates.w0;
        let ymat = lam * (&a * (c1 + c2) + nalgebra::DMatrix::identity(2, 2) * (c2 * c1) + &a * &a);
        let mut u = -c2 * x2 - c2 * c1 * x1 - c2 * x1 * x1 - x1 * x2 - c1 * (x2 + x1 * x1)
            + quad::trapezoid_product(&rz, &s.z, h)
            + quad::trapezoid_product(&pw, &s.w, h)
            - ((c1 + c2) * p.q1 * t.r[0][nx] + p.qbar[0] + p.q1 * t.r[1][nx]) * s.z[nx]
            + ((c1 + c2) * p.q1 * t.r[0][0] + p.q1 * t.r[1][0]) * s.z[0]
            + ((c1 + c2) * p.q2 * t.p[0][nx] + p.q2 * t.p[1][nx]) * s.w[nx]
            - ((c1 + c2) * (p.q2 * t.p[0][0] - lb) + p.q2 * t.p[1][0] - lab) * s.w[0]
            + (ymat * &s.y)[0]
            - p.m_row[0] * s.y[0]
            - p.m_row[1] * s.y[1]
            - (p.q1 * t.r[0][nx] + p.qbar[1]) * rates.z1
            + p.q1 * t.r[0][0] * z_t0
            + p.q2 * t.p[0][nx] * w_t1
            - (p.q2 * t.p[0][0] - lb) * rates.w0;
        u += -2.0 * x1 * (x2 + x1 * x1);
        u
    }

    #[test]
    fn chain_matches_explicit_form() {
        let p = reference_parameters();
        let gains = GainConfig::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for th in [p.theta, Theta::new(0.4, 1.2, 0.5)] {
            let kernel = KernelContext::build(&p, &th, &gains.kappas, 60).unwrap();
            let ctx = ControllerContext::with_scheme(&p, kernel, &gains, GammaScheme::Formula).unwrap();
            for _ in 0..20 {
                let s = random_state(&mut rng, 60);
                let chain = ctx.control(&s, &p, 20.0).unwrap().u;
                let oracle = explicit_u(&ctx, &p, &s);
                let collapsed = ctx.input(&s, &p, false);
                let tol = 1e-9 * oracle.abs().max(1.0);
                assert!((chain - oracle).abs() <= tol, "{chain} vs {oracle}");
                assert!((collapsed - oracle).abs() <= tol, "{collapsed} vs {oracle}");
            }
        }
    }

    #[test]
    fn filter_rate_equal_to_last_gain_reproduces_input() {
        let p = reference_parameters();
        let ctx = ControllerContext::build(&p, &p.theta, &GainConfig::reference(), 40).unwrap();
        let s = benchmark_state(40);
        assert_eq!(ctx.input(&s, &p, true), ctx.input(&s, &p, false));
        let mut g = GainConfig::reference();
        g.cbar = 25.0;
        let ctx2 = ControllerContext::build(&p, &p.theta, &g, 40).unwrap();
        let h2 = ctx2.h_last(&s, &p).unwrap();
        let diff = ctx2.input(&s, &p, true) - ctx2.input(&s, &p, false);
        assert!((diff - (20.0 - 25.0) * h2).abs() <= 1e-9 * diff.abs().max(1.0));
        assert!((ctx2.control(&s, &p, 25.0).unwrap().u - ctx2.input(&s, &p, true)).abs() <= 1e-9 * diff.abs().max(1.0));
    }

    #[test]
    fn kappa_threshold_examples() {
        assert!(kappa_thresholds(&DVector::from_vec(vec![2.0]), &[1.0]).unwrap().is_empty());
        // z2 = y2 + kappa1 y1 > 0  <=>  kappa1 > -y2 / y1
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let thr = kappa_thresholds(&y, &[30.0, 10.0]).unwrap();
        assert_eq!(thr, vec![0.0]);
        let y = DVector::from_vec(vec![2.0, -3.0]);
        let thr = kappa_thresholds(&y, &[30.0, 10.0]).unwrap();
        assert!((thr[0] - 1.5).abs() < 1e-15);
        for k in [1.4, 1.6] {
            let z2 = target_row(&g_chain(&[k, 10.0]), 2).dot(&y);
            assert_eq!(z2 > 0.0, k > thr[0]);
        }
        assert!(matches!(
            kappa_thresholds(&DVector::from_vec(vec![0.0, 1.0]), &[1.0, 1.0]),
            Err(Error::DegenerateThreshold { index: 1 })
        ));
    }

    #[test]
    fn c_threshold_sign_condition() {
        let mut p = reference_parameters();
        p.f[0] = crate::params::Polynomial::zero();
        let gains = GainConfig::reference();
        let ctx = ControllerContext::build(&p, &p.theta, &gains, 40).unwrap();
        let mut s = PlantState::zeros(&p, 40);
        s.x = vec![2.0, -5.0];
        s.enforce_boundaries(p.p);
        let g = ctx.gamma_derivs(&s, &p, 1).unwrap();
        let thr = c_thresholds(&p, &s, &[&ctx]).unwrap();
        let expect = -(s.x[1] - g[1]) / (s.x[0] - g[0]);
        assert!((thr[0] - expect).abs() < 1e-12);
        for c1 in [thr[0] - 0.1, thr[0] + 0.1] {
            let h1 = s.x[0] - g[0];
            let h2 = s.x[1] + c1 * h1 - g[1];
            assert_eq!(h2 > 0.0, c1 > thr[0]);
        }
    }

    #[test]
    fn reference_gains_pass_thresholds() {
        let p = reference_parameters();
        let nx = 200;
        let gains = GainConfig::reference();
        let s = benchmark_state(nx);
        let fr = crate::plant::predict_y_free(&p, &s, p.theta.d1, p.theta.d2, 1.0 / p.q2).unwrap();
        let kt = kappa_thresholds(&fr.last(p.theta.b), &gains.kappas).unwrap();
        let ctx = ControllerContext::build(&p, &p.theta, &gains, nx).unwrap();
        let ct = c_thresholds(&p, &s, &[&ctx]).unwrap();
        gains.check(&p, &kt, &ct).unwrap();
        let mut low = gains.clone();
        low.cs[0] = ct[0].max(2.0) - 0.5;
        assert!(low.check(&p, &kt, &ct).is_err());
    }

    #[test]
    fn gamma_rates_match_centered_differences() {
        let p = reference_parameters();
        let nx = 200;
        let dt = 1e-4;
        let ctx = ControllerContext::build(&p, &p.theta, &GainConfig::reference(), nx).unwrap();
        let mut plant = Plant::new(p.clone(), SimGrid { nx, dt }).unwrap();
        let mut s0 = PlantState::from_fns(nx, |x| 0.1 + 0.3 * (PI * x).sin(), |x| 0.2 + 0.1 * (x * x - 1.0), &[0.2, 0.0], &[1.0, 0.5]);
        plant.prepare(&mut s0).unwrap();
        let s1 = plant.step(&s0, 0.0).unwrap();
        let s2 = plant.step(&s1, 0.0).unwrap();
        let g = |st: &PlantState| ctx.gamma_derivs(st, &p, 2).unwrap();
        let (g0, g1, g2) = (g(&s0), g(&s1), g(&s2));
        for k in 0..2 {
            let fd = (g2[k] - g0[k]) / (2.0 * dt);
            assert!((fd - g1[k + 1]).abs() < 1e-4 * g1[k + 1].abs().max(1.0), "order {k}: {fd} vs {}", g1[k + 1]);
        }
    }
}
