//! Triggered batch least-squares identification of `(d1, d2, b)`.
//!
//! The sine moments of `z + w` and the last distal coordinate obey linear
//! identities in the unknowns once integrated over a window. The time
//! integrals are accumulated by the plant stepper itself (see
//! [`Plant::set_integrands`](crate::plant::Plant::set_integrands)), so on
//! simulator data the identities hold to roundoff. At each trigger the
//! normal equations of the window least-squares cost are assembled, the
//! estimate is updated and the feasible parameter set is pruned.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{PlantParameters, Theta, ThetaBox};
use crate::plant::{semi_discrete_rate, LinearForm, PlantState};
use crate::quad;

/// Magnitude below which a Gram matrix is treated as identically zero.
const GRAM_FLOOR: f64 = 1e-24;

/// Periodic triggers `t_i = i T` with windows reaching back `Ñ` periods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerSchedule {
    pub period: f64,
    pub lookback: usize,
}

impl TriggerSchedule {
    pub fn new(period: f64, lookback: usize) -> Result<Self> {
        if !(period > 0.0) {
            return Err(Error::InvalidParameter(format!("trigger period must be positive, got {period}")));
        }
        if lookback == 0 {
            return Err(Error::InvalidParameter("window lookback must be at least one period".into()));
        }
        Ok(Self { period, lookback })
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.period
    }

    /// Index `g` of the window start `μ_{i+1} = t_g` for the trigger `t_{i+1}`.
    pub fn window_start_index(&self, i: usize) -> usize {
        (i + 1).saturating_sub(self.lookback)
    }

    /// `(t_{i+1}, μ_{i+1})`.
    pub fn schedule(&self, i: usize) -> (f64, f64) {
        (self.time(i + 1), self.time(self.window_start_index(i)))
    }
}

/// Spatial functionals of one snapshot for one sine mode, by the trapezoid rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalIntegrals {
    /// `∫ sin (z + w)`.
    pub sum: f64,
    /// `∫ cos (q1 z - q2 w)`.
    pub flux: f64,
    pub sin_z: f64,
    pub sin_w: f64,
}

pub fn modal_integrals(state: &PlantState, params: &PlantParameters, mode: usize) -> ModalIntegrals {
    let h = state.dx();
    let k = mode as f64 * PI;
    let nodes = quad::nodes(state.nx());
    let sin: Vec<f64> = nodes.iter().map(|&x| (k * x).sin()).collect();
    let cos_flux: Vec<f64> =
        nodes.iter().enumerate().map(|(i, &x)| (k * x).cos() * (params.q1 * state.z[i] - params.q2 * state.w[i])).collect();
    let sin_z = quad::trapezoid_product(&sin, &state.z, h);
    let sin_w = quad::trapezoid_product(&sin, &state.w, h);
    ModalIntegrals { sum: sin_z + sin_w, flux: quad::trapezoid(&cos_flux, h), sin_z, sin_w }
}

/// Trapezoid weights of `sin(mode π x)` with the end values pinned to zero.
fn sine_weights(nx: usize, mode: usize) -> Vec<f64> {
    let h = 1.0 / nx as f64;
    (0..=nx)
        .map(|i| if i == 0 || i == nx { 0.0 } else { h * (mode as f64 * PI * i as f64 * h).sin() })
        .collect()
}

/// The sine moment `∫ sin (z + w)` as a linear form.
pub fn sine_moment_form(params: &PlantParameters, nx: usize, mode: usize) -> LinearForm {
    let s = sine_weights(nx, mode);
    LinearForm { z: s.clone(), w: s, y: DVector::zeros(params.n()), x1_rate: 0.0 }
}

/// Number of accumulated integrands for `modes` sine modes.
pub fn integrand_count(modes: usize) -> usize {
    3 * modes + 2
}

/// Integrands whose running time integrals the identifier needs, in the
/// order: per mode the transport flux of the moment, `∫ sin w`, `∫ sin z`;
/// then `l . Y` and `w(0)`.
///
/// The flux is the rate of the sine moment along the upwind dynamics with the
/// couplings switched off, so `moment(t) - moment(μ) - ∫ flux` equals
/// `d1 ∫∫ sin w + d2 ∫∫ sin z` exactly on simulator data.
pub fn integrand_forms(params: &PlantParameters, nx: usize, modes: usize) -> Result<Vec<LinearForm>> {
    let n = params.n();
    let uncoupled = Theta::new(0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(integrand_count(modes));
    for mode in 1..=modes {
        let s = sine_weights(nx, mode);
        let moment = sine_moment_form(params, nx, mode);
        out.push(semi_discrete_rate(params, &uncoupled, &moment)?);
        out.push(LinearForm { z: vec![0.0; nx + 1], w: s.clone(), y: DVector::zeros(n), x1_rate: 0.0 });
        out.push(LinearForm { z: s, w: vec![0.0; nx + 1], y: DVector::zeros(n), x1_rate: 0.0 });
    }
    let mut ly = LinearForm::zeros(nx, n);
    ly.y = DVector::from_column_slice(&params.l);
    out.push(ly);
    let mut w0 = LinearForm::zeros(nx, n);
    w0.w[0] = 1.0;
    out.push(w0);
    Ok(out)
}

/// One time sample of everything a window needs.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub step: usize,
    pub t: f64,
    /// Per mode `[moment, ∫ flux, ∫∫ sin w, ∫∫ sin z]`.
    pub modes: Vec<[f64; 4]>,
    pub y_last: f64,
    /// `∫ l . Y`.
    pub ly_int: f64,
    /// `∫ w(0)`.
    pub w0_int: f64,
}

/// Time series of window samples sharing one time base.
#[derive(Debug, Clone)]
pub struct WindowAccumulators {
    moment_forms: Vec<LinearForm>,
    samples: VecDeque<WindowSample>,
}

impl WindowAccumulators {
    pub fn new(params: &PlantParameters, nx: usize, modes: usize) -> Self {
        Self { moment_forms: (1..=modes).map(|k| sine_moment_form(params, nx, k)).collect(), samples: VecDeque::new() }
    }

    pub fn modes(&self) -> usize {
        self.moment_forms.len()
    }

    /// Appends the sample of a state whose accumulators follow [`integrand_forms`].
    pub fn accumulate(&mut self, state: &PlantState, step: usize) -> Result<()> {
        let modes = self.modes();
        if state.acc.len() != integrand_count(modes) {
            return Err(Error::InvalidParameter(format!(
                "state carries {} accumulators, the identifier needs {}",
                state.acc.len(),
                integrand_count(modes)
            )));
        }
        let a = &state.acc;
        let sample = WindowSample {
            step,
            t: state.t,
            modes: (0..modes)
                .map(|k| [self.moment_forms[k].eval(state, 0.0), a[3 * k], a[3 * k + 1], a[3 * k + 2]])
                .collect(),
            y_last: state.y[state.y.len() - 1],
            ly_int: a[3 * modes],
            w0_int: a[3 * modes + 1],
        };
        self.samples.push_back(sample);
        Ok(())
    }

    pub fn push(&mut self, sample: WindowSample) {
        self.samples.push_back(sample);
    }

    /// Drops samples taken before `step`.
    pub fn discard_before(&mut self, step: usize) {
        while self.samples.front().is_some_and(|s| s.step < step) {
            self.samples.pop_front();
        }
    }

    /// Samples with step index in `[from, to]`.
    pub fn window(&self, from: usize, to: usize) -> Vec<&WindowSample> {
        self.samples.iter().filter(|s| s.step >= from && s.step <= to).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Normal-equation entries of one sine mode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModeBlock {
    /// `∫ g1 p`.
    pub h1: f64,
    /// `∫ g2 p`.
    pub h2: f64,
    /// `∫ g1²`.
    pub q1: f64,
    /// `∫ g1 g2`.
    pub q2: f64,
    /// `∫ g2²`.
    pub q3: f64,
    /// `∫ p²`, kept for the cost.
    pub pp: f64,
}

/// The system `Z = G θ` of one window, one block per mode plus the `b` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FermatSystem {
    pub modes: Vec<ModeBlock>,
    /// `∫ q_b p_b`.
    pub h3: f64,
    /// `∫ q_b²`.
    pub q4: f64,
    /// `∫ p_b²`.
    pub pbpb: f64,
}

impl FermatSystem {
    pub fn z_vector(&self, mode: usize) -> Vector3<f64> {
        let m = &self.modes[mode];
        Vector3::new(m.h1, m.h2, self.h3)
    }

    pub fn g_matrix(&self, mode: usize) -> Matrix3<f64> {
        let m = &self.modes[mode];
        Matrix3::new(m.q1, m.q2, 0.0, m.q2, m.q3, 0.0, 0.0, 0.0, self.q4)
    }

    /// The window least-squares cost at `ell`, expanded through the moments.
    pub fn cost(&self, mode: usize, ell: &Theta) -> f64 {
        let m = &self.modes[mode];
        let (a, b, c) = (ell.d1, ell.d2, ell.b);
        m.pp - 2.0 * (a * m.h1 + b * m.h2) + a * a * m.q1 + 2.0 * a * b * m.q2 + b * b * m.q3 + self.pbpb - 2.0 * c * self.h3
            + c * c * self.q4
    }

    /// Residual norms of the `(d1, d2)` rows and the `b` row at `ell`,
    /// together with the norms of the matching right-hand sides.
    pub fn residuals(&self, mode: usize, ell: &Theta) -> ([f64; 2], [f64; 2]) {
        let m = &self.modes[mode];
        let r1 = m.h1 - m.q1 * ell.d1 - m.q2 * ell.d2;
        let r2 = m.h2 - m.q2 * ell.d1 - m.q3 * ell.d2;
        let rb = self.h3 - self.q4 * ell.b;
        ([r1.hypot(r2), rb.abs()], [m.h1.hypot(m.h2), self.h3.abs()])
    }

    /// Whether `ell` satisfies every row to the relative tolerance.
    pub fn admits(&self, ell: &Theta, tol: f64) -> bool {
        (0..self.modes.len()).all(|k| {
            let (res, rhs) = self.residuals(k, ell);
            res[0] <= tol * rhs[0] && res[1] <= tol * rhs[1]
        })
    }
}

/// Assembles the normal equations from the samples of one window (the first
/// sample is the window start).
pub fn assemble_fermat(window: &[&WindowSample]) -> FermatSystem {
    let modes = window.first().map_or(0, |s| s.modes.len());
    let mut sys = FermatSystem { modes: vec![ModeBlock::default(); modes], h3: 0.0, q4: 0.0, pbpb: 0.0 };
    let Some(first) = window.first() else {
        return sys;
    };
    // Integrands at one sample: per mode [g1 p, g2 p, g1², g1 g2, g2², p²], then the b row.
    let integrands = |s: &WindowSample| -> (Vec<[f64; 6]>, [f64; 3]) {
        let per_mode = (0..modes)
            .map(|k| {
                let (now, start) = (&s.modes[k], &first.modes[k]);
                let p = (now[0] - start[0]) - (now[1] - start[1]);
                let g1 = now[2] - start[2];
                let g2 = now[3] - start[3];
                [g1 * p, g2 * p, g1 * g1, g1 * g2, g2 * g2, p * p]
            })
            .collect();
        let pb = (s.y_last - first.y_last) - (s.ly_int - first.ly_int);
        let qb = s.w0_int - first.w0_int;
        (per_mode, [qb * pb, qb * qb, pb * pb])
    };
    let mut prev = integrands(first);
    for pair in window.windows(2) {
        let dt = pair[1].t - pair[0].t;
        let next = integrands(pair[1]);
        for k in 0..modes {
            let blk = &mut sys.modes[k];
            let (a, b) = (&prev.0[k], &next.0[k]);
            let avg = |i: usize| 0.5 * dt * (a[i] + b[i]);
            blk.h1 += avg(0);
            blk.h2 += avg(1);
            blk.q1 += avg(2);
            blk.q2 += avg(3);
            blk.q3 += avg(4);
            blk.pp += avg(5);
        }
        sys.h3 += 0.5 * dt * (prev.1[0] + next.1[0]);
        sys.q4 += 0.5 * dt * (prev.1[1] + next.1[1]);
        sys.pbpb += 0.5 * dt * (prev.1[2] + next.1[2]);
        prev = next;
    }
    sys
}

/// Tuning of the identifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentifierConfig {
    /// Trigger period `T` in seconds.
    pub period: f64,
    /// Window length in periods.
    pub lookback: usize,
    /// Number of sine modes enforced.
    pub modes: usize,
    /// Pitch of the parameter grid carried in the feasible set.
    pub grid_pitch: f64,
    /// Relative residual tolerance of the feasible-set test.
    pub residual_tol: f64,
    /// Relative singular-value threshold of the rank test.
    pub rank_tol: f64,
    /// Relative change below which an estimate component is held.
    pub hold_fraction: f64,
    pub initial: [f64; 3],
}

impl Default for IdentifierConfig {
    fn default() -> Self {
        Self {
            period: 1.5,
            lookback: 10,
            modes: 1,
            grid_pitch: 0.2,
            residual_tol: 1e-4,
            rank_tol: 1e-8,
            hold_fraction: 0.05,
            initial: [0.2, 0.2, 0.5],
        }
    }
}

/// Outcome of one estimator update before the hold rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeastSquaresUpdate {
    /// The closest consistent point in the box.
    pub candidate: Theta,
    /// Rank of the stacked `(d1, d2)` rows.
    pub d_rank: usize,
    pub b_informative: bool,
}

/// Closest point to `prev` on the solution set of the stacked `(d1, d2)`
/// rows within the box, and the `b` ratio when the window excites it.
pub fn least_squares_update(sys: &FermatSystem, prev: &Theta, bx: &ThetaBox, rank_tol: f64) -> LeastSquaresUpdate {
    let rows = 2 * sys.modes.len();
    let mut mat = DMatrix::zeros(rows, 2);
    let mut rhs = DVector::zeros(rows);
    for (k, m) in sys.modes.iter().enumerate() {
        mat[(2 * k, 0)] = m.q1;
        mat[(2 * k, 1)] = m.q2;
        mat[(2 * k + 1, 0)] = m.q2;
        mat[(2 * k + 1, 1)] = m.q3;
        rhs[2 * k] = m.h1;
        rhs[2 * k + 1] = m.h2;
    }
    let svd = mat.svd(true, true);
    let smax = svd.singular_values.max();
    let rank = if rows == 0 || !(smax > GRAM_FLOOR) {
        0
    } else {
        svd.singular_values.iter().filter(|&&s| s > rank_tol * smax).count()
    };
    let prev_d = [prev.d1, prev.d2];
    let (d1, d2) = match rank {
        0 => (prev.d1, prev.d2),
        _ => {
            let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
            let u = svd.u.as_ref().expect("left singular vectors requested");
            // Minimum-norm solution on the retained singular directions.
            let mut sol = [0.0; 2];
            for i in 0..rank {
                let coef = u.column(i).dot(&rhs) / svd.singular_values[i];
                sol[0] += coef * v_t[(i, 0)];
                sol[1] += coef * v_t[(i, 1)];
            }
            if rank == 2 {
                (sol[0].clamp(bx.d1[0], bx.d1[1]), sol[1].clamp(bx.d2[0], bx.d2[1]))
            } else {
                let dir = [v_t[(1, 0)], v_t[(1, 1)]];
                closest_on_line(sol, dir, prev_d, [bx.d1, bx.d2])
            }
        }
    };
    let b_informative = sys.q4 > GRAM_FLOOR;
    let b = if b_informative { (sys.h3 / sys.q4).clamp(bx.b[0], bx.b[1]) } else { prev.b };
    LeastSquaresUpdate { candidate: Theta::new(d1, d2, b), d_rank: rank, b_informative }
}

/// Closest point to `target` on `base + s dir` inside the rectangle; when the
/// line misses the rectangle the unconstrained closest point is clamped.
fn closest_on_line(base: [f64; 2], dir: [f64; 2], target: [f64; 2], rect: [[f64; 2]; 2]) -> (f64, f64) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for k in 0..2 {
        if dir[k].abs() > 1e-14 {
            let a = (rect[k][0] - base[k]) / dir[k];
            let b = (rect[k][1] - base[k]) / dir[k];
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        } else if base[k] < rect[k][0] || base[k] > rect[k][1] {
            lo = f64::INFINITY;
        }
    }
    let free = dir[0] * (target[0] - base[0]) + dir[1] * (target[1] - base[1]);
    let s = if lo <= hi { free.clamp(lo, hi) } else { free };
    let pt = [base[0] + s * dir[0], base[1] + s * dir[1]];
    (pt[0].clamp(rect[0][0], rect[0][1]), pt[1].clamp(rect[1][0], rect[1][1]))
}

/// Per-component hold: changes smaller than `fraction` of the previous value are discarded.
pub fn apply_hold(new: &Theta, prev: &Theta, fraction: f64) -> Theta {
    let a = new.as_array();
    let b = prev.as_array();
    Theta::from_array([0, 1, 2].map(|i| if (a[i] - b[i]).abs() < fraction * b[i].abs() { b[i] } else { a[i] }))
}

/// Candidates closer than this to a feasible point are not added again.
pub const MERGE_RADIUS: f64 = 1e-8;

/// The feasible parameter set: a grid over the box plus the exact candidates
/// met so far, filtered by every window system seen.
#[derive(Debug, Clone)]
pub struct FeasibleSet {
    candidates: Vec<Theta>,
    constraints: Vec<FermatSystem>,
    tol: f64,
    points: Vec<Theta>,
}

impl FeasibleSet {
    pub fn new(bx: &ThetaBox, pitch: f64, tol: f64) -> Self {
        Self { points: bx.grid(pitch), candidates: vec![], constraints: vec![], tol }
    }

    /// Exact candidates that entered the set.
    pub fn candidates(&self) -> &[Theta] {
        &self.candidates
    }

    pub fn points(&self) -> &[Theta] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_singleton(&self) -> bool {
        self.points.len() == 1
    }

    /// Membership of an arbitrary point in the underlying continuous set.
    pub fn contains(&self, ell: &Theta) -> bool {
        self.constraints.iter().all(|c| c.admits(ell, self.tol))
    }

    /// Adds one window system, re-filters the current points and adds the
    /// candidate unless a surviving point already lies within [`MERGE_RADIUS`].
    pub fn update(&mut self, sys: FermatSystem, candidate: Option<Theta>) -> Result<()> {
        self.constraints.push(sys);
        let mut points: Vec<Theta> = self.points.iter().copied().filter(|p| self.contains(p)).collect();
        if let Some(c) = candidate {
            if self.contains(&c) && !points.iter().any(|q| q.distance(&c) < MERGE_RADIUS) {
                self.candidates.push(c);
                points.push(c);
            }
        }
        if points.is_empty() {
            return Err(Error::EmptyFeasibleSet);
        }
        self.points = points;
        Ok(())
    }
}

/// What happened at one trigger.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRecord {
    pub index: usize,
    pub t: f64,
    pub window_start: f64,
    pub theta_hat: Theta,
    pub candidate: Theta,
    pub set_size: usize,
}

/// The running identifier.
#[derive(Debug, Clone)]
pub struct Identifier {
    pub schedule: TriggerSchedule,
    pub config: IdentifierConfig,
    theta_box: ThetaBox,
    acc: WindowAccumulators,
    theta_hat: Theta,
    set: FeasibleSet,
    dt: f64,
    next: usize,
    t_f: Option<f64>,
    history: Vec<TriggerRecord>,
}

impl Identifier {
    pub fn new(params: &PlantParameters, nx: usize, dt: f64, config: IdentifierConfig) -> Result<Self> {
        let schedule = TriggerSchedule::new(config.period, config.lookback)?;
        if config.modes == 0 {
            return Err(Error::InvalidParameter("the identifier needs at least one sine mode".into()));
        }
        let steps = config.period / dt;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "trigger period {} is not a whole number of time steps of {dt}",
                config.period
            )));
        }
        let theta_hat = Theta::from_array(config.initial);
        if !params.theta_box.contains(&theta_hat, 0.0) {
            return Err(Error::InvalidParameter("initial estimate lies outside the parameter box".into()));
        }
        Ok(Self {
            schedule,
            theta_box: params.theta_box,
            acc: WindowAccumulators::new(params, nx, config.modes),
            theta_hat,
            set: FeasibleSet::new(&params.theta_box, config.grid_pitch, config.residual_tol),
            config,
            dt,
            next: 0,
            t_f: None,
            history: vec![],
        })
    }

    pub fn theta_hat(&self) -> Theta {
        self.theta_hat
    }

    pub fn feasible_set(&self) -> &FeasibleSet {
        &self.set
    }

    /// First trigger time at which the feasible set was a singleton.
    pub fn t_f(&self) -> Option<f64> {
        self.t_f
    }

    pub fn history(&self) -> &[TriggerRecord] {
        &self.history
    }

    fn step_of(&self, t: f64) -> usize {
        (t / self.dt).round() as usize
    }

    /// Records the state reached after `step` steps and runs a trigger when due.
    pub fn observe(&mut self, state: &PlantState, step: usize) -> Result<Option<TriggerRecord>> {
        self.acc.accumulate(state, step)?;
        let (t_next, mu) = self.schedule.schedule(self.next);
        if step < self.step_of(t_next) {
            return Ok(None);
        }
        let window = self.acc.window(self.step_of(mu), step);
        let sys = assemble_fermat(&window);
        let ls = least_squares_update(&sys, &self.theta_hat, &self.theta_box, self.config.rank_tol);
        self.theta_hat = apply_hold(&ls.candidate, &self.theta_hat, self.config.hold_fraction);
        self.set.update(sys, Some(ls.candidate))?;
        if self.t_f.is_none() && self.set.is_singleton() {
            self.t_f = Some(state.t);
        }
        let record = TriggerRecord {
            index: self.next + 1,
            t: state.t,
            window_start: mu,
            theta_hat: self.theta_hat,
            candidate: ls.candidate,
            set_size: self.set.len(),
        };
        self.history.push(record.clone());
        self.next += 1;
        let (_, next_mu) = self.schedule.schedule(self.next);
        self.acc.discard_before(self.step_of(next_mu));
        Ok(Some(record))
    }
}
