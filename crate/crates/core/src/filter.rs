//! Robust safety filter over the feasible parameter set.
//!
//! The constraint on the input is a half-line `u >= c_max`, with `c_max` the
//! largest `U*` over the feasible set, so the QP reduces to a scalar max.
//! For fixed `(d1, d2)` the input `U*` is affine in `1/b` (kernel rows do not
//! depend on `b`, `λ` scales with `1/b`), which means only the smallest and
//! largest feasible `b` of each `(d1, d2)` pair need evaluating.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::controller::{ControllerContext, GainConfig};
use crate::error::{Error, Result};
use crate::kernels::{refinement_factor, KernelContext, KernelRows};
use crate::params::{PlantParameters, Theta};
use crate::plant::PlantState;

fn key(th: &Theta) -> [u64; 3] {
    [th.d1.to_bits(), th.d2.to_bits(), th.b.to_bits()]
}

/// Controller contexts per parameter triple, sharing kernel rows per `(d1, d2)`.
#[derive(Debug, Clone)]
pub struct ContextCache {
    params: PlantParameters,
    gains: GainConfig,
    nx: usize,
    rows: HashMap<[u64; 2], KernelRows>,
    contexts: HashMap<[u64; 3], ControllerContext>,
}

impl ContextCache {
    pub fn new(params: &PlantParameters, gains: &GainConfig, nx: usize) -> Self {
        Self { params: params.clone(), gains: gains.clone(), nx, rows: HashMap::new(), contexts: HashMap::new() }
    }

    pub fn ensure(&mut self, th: &Theta) -> Result<()> {
        if self.contexts.contains_key(&key(th)) {
            return Ok(());
        }
        let rk = [th.d1.to_bits(), th.d2.to_bits()];
        if !self.rows.contains_key(&rk) {
            let r = refinement_factor(self.nx);
            let rows = KernelRows::build(&self.params, th.d1, th.d2, &self.gains.kappas, self.nx * r)?.subsample(r);
            self.rows.insert(rk, rows);
        }
        let kernel = KernelContext::from_rows(&self.params, th, &self.gains.kappas, self.rows[&rk].clone())?;
        let ctx = ControllerContext::from_kernel(&self.params, kernel, &self.gains)?;
        self.contexts.insert(key(th), ctx);
        Ok(())
    }

    pub fn get(&self, th: &Theta) -> Result<&ControllerContext> {
        self.contexts.get(&key(th)).ok_or(Error::MissingContext(th.d1, th.d2, th.b))
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

/// The triples at which `U*` must be evaluated to maximize it over a set:
/// per `(d1, d2)` the smallest and largest `b`.
pub fn extreme_points(points: &[Theta]) -> Vec<Theta> {
    let mut by_pair: Vec<([u64; 2], Theta, Theta)> = Vec::new();
    for p in points {
        let k = [p.d1.to_bits(), p.d2.to_bits()];
        match by_pair.iter_mut().find(|e| e.0 == k) {
            Some(e) => {
                if p.b < e.1.b {
                    e.1 = *p;
                }
                if p.b > e.2.b {
                    e.2 = *p;
                }
            }
            None => by_pair.push((k, *p, *p)),
        }
    }
    let mut out = Vec::with_capacity(2 * by_pair.len());
    for (_, lo, hi) in by_pair {
        out.push(lo);
        if hi != lo {
            out.push(hi);
        }
    }
    out
}

/// Largest `U*` over a parameter set and where it is attained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeActionBound {
    pub c_max: f64,
    pub argmax: Theta,
}

/// `max U*(state; ϑ)` over `points`, each of which needs a cached context.
pub fn safe_lower_bound(
    state: &PlantState,
    params: &PlantParameters,
    points: &[Theta],
    cache: &ContextCache,
) -> Result<SafeActionBound> {
    let mut best: Option<SafeActionBound> = None;
    for th in points {
        let u = cache.get(th)?.input(state, params, true);
        if best.is_none_or(|b| u > b.c_max) {
            best = Some(SafeActionBound { c_max: u, argmax: *th });
        }
    }
    best.ok_or(Error::EmptyFeasibleSet)
}

/// Minimal override of `u_d` subject to `u >= c_max`.
pub fn qp_filter(u_d: f64, bound: &SafeActionBound) -> f64 {
    u_d.max(bound.c_max)
}

/// Tolerances and pulse height of the excitation detectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExcitationConfig {
    pub enabled: bool,
    /// Relative tolerance of the `z = p w` proportionality test.
    pub eps_prop: f64,
    /// Absolute level treated as zero.
    pub eps_abs: f64,
    /// Height of the injected pulse (positive).
    pub amplitude: f64,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self { enabled: true, eps_prop: 1e-6, eps_abs: 1e-9, amplitude: 0.1 }
    }
}

/// Which degenerate situation triggered an injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExcitationCase {
    /// `z = p w` throughout the first half of a window.
    Proportional,
    /// Zero initial profile and zero applied input after the transport delay.
    ZeroInput,
    /// `w(0)` vanished over a whole trigger period.
    SilentInflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcitationEvent {
    pub case: ExcitationCase,
    pub t: f64,
    /// The pulse is applied on `[from, until)`.
    pub from: f64,
    pub until: f64,
}

/// Watches the closed loop for data that would leave the identifier blind
/// and schedules a small positive pulse when it sees them.
#[derive(Debug, Clone)]
pub struct ExcitationMonitor {
    cfg: ExcitationConfig,
    q1: f64,
    p: f64,
    period: f64,
    zero_initial: bool,
    /// `(t, z deviates from p w)` for samples not older than the current window.
    samples: VecDeque<(f64, bool)>,
    stopped: bool,
    input_zero: bool,
    zero_input_checked: bool,
    inflow_silent: bool,
    half_done: bool,
    window: (f64, f64),
    period_start: f64,
    events: Vec<ExcitationEvent>,
}

impl ExcitationMonitor {
    /// `window` is the first identification window `[μ_1, t_1]`.
    pub fn new(cfg: ExcitationConfig, params: &PlantParameters, state0: &PlantState, period: f64, window: (f64, f64)) -> Self {
        let zero = |v: &[f64]| v.iter().all(|x| x.abs() <= cfg.eps_abs);
        Self {
            cfg,
            q1: params.q1,
            p: params.p,
            period,
            zero_initial: zero(&state0.z) || zero(&state0.w),
            samples: VecDeque::new(),
            stopped: false,
            input_zero: true,
            zero_input_checked: false,
            inflow_silent: true,
            half_done: false,
            window,
            period_start: 0.0,
            events: vec![],
        }
    }

    pub fn events(&self) -> &[ExcitationEvent] {
        &self.events
    }

    /// Pulse to add to the filtered input at time `t`.
    pub fn injection(&self, t: f64) -> f64 {
        let on = self.events.iter().any(|e| t >= e.from && t < e.until);
        if self.cfg.enabled && on && !self.stopped {
            self.cfg.amplitude
        } else {
            0.0
        }
    }

    fn fire(&mut self, case: ExcitationCase, t: f64, from: f64, until: f64) {
        self.events.push(ExcitationEvent { case, t, from, until });
    }

    /// Starts tracking the next identification window.
    pub fn next_window(&mut self, window: (f64, f64)) {
        self.window = window;
        self.half_done = false;
        let eps = 1e-9 * self.period;
        while self.samples.front().is_some_and(|s| s.0 < window.0 - eps) {
            self.samples.pop_front();
        }
    }

    /// Cancels pending and future pulses, e.g. once the parameters are known.
    pub fn stop(&mut self) {
        self.stopped = true;
    }

    /// Feeds the state at time `state.t` and the input applied over the step ending there.
    pub fn observe(&mut self, state: &PlantState, applied: f64) {
        if self.stopped {
            return;
        }
        let t = state.t;
        let eps = 1e-9 * self.period;
        let (mu, t_next) = self.window;
        let half = 0.5 * (mu + t_next);
        let zmax = state.z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let dev = state.z.iter().zip(&state.w).fold(0.0f64, |a, (z, w)| a.max((z - self.p * w).abs()));
        let nonzero = zmax > self.cfg.eps_abs || state.w.iter().any(|w| w.abs() > self.cfg.eps_abs);
        self.samples.push_back((t, !nonzero || dev > self.cfg.eps_prop * zmax.max(self.cfg.eps_abs)));
        if !self.half_done && t >= half - eps {
            self.half_done = true;
            let proportional = !self.samples.iter().any(|&(ts, off)| off && ts >= mu - eps && ts <= half + eps);
            if proportional {
                self.fire(ExcitationCase::Proportional, t, half, t_next);
            }
        }

        if applied.abs() > self.cfg.eps_abs {
            self.input_zero = false;
        }
        if self.zero_initial && !self.zero_input_checked && t >= 1.0 / self.q1 - eps {
            self.zero_input_checked = true;
            if self.input_zero {
                self.fire(ExcitationCase::ZeroInput, t, t, t + self.period);
            }
        }

        if state.w[0].abs() > self.cfg.eps_abs {
            self.inflow_silent = false;
        }
        if t >= self.period_start + self.period - eps {
            if self.inflow_silent {
                self.fire(ExcitationCase::SilentInflow, t, t, t + self.period);
            }
            self.period_start = t;
            self.inflow_silent = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::reference_parameters;
    use std::f64::consts::PI;

    #[test]
    fn filter_examples() {
        let b = SafeActionBound { c_max: 5.0, argmax: Theta::new(0.8, 1.0, 1.0) };
        assert_eq!(qp_filter(7.0, &b), 7.0);
        assert_eq!(qp_filter(3.0, &b), 5.0);
    }

    #[test]
    fn extreme_points_keep_b_endpoints() {
        let pts = vec![
            Theta::new(0.2, 0.2, 0.5),
            Theta::new(0.2, 0.2, 0.9),
            Theta::new(0.2, 0.2, 0.7),
            Theta::new(0.4, 0.2, 1.1),
        ];
        let ex = extreme_points(&pts);
        assert_eq!(ex, vec![Theta::new(0.2, 0.2, 0.5), Theta::new(0.2, 0.2, 0.9), Theta::new(0.4, 0.2, 1.1)]);
    }

    #[test]
    fn zero_state_gives_zero_bound() {
        let p = reference_parameters();
        let gains = GainConfig::reference();
        let mut cache = ContextCache::new(&p, &gains, 40);
        let pts = [Theta::new(0.2, 0.4, 0.5), Theta::new(1.2, 1.2, 1.5)];
        for t in &pts {
            cache.ensure(t).unwrap();
        }
        let b = safe_lower_bound(&PlantState::zeros(&p, 40), &p, &pts, &cache).unwrap();
        assert_eq!(b.c_max, 0.0);
        assert!(matches!(
            safe_lower_bound(&PlantState::zeros(&p, 40), &p, &[Theta::new(0.6, 0.6, 0.6)], &cache),
            Err(Error::MissingContext(..))
        ));
    }

    #[test]
    fn singleton_bound_is_the_nominal_input() {
        let p = reference_parameters();
        let gains = GainConfig::reference();
        let nx = 60;
        let mut cache = ContextCache::new(&p, &gains, nx);
        cache.ensure(&p.theta).unwrap();
        let s = PlantState::from_fns(nx, |x| (3.0 * PI * x).sin(), |x| (2.0 * PI * x).cos(), &[1.0, -1.0], &[5.0, 0.0]);
        let b = safe_lower_bound(&s, &p, &[p.theta], &cache).unwrap();
        let ctx = cache.get(&p.theta).unwrap();
        assert_eq!(b.c_max, ctx.input(&s, &p, false));
    }

    #[test]
    fn proportional_profiles_trigger_the_first_detector() {
        let p = reference_parameters();
        let s = PlantState::from_fns(20, |x| p.p * (1.0 + x), |x| 1.0 + x, &[0.0, 0.0], &[1.0, 0.0]);
        let mut mon = ExcitationMonitor::new(ExcitationConfig::default(), &p, &s, 1.0, (0.0, 1.0));
        let mut st = s.clone();
        for k in 0..=10 {
            st.t = k as f64 * 0.1;
            mon.observe(&st, 1.0);
        }
        assert_eq!(mon.events()[0].case, ExcitationCase::Proportional);
        assert!(mon.injection(0.7) > 0.0);
        assert_eq!(mon.injection(1.0), 0.0);
    }

    #[test]
    fn zero_run_triggers_the_zero_input_detector() {
        let p = reference_parameters();
        let s = PlantState::zeros(&p, 20);
        let mut mon = ExcitationMonitor::new(ExcitationConfig::default(), &p, &s, 1.5, (0.0, 1.5));
        let mut st = s.clone();
        let mut fired = None;
        for k in 1..=12 {
            st.t = k as f64 * 0.1;
            mon.observe(&st, 0.0);
            if fired.is_none() && mon.events().iter().any(|e| e.case == ExcitationCase::ZeroInput) {
                fired = Some(st.t);
            }
        }
        assert!((fired.unwrap() - 1.0 / p.q1).abs() < 1e-9);
    }
}
