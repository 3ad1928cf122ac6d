//! Synthetic identification windows shared by the claims suite and the acceptance run.
#![allow(dead_code)]

use sandwich_core::identifier::*;
use sandwich_core::params::{reference_parameters, Theta};

pub const TRUTH: Theta = Theta { d1: 0.8, d2: 1.0, b: 1.3 };
pub const PREV: Theta = Theta { d1: 0.3, d2: 0.4, b: 0.6 };

/// Cumulative signals of a window satisfying the identities exactly at `TRUTH`.
pub struct Signals {
    pub sin_w: fn(f64) -> f64,
    pub sin_z: fn(f64) -> f64,
    pub inflow: fn(f64) -> f64,
}

pub fn window(sig: &Signals) -> Vec<WindowSample> {
    let n = 1500;
    let dt = 1.5 / n as f64;
    (0..=n)
        .map(|k| {
            let t = k as f64 * dt;
            let flux = 0.3 * t.sin() + 0.1 * t;
            let (g1, g2) = ((sig.sin_w)(t), (sig.sin_z)(t));
            let moment = flux + TRUTH.d1 * g1 + TRUTH.d2 * g2 - 0.7;
            let ly = 0.2 * t * t;
            let w0 = (sig.inflow)(t);
            WindowSample {
                step: k,
                t,
                modes: vec![[moment, flux, g1, g2]],
                y_last: 1.0 + ly + TRUTH.b * w0,
                ly_int: ly,
                w0_int: w0,
            }
        })
        .collect()
}

pub fn estimate(sig: &Signals) -> Theta {
    let samples = window(sig);
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let sys = assemble_fermat(&refs);
    let cfg = IdentifierConfig::default();
    let mut bx = reference_parameters().theta_box;
    bx.b = [0.5, 1.5];
    let ls = least_squares_update(&sys, &PREV, &bx, cfg.rank_tol);
    apply_hold(&ls.candidate, &PREV, cfg.hold_fraction)
}

pub fn zero(_: f64) -> f64 {
    0.0
}

pub fn quadratic(t: f64) -> f64 {
    0.5 * t * t
}

pub fn oscillating(t: f64) -> f64 {
    1.0 - (2.0 * t).cos()
}

pub fn ramp(t: f64) -> f64 {
    0.4 * t
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

/// The six claims as `(name, holds)`.
pub fn claims() -> Vec<(&'static str, bool)> {
    let generic = estimate(&Signals { sin_w: quadratic, sin_z: oscillating, inflow: ramp });
    let z_only = estimate(&Signals { sin_w: zero, sin_z: oscillating, inflow: ramp });
    let w_only = estimate(&Signals { sin_w: quadratic, sin_z: zero, inflow: ramp });
    let silent = estimate(&Signals { sin_w: zero, sin_z: zero, inflow: ramp });
    let no_inflow = estimate(&Signals { sin_w: quadratic, sin_z: oscillating, inflow: zero });
    vec![
        ("z-only data fix d2, hold d1", close(z_only.d2, TRUTH.d2) && z_only.d1 == PREV.d1),
        ("w-only data fix d1, hold d2", close(w_only.d1, TRUTH.d1) && w_only.d2 == PREV.d2),
        ("zero profiles hold d1 and d2", silent.d1 == PREV.d1 && silent.d2 == PREV.d2),
        ("generic data fix d1 and d2", close(generic.d1, TRUTH.d1) && close(generic.d2, TRUTH.d2)),
        ("nonzero inflow fixes b", close(generic.b, TRUTH.b)),
        ("zero inflow holds b", no_inflow.b == PREV.b),
    ]
}
