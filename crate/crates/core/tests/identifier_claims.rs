//! Constructed windows: which parameters a window pins down and which it leaves alone.

mod common;

use common::*;
use sandwich_core::identifier::assemble_fermat;

#[test]
fn z_only_data_fix_the_z_coupling() {
    let th = estimate(&Signals { sin_w: zero, sin_z: oscillating, inflow: ramp });
    assert!(close(th.d2, TRUTH.d2), "{th:?}");
    assert_eq!(th.d1, PREV.d1);
}

#[test]
fn w_only_data_fix_the_w_coupling() {
    let th = estimate(&Signals { sin_w: quadratic, sin_z: zero, inflow: ramp });
    assert!(close(th.d1, TRUTH.d1), "{th:?}");
    assert_eq!(th.d2, PREV.d2);
}

#[test]
fn silent_profiles_hold_both_couplings() {
    let th = estimate(&Signals { sin_w: zero, sin_z: zero, inflow: ramp });
    assert_eq!((th.d1, th.d2), (PREV.d1, PREV.d2));
}

#[test]
fn generic_data_fix_both_couplings() {
    let th = estimate(&Signals { sin_w: quadratic, sin_z: oscillating, inflow: ramp });
    assert!(close(th.d1, TRUTH.d1) && close(th.d2, TRUTH.d2), "{th:?}");
}

#[test]
fn nonzero_inflow_fixes_the_gain() {
    let th = estimate(&Signals { sin_w: quadratic, sin_z: oscillating, inflow: ramp });
    assert!(close(th.b, TRUTH.b), "{th:?}");
}

#[test]
fn silent_inflow_holds_the_gain() {
    let th = estimate(&Signals { sin_w: quadratic, sin_z: oscillating, inflow: zero });
    assert_eq!(th.b, PREV.b);
}

#[test]
fn gain_row_vanishes_exactly_without_inflow() {
    let samples = window(&Signals { sin_w: quadratic, sin_z: oscillating, inflow: zero });
    let sys = assemble_fermat(&samples.iter().collect::<Vec<_>>());
    assert_eq!(sys.q4, 0.0);
    let samples = window(&Signals { sin_w: quadratic, sin_z: oscillating, inflow: ramp });
    assert!(assemble_fermat(&samples.iter().collect::<Vec<_>>()).q4 > 0.0);
}

#[test]
fn all_six_claims_hold() {
    for (name, ok) in claims() {
        assert!(ok, "{name}");
    }
}
