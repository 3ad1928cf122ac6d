use std::path::Path;

use sandwich_core::config::{parse_config, GainsSpec, Mode, ScenarioConfig};
use sandwich_core::controller::GainConfig;
use sandwich_core::harness::*;
use sandwich_core::params::reference_parameters;

fn scenarios() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios"))
}

fn coarse(mode: Mode, horizon: f64) -> ScenarioConfig {
    let mut c = parse_config(&scenarios().join("benchmark.toml")).unwrap();
    c.grid.nx = 100;
    c.grid.dt = 0.005;
    c.run.mode = mode;
    c.run.horizon = horizon;
    c
}

#[test]
fn bundled_benchmark_file_is_the_reference_scenario() {
    let c = parse_config(&scenarios().join("benchmark.toml")).unwrap();
    assert_eq!(c.plant, reference_parameters());
    assert_eq!(c.gains, GainsSpec::Explicit(GainConfig::reference()));
    assert_eq!((c.grid.nx, c.grid.dt), (500, 1e-3));
    assert_eq!(c.run.mode, Mode::Adaptive);
    assert_eq!((c.identifier.period, c.identifier.lookback, c.identifier.modes), (1.5, 10, 1));
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(parse_config(&scenarios().join("absent.toml")).is_err());
}

#[test]
fn identical_configs_give_identical_traces() {
    let c = coarse(Mode::Adaptive, 2.0);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_traces(&run_scenario(&c).unwrap(), a.path()).unwrap();
    emit_traces(&run_scenario(&c).unwrap(), b.path()).unwrap();
    for f in ["trace.csv", "z.txt", "w.txt", "snapshot_t.txt", "summary.toml"] {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn traces_have_one_row_per_step_and_snapshot_cadence() {
    let c = coarse(Mode::Nominal, 1.0);
    let r = run_scenario(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_traces(&r, dir.path()).unwrap();
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    for col in ["t", "y1", "y2", "Ud", "Ua", "d1hat", "d2hat", "bhat"] {
        assert!(header.contains(&col), "missing column {col}");
    }
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), c.steps() + 1);
    assert!(rows.windows(2).all(|w| w[1][0] > w[0][0]));
    assert!(rows.iter().all(|r| r.len() == header.len()));
    let z = std::fs::read_to_string(dir.path().join("z.txt")).unwrap();
    assert_eq!(z.lines().count(), c.steps() / 50 + 1);
    assert_eq!(z.lines().next().unwrap().split(' ').count(), c.grid.nx + 1);
    let summary: toml::Value = toml::from_str(&std::fs::read_to_string(dir.path().join("summary.toml")).unwrap()).unwrap();
    assert_eq!(summary["mode"].as_str(), Some("nominal"));
}

#[test]
fn nominal_filter_with_cbar_at_last_gain_is_inactive() {
    let r = run_scenario(&coarse(Mode::Nominal, 4.0)).unwrap();
    for rec in &r.records {
        assert_eq!(rec.u_a, rec.u_d);
        assert!(rec.c_max <= rec.u_d + 1e-9 * rec.u_d.abs().max(1.0));
        assert!(rec.eta.abs() <= 1e-12 * rec.u_d.abs().max(1.0));
    }
}

#[test]
fn open_loop_run_reports_divergence() {
    let r = run_scenario(&coarse(Mode::OpenLoop, 20.0)).unwrap();
    let s = &r.summary;
    assert!(s.norm2_max > 10.0 * s.norm2_initial);
    assert!(s.margins.as_ref().unwrap().diverged);
}

#[test]
fn adaptive_run_latches_at_the_first_trigger() {
    let r = run_scenario(&coarse(Mode::Adaptive, 3.0)).unwrap();
    let s = &r.summary;
    assert_eq!(s.triggers.len(), 2);
    let first = &s.triggers[0];
    assert!((first.t - 1.5).abs() < 1e-9);
    assert!((first.theta_hat[2] - 1.0).abs() < 1e-3);
    assert!((first.theta_hat[0] - 0.8).abs() < 0.04 && (first.theta_hat[1] - 1.0).abs() < 0.05);
    assert_eq!(s.t_f.map(|t| (t * 1e6).round()), Some(1.5e6));
    assert!(s.excitation.is_empty());
}

#[test]
fn transport_refinement_is_first_order() {
    let c = parse_config(&scenarios().join("transport.toml")).unwrap();
    let table = refinement_study(&c, 4).unwrap();
    let orders = table.orders();
    assert_eq!(orders.len(), 2);
    let last = *orders.last().unwrap();
    assert!((0.8..=1.3).contains(&last), "orders {orders:?}");
}
