//! Runs a scenario end to end, writes its traces and compares refinement levels.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{GainsSpec, Mode, ScenarioConfig};
use crate::controller::{c_thresholds, kappa_thresholds_over, linspace, GainConfig};
use crate::diagnostics::{
    distal_target, forward_transform, lyapunov_rate, lyapunov_v, LyapunovConfig, MarginsReport, SafetyMonitor, TransformTables,
};
use crate::error::{Error, Result};
use crate::filter::{extreme_points, qp_filter, safe_lower_bound, ContextCache, ExcitationEvent, ExcitationMonitor};
use crate::identifier::{integrand_forms, Identifier, TriggerRecord};
use crate::params::{PlantParameters, Theta};
use crate::plant::{predict_y_free, validate, AssumptionCheck, Plant, PlantState, ValidationReport};

/// The scalar signals of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub u_d: f64,
    pub u_a: f64,
    pub c_max: f64,
    pub filter_active: bool,
    pub injection: f64,
    pub theta_hat: Theta,
    pub set_size: usize,
    /// Nominal input at the true parameters minus the applied input.
    pub eta: f64,
    /// NaN between diagnostic samples.
    pub v: f64,
    pub beta_min: f64,
    pub h: Vec<f64>,
    pub norm2: f64,
}

/// Field profiles at one sampled time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriggerSummary {
    pub index: usize,
    pub t: f64,
    pub window_start: f64,
    pub theta_hat: [f64; 3],
    pub candidate: [f64; 3],
    pub set_size: usize,
}

impl From<&TriggerRecord> for TriggerSummary {
    fn from(r: &TriggerRecord) -> Self {
        Self {
            index: r.index,
            t: r.t,
            window_start: r.window_start,
            theta_hat: r.theta_hat.as_array(),
            candidate: r.candidate.as_array(),
            set_size: r.set_size,
        }
    }
}

/// What a run reports besides its traces.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunSummary {
    pub mode: String,
    pub nx: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub steps: usize,
    pub t_end: f64,
    pub fault: Option<String>,
    pub assumption_failures: Vec<String>,
    pub gains: Option<GainConfig>,
    pub t_f: Option<f64>,
    pub theta_hat: [f64; 3],
    pub set_size: usize,
    pub norm2_initial: f64,
    pub norm2_final: f64,
    pub norm2_max: f64,
    pub sigma0: f64,
    /// Largest `V(t) / (V(t_ref) exp(-σ0 (t - t_ref)))` for `t >= t_ref + 1/q2`,
    /// with `t_ref = t_f` in adaptive runs and 0 in nominal runs.
    pub decay_ratio_max: Option<f64>,
    /// Largest `|η|` at or after `t_f`.
    pub eta_max_after_tf: Option<f64>,
    pub filter_active_fraction: f64,
    pub margins: Option<MarginsReport>,
    pub triggers: Vec<TriggerSummary>,
    pub excitation: Vec<ExcitationEvent>,
}

/// Traces and summary of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunResult {
    pub n: usize,
    pub m: usize,
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<Snapshot>,
    pub summary: RunSummary,
}

/// Gains from the file or derived from the thresholds.
///
/// Derived gains take every threshold over the parameter box (50 samples of
/// `b`, the identifier grid for the couplings) with 50% margin plus one.
pub fn resolve_gains(cfg: &ScenarioConfig, state0: &PlantState) -> Result<GainConfig> {
    let mut gains = match &cfg.gains {
        GainsSpec::Explicit(g) => g.clone(),
        GainsSpec::Auto(_) => derive_gains(cfg, state0)?,
    };
    if let Some(cbar) = cfg.filter.cbar {
        gains.cbar = cbar;
    }
    gains.check(&cfg.plant, &[], &[])?;
    Ok(gains)
}

fn derive_gains(cfg: &ScenarioConfig, state0: &PlantState) -> Result<GainConfig> {
    let p = &cfg.plant;
    let (n, m) = (p.n(), p.m());
    let bx = p.theta_box;
    let mut pairs: Vec<Theta> = bx.grid(cfg.identifier.grid_pitch);
    pairs.dedup_by(|a, b| a.d1 == b.d1 && a.d2 == b.d2);
    let responses = pairs
        .iter()
        .map(|th| predict_y_free(p, state0, th.d1, th.d2, 1.0 / p.q2))
        .collect::<Result<Vec<_>>>()?;
    let bs = linspace(bx.b[0], bx.b[1], 50);
    let mut kappas = vec![1.0; n];
    kappas[n - 1] = 10.0;
    for i in 0..n - 1 {
        let thr = kappa_thresholds_over(&responses, &bs, &kappas)?;
        kappas[i] = 1.5 * thr[i].max(0.0) + 1.0;
    }
    let mut cs = vec![20.0; m];
    let mut gains = GainConfig { kappas, cs: cs.clone(), cbar: 20.0 };
    if m > 1 {
        let mut cache = ContextCache::new(p, &gains, cfg.grid.nx);
        let pts = extreme_points(&bx.grid(cfg.identifier.grid_pitch));
        for th in &pts {
            cache.ensure(th)?;
        }
        let ctxs = pts.iter().map(|th| cache.get(th)).collect::<Result<Vec<_>>>()?;
        let thr = c_thresholds(p, state0, &ctxs)?;
        cs[0] = 1.5 * thr[0].max(2.0) + 1.0;
        gains.cs = cs;
    }
    info!("derived gains {gains:?}");
    Ok(gains)
}

/// Standing assumptions plus the gain thresholds, the latter maximized over
/// the parameter box in adaptive mode and taken at the true parameters otherwise.
pub fn validate_scenario(cfg: &ScenarioConfig) -> Result<ValidationReport> {
    cfg.check()?;
    let p = &cfg.plant;
    let mut state = cfg.initial_state();
    state.enforce_boundaries(p.p);
    let gains = resolve_gains(cfg, &state)?;
    let mut report = validate(p, &state, &cfg.grid.sim_grid(), &gains.kappas)?;
    let pts = match cfg.run.mode {
        Mode::Adaptive => extreme_points(&p.theta_box.grid(cfg.identifier.grid_pitch)),
        _ => vec![p.theta],
    };
    let mut pairs = pts.clone();
    pairs.dedup_by(|a, b| a.d1 == b.d1 && a.d2 == b.d2);
    let responses = pairs
        .iter()
        .map(|th| predict_y_free(p, &state, th.d1, th.d2, 1.0 / p.q2))
        .collect::<Result<Vec<_>>>()?;
    let bs: Vec<f64> = match cfg.run.mode {
        Mode::Adaptive => linspace(p.theta_box.b[0], p.theta_box.b[1], 50),
        _ => vec![p.theta.b],
    };
    let kt = kappa_thresholds_over(&responses, &bs, &gains.kappas);
    let mut cache = ContextCache::new(p, &gains, cfg.grid.nx);
    for th in &pts {
        cache.ensure(th)?;
    }
    let ctxs = pts.iter().map(|th| cache.get(th)).collect::<Result<Vec<_>>>()?;
    let ct = c_thresholds(p, &state, &ctxs);
    let outcome = match (kt, ct) {
        (Ok(kt), Ok(ct)) => gains.check(p, &kt, &ct).map(|_| format!("kappa thresholds {kt:.4?}, c thresholds {ct:.4?}")),
        (Err(e), _) | (_, Err(e)) => Err(e),
    };
    report.checks.push(AssumptionCheck {
        name: "gain thresholds",
        passed: outcome.is_ok(),
        detail: match outcome {
            Ok(d) => d,
            Err(e) => e.to_string(),
        },
    });
    Ok(report)
}

/// Which loop is closed and the objects it needs.
enum Loop {
    Open,
    Nominal,
    Adaptive { identifier: Box<Identifier>, excitation: ExcitationMonitor, points: Vec<Theta> },
}

struct Signals {
    u_d: f64,
    c_max: f64,
}

fn signals(lp: &Loop, state: &PlantState, params: &PlantParameters, cache: &ContextCache) -> Result<Signals> {
    match lp {
        Loop::Open => Ok(Signals { u_d: 0.0, c_max: f64::NEG_INFINITY }),
        Loop::Nominal => {
            let ctx = cache.get(&params.theta)?;
            Ok(Signals { u_d: ctx.input(state, params, false), c_max: ctx.input(state, params, true) })
        }
        Loop::Adaptive { identifier, points, .. } => {
            let u_d = cache.get(&identifier.theta_hat())?.input(state, params, false);
            let bound = safe_lower_bound(state, params, points, cache)?;
            Ok(Signals { u_d, c_max: bound.c_max })
        }
    }
}

fn applied(lp: &Loop, sig: &Signals, t: f64) -> f64 {
    match lp {
        Loop::Open => 0.0,
        Loop::Nominal => sig.u_d.max(sig.c_max),
        Loop::Adaptive { excitation, .. } => {
            qp_filter(sig.u_d, &crate::filter::SafeActionBound { c_max: sig.c_max, argmax: Theta::new(0.0, 0.0, 0.0) })
                + excitation.injection(t)
        }
    }
}

struct Diagnostics {
    tables: TransformTables,
    lyap: LyapunovConfig,
}

/// Runs the configured mode over the horizon.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunResult> {
    cfg.check()?;
    let params = &cfg.plant;
    let grid = cfg.grid.sim_grid();
    let nx = grid.nx;
    let mode = cfg.run.mode;
    let mut state = cfg.initial_state();
    let mut plant = Plant::new(params.clone(), grid)?;

    let closed = mode != Mode::OpenLoop;
    let gains = if closed { Some(resolve_gains(cfg, &state)?) } else { None };
    let mut summary = RunSummary {
        mode: mode.as_str().into(),
        nx,
        dt: grid.dt,
        horizon: cfg.run.horizon,
        seed: cfg.run.seed,
        gains: gains.clone(),
        sigma0: f64::NAN,
        ..Default::default()
    };
    if let Some(g) = &gains {
        let mut probe = state.clone();
        probe.enforce_boundaries(params.p);
        for c in validate(params, &probe, &grid, &g.kappas)?.failed() {
            warn!("assumption `{}` fails: {}", c.name, c.detail);
            summary.assumption_failures.push(format!("{}: {}", c.name, c.detail));
        }
    }

    let mut cache = ContextCache::new(params, gains.as_ref().unwrap_or(&GainConfig::reference()), nx);
    let mut lp = match mode {
        Mode::OpenLoop => Loop::Open,
        Mode::Nominal => {
            cache.ensure(&params.theta)?;
            Loop::Nominal
        }
        Mode::Adaptive => {
            plant.set_integrands(integrand_forms(params, nx, cfg.identifier.modes)?);
            let identifier = Identifier::new(params, nx, grid.dt, cfg.identifier.clone())?;
            let (t1, mu1) = identifier.schedule.schedule(0);
            let excitation = ExcitationMonitor::new(cfg.filter.excitation, params, &state, cfg.identifier.period, (mu1, t1));
            let points = extreme_points(identifier.feasible_set().points());
            cache.ensure(&params.theta)?;
            cache.ensure(&identifier.theta_hat())?;
            for th in &points {
                cache.ensure(th)?;
            }
            info!("adaptive run: {} contexts for {} feasible points", cache.len(), identifier.feasible_set().len());
            Loop::Adaptive { identifier: Box::new(identifier), excitation, points }
        }
    };
    plant.prepare(&mut state)?;
    if let Loop::Adaptive { identifier, excitation, .. } = &mut lp {
        identifier.observe(&state, 0)?;
        excitation.observe(&state, 0.0);
    }

    let diag = match &gains {
        Some(g) => {
            let tables = TransformTables::build(params, &params.theta, &g.kappas, nx, cfg.output.diagnostics_grid(nx))?;
            let lyap = lyapunov_rate(params, g, &DMatrix::identity(params.n(), params.n()), params.theta.b)?;
            summary.sigma0 = lyap.sigma0;
            Some(Diagnostics { tables, lyap })
        }
        None => None,
    };
    let mut monitor = SafetyMonitor::new(params, state.y[0], cfg.filter.tol_num);
    let kappas = gains.as_ref().map(|g| g.kappas.clone());

    let steps = cfg.steps();
    let norm0 = state.norm2();
    summary.norm2_initial = norm0;
    summary.norm2_max = norm0;
    let mut result = RunResult { n: params.n(), m: params.m(), ..Default::default() };
    let mut force_diag = false;
    let mut active = 0usize;

    for k in 0..=steps {
        let sig = signals(&lp, &state, params, &cache)?;
        let u_a = applied(&lp, &sig, state.t);
        let (theta_hat, set_size, t_f) = match &lp {
            Loop::Adaptive { identifier, .. } => (identifier.theta_hat(), identifier.feasible_set().len(), identifier.t_f()),
            _ => (params.theta, 1, None),
        };
        let mut rec = TraceRecord {
            t: state.t,
            y: state.y.iter().copied().collect(),
            x: state.x.clone(),
            u_d: sig.u_d,
            u_a,
            c_max: sig.c_max,
            filter_active: sig.c_max > sig.u_d,
            injection: match &lp {
                Loop::Adaptive { excitation, .. } => excitation.injection(state.t),
                _ => 0.0,
            },
            theta_hat,
            set_size,
            eta: f64::NAN,
            v: f64::NAN,
            beta_min: f64::NAN,
            h: vec![f64::NAN; params.m()],
            norm2: state.norm2(),
        };
        if closed {
            let ctx = cache.get(&params.theta)?;
            rec.eta = ctx.input(&state, params, false) - u_a;
            if let Some(tf) = t_f {
                if state.t >= tf - 1e-9 {
                    summary.eta_max_after_tf = Some(summary.eta_max_after_tf.unwrap_or(0.0).max(rec.eta.abs()));
                }
            }
            if k % cfg.output.diagnostics_every == 0 || force_diag {
                let d = diag.as_ref().expect("closed loops carry diagnostics");
                let target = forward_transform(&state, params, &d.tables, ctx)?;
                rec.v = lyapunov_v(&target, &d.lyap);
                rec.beta_min = target.beta.iter().copied().fold(f64::INFINITY, f64::min);
                monitor.record_beta(state.t, &target.beta);
                rec.h = target.h;
                force_diag = false;
            } else {
                rec.h = ctx.control(&state, params, ctx.gains.c_last())?.h;
            }
            monitor.record_chain(state.t, &rec.h);
            let z = distal_target(&state.y, kappas.as_ref().expect("closed loops carry gains"));
            monitor.record_output(state.t, &state.y, &z);
        } else {
            monitor.record_output(state.t, &state.y, &state.y);
        }
        if rec.filter_active {
            active += 1;
        }
        summary.norm2_max = summary.norm2_max.max(rec.norm2);
        if k % cfg.output.snapshot_every == 0 {
            result.snapshots.push(Snapshot { t: state.t, z: state.z.clone(), w: state.w.clone() });
        }
        result.records.push(rec);
        if k == steps {
            break;
        }
        if !closed && state.norm2() > 1e8 * norm0.max(f64::MIN_POSITIVE) {
            info!("open-loop state exceeded 1e8 times its initial norm at t = {:.3}; stopping", state.t);
            break;
        }

        let stepped = plant.step_with(&state, |st| {
            let s = signals(&lp, st, params, &cache)?;
            Ok(applied(&lp, &s, st.t))
        });
        let next = match stepped {
            Ok((next, _)) => next,
            Err(e) => {
                warn!("run stopped at t = {:.4}: {e}", state.t);
                summary.fault = Some(e.to_string());
                break;
            }
        };
        state = next;
        if let Loop::Adaptive { identifier, excitation, points } = &mut lp {
            match identifier.observe(&state, k + 1) {
                Ok(Some(trigger)) => {
                    info!(
                        "trigger {} at t = {:.3}: estimate ({:.6}, {:.6}, {:.6}), {} feasible points",
                        trigger.index, trigger.t, trigger.theta_hat.d1, trigger.theta_hat.d2, trigger.theta_hat.b, trigger.set_size
                    );
                    cache.ensure(&identifier.theta_hat())?;
                    *points = extreme_points(identifier.feasible_set().points());
                    for th in points.iter() {
                        cache.ensure(th)?;
                    }
                    if identifier.feasible_set().is_singleton() {
                        excitation.stop();
                    }
                    let (t_next, mu) = identifier.schedule.schedule(trigger.index);
                    excitation.next_window((mu, t_next));
                    force_diag = true;
                }
                Ok(None) => {}
                Err(e) => {
                    warn!("identifier stopped the run at t = {:.4}: {e}", state.t);
                    summary.fault = Some(e.to_string());
                    if let Some(r) = result.records.last_mut() {
                        r.set_size = 0;
                    }
                    break;
                }
            }
            excitation.observe(&state, result.records.last().map_or(0.0, |r| r.u_a));
        }
    }

    let last = result.records.last().expect("at least the initial record");
    summary.steps = result.records.len() - 1;
    summary.t_end = last.t;
    summary.norm2_final = last.norm2;
    summary.theta_hat = last.theta_hat.as_array();
    summary.set_size = last.set_size;
    summary.filter_active_fraction = active as f64 / result.records.len() as f64;
    if let Loop::Adaptive { identifier, excitation, .. } = &lp {
        summary.t_f = identifier.t_f();
        summary.triggers = identifier.history().iter().map(TriggerSummary::from).collect();
        summary.excitation = excitation.events().to_vec();
    }
    let t_ref = match mode {
        Mode::Adaptive => summary.t_f,
        Mode::Nominal => Some(0.0),
        Mode::OpenLoop => None,
    };
    if let Some(tr) = t_ref {
        summary.decay_ratio_max = decay_ratio(&result.records, tr, 1.0 / params.q2, summary.sigma0);
    }
    if summary.norm2_max > 10.0 * norm0 && !closed {
        monitor.mark_diverged();
    }
    summary.margins = Some(monitor.finish());
    result.summary = summary;
    Ok(result)
}

/// `max V(t) / (V(t_ref) e^{-σ0 (t - t_ref)})` over diagnostic samples with `t >= t_ref + delay`.
pub fn decay_ratio(records: &[TraceRecord], t_ref: f64, delay: f64, sigma0: f64) -> Option<f64> {
    let v_ref = records.iter().find(|r| (r.t - t_ref).abs() < 1e-9 && r.v.is_finite())?.v;
    records
        .iter()
        .filter(|r| r.v.is_finite() && r.t >= t_ref + delay - 1e-9)
        .map(|r| r.v / (v_ref * (-sigma0 * (r.t - t_ref)).exp()))
        .reduce(f64::max)
}

/// Column names of the scalar trace.
pub fn trace_header(n: usize, m: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("y{i}")));
    cols.extend((1..=m).map(|i| format!("x{i}")));
    for c in ["Ud", "Ua", "cmax", "filter_active", "inject", "d1hat", "d2hat", "bhat", "set_size", "eta", "V", "beta_min"] {
        cols.push(c.into());
    }
    cols.extend((1..=m).map(|i| format!("h{i}")));
    cols.push("norm2".into());
    cols
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn trace_row(r: &TraceRecord) -> Vec<String> {
    let mut row = vec![num(r.t)];
    row.extend(r.y.iter().map(|&v| num(v)));
    row.extend(r.x.iter().map(|&v| num(v)));
    row.extend([num(r.u_d), num(r.u_a), num(r.c_max), (r.filter_active as u8).to_string(), num(r.injection)]);
    row.extend(r.theta_hat.as_array().map(num));
    row.push(r.set_size.to_string());
    row.extend([num(r.eta), num(r.v), num(r.beta_min)]);
    row.extend(r.h.iter().map(|&v| num(v)));
    row.push(num(r.norm2));
    row
}

fn write_matrix(path: &Path, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for row in rows {
        let line: Vec<String> = row.into_iter().map(num).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

/// Writes `trace.csv`, `z.txt`, `w.txt`, `snapshot_t.txt` and `summary.toml` into `dir`.
pub fn emit_traces(result: &RunResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = BufWriter::new(File::create(dir.join("trace.csv"))?);
    writeln!(f, "{}", trace_header(result.n, result.m).join(","))?;
    for r in &result.records {
        writeln!(f, "{}", trace_row(r).join(","))?;
    }
    f.flush()?;
    write_matrix(&dir.join("z.txt"), result.snapshots.iter().map(|s| s.z.clone()))?;
    write_matrix(&dir.join("w.txt"), result.snapshots.iter().map(|s| s.w.clone()))?;
    write_matrix(&dir.join("snapshot_t.txt"), result.snapshots.iter().map(|s| vec![s.t]))?;
    let text = toml::to_string(&result.summary).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("summary.toml"), text)?;
    Ok(())
}

/// One refinement level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementLevel {
    pub nx: usize,
    pub dt: f64,
    /// Max difference of `y1` to the next finer level on the coarsest time grid.
    pub y1_diff: Option<f64>,
    /// Same for the estimate.
    pub theta_diff: Option<f64>,
    /// `log2` of the ratio of this and the next successive difference.
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementTable {
    pub levels: Vec<RefinementLevel>,
}

impl RefinementTable {
    pub fn y1_diffs(&self) -> Vec<f64> {
        self.levels.iter().filter_map(|l| l.y1_diff).collect()
    }

    pub fn orders(&self) -> Vec<f64> {
        self.levels.iter().filter_map(|l| l.order).collect()
    }
}

/// Reruns the scenario with `dx` and `dt` halved per level and compares
/// successive levels on the coarsest time grid. Levels run in parallel.
pub fn refinement_study(cfg: &ScenarioConfig, levels: usize) -> Result<RefinementTable> {
    if levels < 2 {
        return Err(Error::InvalidParameter(format!("a refinement study needs at least two levels, got {levels}")));
    }
    let configs: Vec<ScenarioConfig> = (0..levels)
        .map(|l| {
            let mut c = cfg.clone();
            c.grid.nx = cfg.grid.nx << l;
            c.grid.dt = cfg.grid.dt / (1u64 << l) as f64;
            c.output.dir = None;
            c.output.diagnostics_every = usize::MAX / 2;
            c.output.snapshot_every = usize::MAX / 2;
            c
        })
        .collect();
    let runs: Vec<Result<RunResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run_scenario(c))).collect();
        handles.into_iter().map(|h| h.join().expect("refinement level panicked")).collect()
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let sample = |l: usize| -> Vec<&TraceRecord> { runs[l].records.iter().step_by(1 << l).collect() };
    let mut rows: Vec<RefinementLevel> = configs
        .iter()
        .map(|c| RefinementLevel { nx: c.grid.nx, dt: c.grid.dt, y1_diff: None, theta_diff: None, order: None })
        .collect();
    for l in 0..levels - 1 {
        let (a, b) = (sample(l), sample(l + 1));
        let pairs = a.iter().zip(&b);
        rows[l].y1_diff = pairs.clone().map(|(p, q)| (p.y[0] - q.y[0]).abs()).reduce(f64::max);
        rows[l].theta_diff = pairs.map(|(p, q)| p.theta_hat.distance(&q.theta_hat)).reduce(f64::max);
    }
    for l in 0..levels.saturating_sub(2) {
        if let (Some(a), Some(b)) = (rows[l].y1_diff, rows[l + 1].y1_diff) {
            rows[l].order = Some((a / b).log2());
        }
    }
    Ok(RefinementTable { levels: rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InitialConfig, Profile};

    fn short(mode: Mode) -> ScenarioConfig {
        let mut c = ScenarioConfig::reference();
        c.grid.nx = 40;
        c.grid.dt = 0.01;
        c.run.horizon = 0.2;
        c.run.mode = mode;
        c.output.diagnostics_nx = Some(20);
        c
    }

    #[test]
    fn header_lists_documented_columns() {
        let h = trace_header(2, 2).join(",");
        assert_eq!(
            h,
            "t,y1,y2,x1,x2,Ud,Ua,cmax,filter_active,inject,d1hat,d2hat,bhat,set_size,eta,V,beta_min,h1,h2,norm2"
        );
    }

    #[test]
    fn empty_result_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let r = RunResult { n: 2, m: 2, ..Default::default() };
        emit_traces(&r, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(std::fs::read_to_string(dir.path().join("z.txt")).unwrap(), "");
    }

    #[test]
    fn nominal_mode_never_filters() {
        let r = run_scenario(&short(Mode::Nominal)).unwrap();
        assert!(r.summary.fault.is_none(), "{:?}", r.summary.fault);
        assert_eq!(r.records.len(), 21);
        for rec in &r.records {
            assert_eq!(rec.u_a, rec.u_d);
            assert!(rec.eta.abs() <= 1e-12 * rec.u_d.abs().max(1.0));
        }
        assert!(r.summary.fault.is_none());
    }

    #[test]
    fn open_loop_applies_no_input() {
        let r = run_scenario(&short(Mode::OpenLoop)).unwrap();
        assert!(r.records.iter().all(|rec| rec.u_a == 0.0));
    }

    #[test]
    fn refinement_rejects_single_level() {
        assert!(refinement_study(&short(Mode::Nominal), 1).is_err());
    }

    #[test]
    fn zero_initial_data_stay_at_rest() {
        let mut c = short(Mode::Nominal);
        c.initial = InitialConfig { z: Profile::Zero, w: Profile::Zero, x: vec![0.0, 0.0], y: vec![0.0, 0.0] };
        let r = run_scenario(&c).unwrap();
        assert!(r.records.iter().all(|rec| rec.norm2 == 0.0 && rec.u_a == 0.0));
    }
}
