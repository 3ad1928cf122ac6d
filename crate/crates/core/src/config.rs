//! Scenario files: plant, initial data, gains, grid, run mode and the
//! identifier and filter settings, read from TOML.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::GainConfig;
use crate::error::{Error, Result};
use crate::filter::ExcitationConfig;
use crate::identifier::IdentifierConfig;
use crate::params::{reference_parameters, PlantParameters, SimGrid};
use crate::plant::PlantState;

/// Which loop to close.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OpenLoop,
    #[default]
    Nominal,
    Adaptive,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::OpenLoop => "open-loop",
            Mode::Nominal => "nominal",
            Mode::Adaptive => "adaptive",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open-loop" => Ok(Mode::OpenLoop),
            "nominal" => Ok(Mode::Nominal),
            "adaptive" => Ok(Mode::Adaptive),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected open-loop, nominal or adaptive)"))),
        }
    }
}

/// A spatial profile on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Profile {
    Zero,
    Constant { value: f64 },
    /// `amplitude * sin(wavenumber * pi * x)`.
    Sine { amplitude: f64, wavenumber: f64 },
    /// `amplitude * cos(wavenumber * pi * x)`.
    Cosine { amplitude: f64, wavenumber: f64 },
    /// `amplitude * cos²(pi (x - center) / width)` inside `|x - center| < width / 2`, zero outside.
    Bump { amplitude: f64, center: f64, width: f64 },
    /// Uniformly spaced samples over `[0, 1]`, linearly interpolated.
    Samples { values: Vec<f64> },
}

impl Profile {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Profile::Zero => 0.0,
            Profile::Constant { value } => *value,
            Profile::Sine { amplitude, wavenumber } => amplitude * (wavenumber * PI * x).sin(),
            Profile::Cosine { amplitude, wavenumber } => amplitude * (wavenumber * PI * x).cos(),
            Profile::Bump { amplitude, center, width } => {
                let s = (x - center) / width;
                if s.abs() < 0.5 {
                    amplitude * (PI * s).cos().powi(2)
                } else {
                    0.0
                }
            }
            Profile::Samples { values } => {
                let n = values.len() - 1;
                let pos = (x.clamp(0.0, 1.0) * n as f64).min(n as f64);
                let k = (pos.floor() as usize).min(n.saturating_sub(1));
                let frac = pos - k as f64;
                values[k] * (1.0 - frac) + values[(k + 1).min(n)] * frac
            }
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        match self {
            Profile::Samples { values } if values.len() < 2 => {
                Err(Error::Config(format!("initial.{name}: need at least two samples")))
            }
            Profile::Bump { width, .. } if !(*width > 0.0) => Err(Error::Config(format!("initial.{name}: bump width must be positive"))),
            _ => Ok(()),
        }
    }
}

/// Initial PDE profiles and ODE states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub z: Profile,
    pub w: Profile,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            z: Profile::Sine { amplitude: 2.0, wavenumber: 3.0 },
            w: Profile::Cosine { amplitude: 1.0, wavenumber: 2.0 },
            x: vec![1.0, -1.0],
            y: vec![5.0, 0.0],
        }
    }
}

impl InitialConfig {
    pub fn state(&self, nx: usize) -> PlantState {
        PlantState::from_fns(nx, |s| self.z.eval(s), |s| self.w.eval(s), &self.x, &self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AutoGains {
    Auto,
}

/// Explicit gains or `"auto"` to derive them from the thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainsSpec {
    Auto(AutoGains),
    Explicit(GainConfig),
}

impl Default for GainsSpec {
    fn default() -> Self {
        GainsSpec::Auto(AutoGains::Auto)
    }
}

fn default_nx() -> usize {
    500
}

fn default_dt() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_nx")]
    pub nx: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { nx: default_nx(), dt: default_dt() }
    }
}

impl GridConfig {
    pub fn sim_grid(&self) -> SimGrid {
        SimGrid { nx: self.nx, dt: self.dt }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub horizon: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { mode: Mode::Nominal, horizon: 20.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Overrides `cbar` of the gains when set.
    pub cbar: Option<f64>,
    /// Tolerance below zero tolerated by the safety monitor.
    pub tol_num: f64,
    pub excitation: ExcitationConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { cbar: None, tol_num: 1e-6, excitation: ExcitationConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Steps between field snapshots.
    pub snapshot_every: usize,
    /// Steps between target-state evaluations.
    pub diagnostics_every: usize,
    /// Resolution of the oracle-built `α` kernels; must divide `nx`. Picked automatically when absent.
    pub diagnostics_nx: Option<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, snapshot_every: 50, diagnostics_every: 10, diagnostics_nx: None }
    }
}

impl OutputConfig {
    /// The largest divisor of `nx` not above 100, unless configured.
    pub fn diagnostics_grid(&self, nx: usize) -> usize {
        self.diagnostics_nx.unwrap_or_else(|| (1..=nx.min(100)).rev().find(|d| nx.is_multiple_of(*d)).unwrap_or(1))
    }
}

/// A complete scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub plant: PlantParameters,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub gains: GainsSpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub identifier: IdentifierConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ScenarioConfig {
    /// The benchmark scenario with its published gains.
    pub fn reference() -> Self {
        Self {
            plant: reference_parameters(),
            initial: InitialConfig::default(),
            gains: GainsSpec::Explicit(GainConfig::reference()),
            grid: GridConfig::default(),
            run: RunConfig::default(),
            identifier: IdentifierConfig::default(),
            filter: FilterConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that can be checked without building kernels.
    pub fn check(&self) -> Result<()> {
        let p = &self.plant;
        p.check()?;
        self.grid.sim_grid().check(p)?;
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.initial.x.len() != p.m() {
            return cfg(format!("initial.x has {} entries, the actuator chain has {}", self.initial.x.len(), p.m()));
        }
        if self.initial.y.len() != p.n() {
            return cfg(format!("initial.y has {} entries, the distal ODE has {}", self.initial.y.len(), p.n()));
        }
        self.initial.z.check("z")?;
        self.initial.w.check("w")?;
        if !(self.run.horizon > 0.0) {
            return cfg("run.horizon must be positive".into());
        }
        if self.run.horizon < 2.0 / p.q2 {
            log::warn!("horizon {} is shorter than 2/q2; the control never acts on the distal ODE for long", self.run.horizon);
        }
        if let GainsSpec::Explicit(g) = &self.gains {
            if g.kappas.len() != p.n() || g.cs.len() != p.m() {
                return cfg(format!("gains need {} kappas and {} c values", p.n(), p.m()));
            }
        }
        if self.output.snapshot_every == 0 || self.output.diagnostics_every == 0 {
            return cfg("output cadences must be at least 1".into());
        }
        let d = self.output.diagnostics_grid(self.grid.nx);
        if d == 0 || !self.grid.nx.is_multiple_of(d) {
            return cfg(format!("output.diagnostics_nx = {d} must divide grid.nx = {}", self.grid.nx));
        }
        let ratio = self.identifier.period / self.grid.dt;
        if self.run.mode == Mode::Adaptive && (ratio - ratio.round()).abs() > 1e-6 * ratio {
            return cfg(format!("identifier.period = {} must be a multiple of dt = {}", self.identifier.period, self.grid.dt));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.run.horizon / self.grid.dt - 1e-9).ceil() as usize
    }

    pub fn initial_state(&self) -> PlantState {
        self.initial.state(self.grid.nx)
    }
}

/// Reads and checks a scenario file.
pub fn parse_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    ScenarioConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[plant]
q1 = 1.0
q2 = 1.0
p = 1.0
l = [1.0, -0.5]
m_row = [0.1, 0.3]
qbar = [1.0, 1.0]
theta = { d1 = 0.8, d2 = 1.0, b = 1.0 }
theta_box = { d1 = [0.2, 1.2], d2 = [0.2, 1.2], b = [0.5, 1.5] }

[[plant.f]]
terms = [{ coef = 1.0, powers = [2] }]

[[plant.f]]
terms = [{ coef = 1.0, powers = [1, 1] }]
"#;

    #[test]
    fn minimal_file_matches_reference() {
        let cfg = ScenarioConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.plant, reference_parameters());
        assert_eq!(cfg.initial, InitialConfig::default());
        assert_eq!(cfg.gains, GainsSpec::Auto(AutoGains::Auto));
        assert_eq!(cfg.output.snapshot_every, 50);
        assert_eq!(cfg.steps(), 20_000);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ScenarioConfig::reference();
        let back = ScenarioConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace("q1 = 1.0\n", "");
        let err = ScenarioConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("q1"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = format!("{MINIMAL}\n[run]\nmode = \"nominal\"\nhorizn = 3.0\n");
        let err = ScenarioConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("horizn") && err.contains("line"), "{err}");
    }

    #[test]
    fn cfl_violation_is_reported() {
        let text = format!("{MINIMAL}\n[grid]\nnx = 500\ndt = 0.01\n");
        let err = ScenarioConfig::from_toml(&text).unwrap_err();
        assert!(matches!(err, Error::Cfl { .. }), "{err}");
        assert!(err.to_string().contains("CFL"));
    }

    #[test]
    fn profiles_evaluate() {
        let s = Profile::Samples { values: vec![0.0, 2.0, 0.0] };
        assert_eq!(s.eval(0.25), 1.0);
        assert_eq!(s.eval(1.0), 0.0);
        let b = Profile::Bump { amplitude: 2.0, center: 0.5, width: 0.4 };
        assert_eq!(b.eval(0.5), 2.0);
        assert_eq!(b.eval(0.2), 0.0);
        let text = format!("{MINIMAL}\n[initial]\nz = {{ kind = \"zero\" }}\nw = {{ kind = \"samples\", values = [1.0, 0.0] }}\nx = [1.0, 0.0]\ny = [1.0, 0.0]\n");
        let cfg = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.initial.w.eval(0.5), 0.5);
    }

    #[test]
    fn explicit_gains_parse() {
        let text = format!("{MINIMAL}\n[gains]\nkappas = [30.0, 10.0]\ncs = [38.0, 20.0]\ncbar = 20.0\n");
        let cfg = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.gains, GainsSpec::Explicit(GainConfig::reference()));
        let auto = format!("gains = \"auto\"\n{MINIMAL}");
        assert_eq!(ScenarioConfig::from_toml(&auto).unwrap().gains, GainsSpec::Auto(AutoGains::Auto));
    }
}
