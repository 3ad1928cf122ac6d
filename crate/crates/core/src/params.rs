//! Plant constants, the uncertain parameter triple and its box, and the
//! polynomial actuator nonlinearities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// The uncertain triple: in-domain couplings `d1`, `d2` and input gain `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Theta {
    pub d1: f64,
    pub d2: f64,
    pub b: f64,
}

impl Theta {
    pub fn new(d1: f64, d2: f64, b: f64) -> Self {
        Self { d1, d2, b }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.d1, self.d2, self.b]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    /// Max-norm distance.
    pub fn distance(&self, other: &Theta) -> f64 {
        (self.d1 - other.d1)
            .abs()
            .max((self.d2 - other.d2).abs())
            .max((self.b - other.b).abs())
    }
}

/// Known bounds on the uncertain triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaBox {
    pub d1: [f64; 2],
    pub d2: [f64; 2],
    pub b: [f64; 2],
}

impl ThetaBox {
    pub fn axes(&self) -> [[f64; 2]; 3] {
        [self.d1, self.d2, self.b]
    }

    pub fn contains(&self, th: &Theta, tol: f64) -> bool {
        th.as_array()
            .iter()
            .zip(self.axes())
            .all(|(v, [lo, hi])| *v >= lo - tol && *v <= hi + tol)
    }

    pub fn clamp(&self, th: &Theta) -> Theta {
        let a = th.as_array();
        let ax = self.axes();
        Theta::from_array([0, 1, 2].map(|i| a[i].clamp(ax[i][0], ax[i][1])))
    }

    /// Grid over the box with the given pitch per axis (end points included).
    pub fn grid(&self, pitch: f64) -> Vec<Theta> {
        let axis = |[lo, hi]: [f64; 2]| -> Vec<f64> {
            let steps = ((hi - lo) / pitch + 1e-9).floor() as usize;
            let mut v: Vec<f64> = (0..=steps).map(|k| lo + k as f64 * pitch).collect();
            if hi - v[v.len() - 1] > 1e-9 {
                v.push(hi);
            }
            v
        };
        let mut out = Vec::new();
        for &d1 in &axis(self.d1) {
            for &d2 in &axis(self.d2) {
                for &b in &axis(self.b) {
                    out.push(Theta::new(d1, d2, b));
                }
            }
        }
        out
    }

    /// `points` evenly spaced samples per axis.
    pub fn sample(&self, points: usize) -> Vec<Theta> {
        let lin = |[lo, hi]: [f64; 2]| -> Vec<f64> {
            if points <= 1 || hi == lo {
                return vec![lo];
            }
            (0..points).map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64).collect()
        };
        let mut out = Vec::new();
        for &d1 in &lin(self.d1) {
            for &d2 in &lin(self.d2) {
                for &b in &lin(self.b) {
                    out.push(Theta::new(d1, d2, b));
                }
            }
        }
        out
    }
}

/// `coef * x1^powers[0] * x2^powers[1] * ...`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

/// A polynomial in the actuator states.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Polynomial {
    #[serde(default)]
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn zero() -> Self {
        Self { terms: vec![] }
    }

    pub fn monomial(coef: f64, powers: &[u32]) -> Self {
        Self { terms: vec![Monomial { coef, powers: powers.to_vec() }] }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.powers
                    .iter()
                    .enumerate()
                    .fold(t.coef, |acc, (k, &p)| acc * x.get(k).copied().unwrap_or(0.0).powi(p as i32))
            })
            .sum()
    }

    /// Partial derivative with respect to `x[k]`.
    pub fn partial(&self, x: &[f64], k: usize) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.powers.get(k).copied().unwrap_or(0) > 0)
            .map(|t| {
                t.powers.iter().enumerate().fold(t.coef, |acc, (j, &p)| {
                    let xj = x.get(j).copied().unwrap_or(0.0);
                    if j == k {
                        acc * p as f64 * xj.powi(p as i32 - 1)
                    } else {
                        acc * xj.powi(p as i32)
                    }
                })
            })
            .sum()
    }

    /// Highest variable index the polynomial depends on, plus one.
    pub fn arity(&self) -> usize {
        self.terms
            .iter()
            .map(|t| t.powers.iter().rposition(|&p| p > 0).map_or(0, |i| i + 1))
            .max()
            .unwrap_or(0)
    }

    pub fn vanishes_at_origin(&self) -> bool {
        self.terms.iter().all(|t| t.coef == 0.0 || t.powers.iter().any(|&p| p > 0))
    }
}

/// All plant constants including the true uncertain triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParameters {
    pub q1: f64,
    pub q2: f64,
    pub p: f64,
    pub theta: Theta,
    /// Last row of the companion matrix of the distal ODE (length n).
    pub l: Vec<f64>,
    /// Weights of the distal state entering the last actuator equation (length n).
    pub m_row: Vec<f64>,
    /// Weights of `z(1,t)` and its time derivatives in the last actuator equation (length m).
    pub qbar: Vec<f64>,
    /// Strict-feedback nonlinearities `f_1..f_m`.
    pub f: Vec<Polynomial>,
    pub theta_box: ThetaBox,
}

impl PlantParameters {
    pub fn n(&self) -> usize {
        self.l.len()
    }

    pub fn m(&self) -> usize {
        self.f.len()
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        linalg::companion(&self.l)
    }

    pub fn b_vector(&self, b: f64) -> DVector<f64> {
        linalg::input_vector(self.n(), b)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.q1 > 0.0 && self.q2 > 0.0) {
            return bad(format!("transport speeds must be positive (q1 = {}, q2 = {})", self.q1, self.q2));
        }
        if self.p == 0.0 {
            return bad("boundary coupling p must be nonzero".into());
        }
        if self.n() == 0 {
            return bad("distal ODE needs at least one state".into());
        }
        if !(1..=2).contains(&self.m()) {
            return bad(format!("actuator chain length must be 1 or 2, got {}", self.m()));
        }
        if self.m_row.len() != self.n() {
            return bad(format!("M has length {}, expected {}", self.m_row.len(), self.n()));
        }
        if self.qbar.len() != self.m() {
            return bad(format!("qbar has length {}, expected {}", self.qbar.len(), self.m()));
        }
        for (j, fj) in self.f.iter().enumerate() {
            if fj.arity() > j + 1 {
                return bad(format!("f{} may only depend on x1..x{}", j + 1, j + 1));
            }
            if !fj.vanishes_at_origin() {
                return bad(format!("f{} must vanish at the origin", j + 1));
            }
        }
        let bx = &self.theta_box;
        for (name, [lo, hi]) in [("d1", bx.d1), ("d2", bx.d2), ("b", bx.b)] {
            if !(lo <= hi) {
                return bad(format!("empty interval for {name}: [{lo}, {hi}]"));
            }
        }
        if !(bx.b[0] > 0.0) {
            return bad("lower bound of b must be positive".into());
        }
        if !bx.contains(&self.theta, 1e-12) {
            return bad("true parameters lie outside the parameter box".into());
        }
        // The explicit kernels are real-valued only for these signs.
        let signs_ok = |d1: f64, d2: f64| d1 / self.p >= 0.0 && d2 * self.p >= 0.0;
        if !(signs_ok(bx.d1[0], bx.d2[0]) && signs_ok(bx.d1[1], bx.d2[1])) {
            return bad("kernel closed forms need d1/p >= 0 and p*d2 >= 0 across the box".into());
        }
        Ok(())
    }
}

/// Uniform space-time grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimGrid {
    pub nx: usize,
    pub dt: f64,
}

impl SimGrid {
    pub fn dx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn check(&self, params: &PlantParameters) -> Result<()> {
        if self.nx < 6 {
            return Err(Error::InvalidParameter(format!("nx must be at least 6, got {}", self.nx)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter("dt must be positive".into()));
        }
        let lhs = self.dt * params.q1.max(params.q2);
        if lhs > self.dx() * (1.0 + 1e-12) {
            return Err(Error::Cfl { lhs, dx: self.dx() });
        }
        Ok(())
    }
}

/// The benchmark scenario: n = m = 2 with quadratic actuator nonlinearities.
pub fn reference_parameters() -> PlantParameters {
    PlantParameters {
        q1: 1.0,
        q2: 1.0,
        p: 1.0,
        theta: Theta::new(0.8, 1.0, 1.0),
        l: vec![1.0, -0.5],
        m_row: vec![0.1, 0.3],
        qbar: vec![1.0, 1.0],
        f: vec![Polynomial::monomial(1.0, &[2]), Polynomial::monomial(1.0, &[1, 1])],
        theta_box: ThetaBox { d1: [0.2, 1.2], d2: [0.2, 1.2], b: [0.5, 1.5] },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_eval_and_partials() {
        let f = Polynomial::monomial(1.0, &[1, 1]);
        assert_eq!(f.eval(&[2.0, 3.0]), 6.0);
        assert_eq!(f.partial(&[2.0, 3.0], 0), 3.0);
        assert_eq!(f.partial(&[2.0, 3.0], 1), 2.0);
        let g = Polynomial::monomial(1.0, &[2]);
        assert_eq!(g.partial(&[-3.0], 0), -6.0);
        assert_eq!(g.arity(), 1);
        assert!(!Polynomial::monomial(1.0, &[]).vanishes_at_origin());
    }

    #[test]
    fn grid_has_expected_size() {
        let bx = reference_parameters().theta_box;
        let g = bx.grid(0.2);
        assert_eq!(g.len(), 216);
        assert!(g.iter().any(|t| (t.d1 - 0.8).abs() < 1e-12 && (t.d2 - 1.0).abs() < 1e-12));
        assert!(!g.iter().any(|t| (t.b - 1.0).abs() < 1e-12));
    }

    #[test]
    fn reference_parameters_are_valid() {
        reference_parameters().check().unwrap();
        let grid = SimGrid { nx: 500, dt: 1e-3 };
        grid.check(&reference_parameters()).unwrap();
        let bad = SimGrid { nx: 500, dt: 3e-3 };
        assert!(matches!(bad.check(&reference_parameters()), Err(Error::Cfl { .. })));
    }
}
