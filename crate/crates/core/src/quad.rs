//! Quadrature, finite-difference stencils and interpolation on uniform grids.
//!
//! Every routine here assumes samples `f[0..=n]` at `x_i = x_0 + i*h`.

/// Composite trapezoid rule.
pub fn trapezoid(f: &[f64], h: f64) -> f64 {
    match f.len() {
        0 | 1 => 0.0,
        len => {
            let inner: f64 = f[1..len - 1].iter().sum();
            h * (0.5 * (f[0] + f[len - 1]) + inner)
        }
    }
}

/// Trapezoid rule applied to the pointwise product `a*b`.
pub fn trapezoid_product(a: &[f64], b: &[f64], h: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let len = a.len();
    if len < 2 {
        return 0.0;
    }
    let mut acc = 0.5 * (a[0] * b[0] + a[len - 1] * b[len - 1]);
    for i in 1..len - 1 {
        acc += a[i] * b[i];
    }
    h * acc
}

/// Weights of the composite Simpson rule over `n` intervals.
///
/// For odd `n >= 3` the last three intervals use the 3/8 rule; `n = 1` falls
/// back to the trapezoid rule.
pub fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; n + 1];
    match n {
        0 => {}
        1 => {
            w[0] = 0.5 * h;
            w[1] = 0.5 * h;
        }
        _ => {
            let even = if n.is_multiple_of(2) { n } else { n - 3 };
            let mut i = 0;
            while i < even {
                w[i] += h / 3.0;
                w[i + 1] += 4.0 * h / 3.0;
                w[i + 2] += h / 3.0;
                i += 2;
            }
            if n % 2 == 1 {
                let s = even;
                let c = 3.0 * h / 8.0;
                w[s] += c;
                w[s + 1] += 3.0 * c;
                w[s + 2] += 3.0 * c;
                w[s + 3] += c;
            }
        }
    }
    w
}

/// Composite Simpson rule (3/8 closure for odd interval counts).
pub fn simpson(f: &[f64], h: f64) -> f64 {
    if f.len() < 2 {
        return 0.0;
    }
    let w = simpson_weights(f.len() - 1, h);
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

/// First and second derivatives by fourth-order finite differences.
///
/// Centered five-point stencils in the interior, one-sided six-point
/// stencils at the two nodes nearest each end. Needs at least six samples.
pub fn derivatives4(f: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    let len = f.len();
    assert!(len >= 6, "fourth-order stencils need at least six samples");
    let mut d1 = vec![0.0; len];
    let mut d2 = vec![0.0; len];
    let c1 = 1.0 / (12.0 * h);
    let c2 = 1.0 / (12.0 * h * h);
    for i in 2..len - 2 {
        d1[i] = c1 * (f[i - 2] - 8.0 * f[i - 1] + 8.0 * f[i + 1] - f[i + 2]);
        d2[i] = c2 * (-f[i - 2] + 16.0 * f[i - 1] - 30.0 * f[i] + 16.0 * f[i + 1] - f[i + 2]);
    }
    let fwd = |g: &dyn Fn(usize) -> f64, sign: f64| -> [f64; 4] {
        [
            sign * c1 * (-25.0 * g(0) + 48.0 * g(1) - 36.0 * g(2) + 16.0 * g(3) - 3.0 * g(4)),
            sign * c1 * (-3.0 * g(0) - 10.0 * g(1) + 18.0 * g(2) - 6.0 * g(3) + g(4)),
            c2 * (45.0 * g(0) - 154.0 * g(1) + 214.0 * g(2) - 156.0 * g(3) + 61.0 * g(4)
                - 10.0 * g(5)),
            c2 * (10.0 * g(0) - 15.0 * g(1) - 4.0 * g(2) + 14.0 * g(3) - 6.0 * g(4) + g(5)),
        ]
    };
    let left = fwd(&|k| f[k], 1.0);
    let right = fwd(&|k| f[len - 1 - k], -1.0);
    d1[0] = left[0];
    d1[1] = left[1];
    d2[0] = left[2];
    d2[1] = left[3];
    d1[len - 1] = right[0];
    d1[len - 2] = right[1];
    d2[len - 1] = right[2];
    d2[len - 2] = right[3];
    (d1, d2)
}

/// Which end of the grid a one-sided stencil is anchored at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum End {
    Left,
    Right,
}

/// Spatial derivative of order 0, 1 or 2 at a grid end, second-order one-sided.
pub fn boundary_derivative(f: &[f64], h: f64, order: usize, end: End) -> f64 {
    boundary_stencil(f.len(), h, order, end).iter().map(|&(i, c)| c * f[i]).sum()
}

/// Node indices and weights of the stencil behind [`boundary_derivative`].
pub fn boundary_stencil(len: usize, h: f64, order: usize, end: End) -> Vec<(usize, f64)> {
    let at = |k: usize| match end {
        End::Left => k,
        End::Right => len - 1 - k,
    };
    let sign = match end {
        End::Left => 1.0,
        End::Right => -1.0,
    };
    let coefs: Vec<f64> = match order {
        0 => vec![1.0],
        1 => [-3.0, 4.0, -1.0].iter().map(|c| sign * c / (2.0 * h)).collect(),
        2 => [2.0, -5.0, 4.0, -1.0].iter().map(|c| c / (h * h)).collect(),
        _ => panic!("boundary stencils are provided up to order 2"),
    };
    coefs.into_iter().enumerate().map(|(k, c)| (at(k), c)).collect()
}

/// Local cubic Lagrange interpolation of samples on a uniform grid over [0, 1].
pub fn interpolate(f: &[f64], x: f64) -> f64 {
    let n = f.len() - 1;
    if n == 0 {
        return f[0];
    }
    let s = (x.clamp(0.0, 1.0)) * n as f64;
    if n < 3 {
        let i = (s.floor() as usize).min(n - 1);
        let a = s - i as f64;
        return f[i] * (1.0 - a) + f[i + 1] * a;
    }
    let i0 = ((s.floor() as isize) - 1).clamp(0, n as isize - 3) as usize;
    let mut acc = 0.0;
    for j in 0..4 {
        let mut l = 1.0;
        for k in 0..4 {
            if k != j {
                l *= (s - (i0 + k) as f64) / (j as f64 - k as f64);
            }
        }
        acc += l * f[i0 + j];
    }
    acc
}

/// Uniform nodes `i/n`, `i = 0..=n`.
pub fn nodes(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}
