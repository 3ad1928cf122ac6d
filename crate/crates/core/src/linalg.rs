//! Small dense linear algebra: companion matrices, the matrix exponential
//! and the continuous Lyapunov equation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Companion matrix with ones on the superdiagonal and `last_row` at the bottom.
pub fn companion(last_row: &[f64]) -> DMatrix<f64> {
    let n = last_row.len();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        a[(i, i + 1)] = 1.0;
    }
    for (j, &v) in last_row.iter().enumerate() {
        a[(n - 1, j)] += v;
    }
    a
}

/// `b * e_n`, the input vector of the distal ODE.
pub fn input_vector(n: usize, b: f64) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[n - 1] = b;
    v
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled = a * scale;
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..40 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.amax() <= 1e-17 * sum.amax() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Solves `A^T P + P A = -Q` through the vectorized `n^2` linear system.
pub fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    // vec(A^T P) = (I ⊗ A^T) vec(P), vec(P A) = (A^T ⊗ I) vec(P)
    let big = eye.kronecker(&a.transpose()) + a.transpose().kronecker(&eye);
    let rhs = -DVector::from_column_slice(q.as_slice());
    let sol = big
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidParameter("Lyapunov operator is singular".into()))?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().symmetric_eigen();
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn companion_layout() {
        let a = companion(&[1.0, -0.5]);
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, -0.5]));
    }

    #[test]
    fn expm_of_rotation_generator() {
        let t = 2.3_f64;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, t, -t, 0.0]);
        let e = expm(&a);
        let expect = DMatrix::from_row_slice(2, 2, &[t.cos(), t.sin(), -t.sin(), t.cos()]);
        assert!((e - expect).amax() < 1e-12);
    }

    #[test]
    fn expm_matches_long_series() {
        let a = companion(&[1.0, -0.5]) * 1.7;
        let mut series = DMatrix::identity(2, 2);
        let mut term = DMatrix::identity(2, 2);
        for k in 1..200 {
            term = &term * &a / k as f64;
            series += &term;
        }
        assert!((expm(&a) - series).amax() < 1e-12);
    }

    #[test]
    fn scalar_lyapunov() {
        let p = lyapunov(&DMatrix::from_element(1, 1, -1.0), &DMatrix::identity(1, 1)).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lyapunov_residual_small() {
        let a = DMatrix::from_row_slice(2, 2, &[-30.0, 1.0, 0.0, -10.0]);
        let q = DMatrix::identity(2, 2);
        let p = lyapunov(&a, &q).unwrap();
        let res = a.transpose() * &p + &p * &a + &q;
        assert!(res.amax() < 1e-12);
    }
}
