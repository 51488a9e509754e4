//! Small dense symmetric matrices: a cyclic Jacobi eigensolver and
//! power iteration for extreme eigenvalues.

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};

/// Square row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(NumericsError::DataLength {
                shape: vec![n, n],
                expected: n * n,
                actual: data.len(),
            });
        }
        Ok(Self { n, data })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..n * n).map(|k| f(k / n, k % n)).collect();
        Self { n, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diagonal(values: &[f64]) -> Self {
        Self::from_fn(values.len(), |i, j| if i == j { values[i] } else { 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.n, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Self {
        let n = self.n;
        Self::from_fn(n, |i, j| {
            (0..n).map(|k| self.get(i, k) * other.get(k, j)).sum()
        })
    }

    pub fn add_scaled(&self, other: &Matrix, factor: f64) -> Self {
        Self::from_fn(self.n, |i, j| self.get(i, j) + factor * other.get(i, j))
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.data[i * self.n..(i + 1) * self.n]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// All eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    let n = m.n;
    let scale = m
        .data
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    if m.max_asymmetry() > 1e-12 * scale {
        return Err(NumericsError::InvalidArgument(
            "matrix is not symmetric".into(),
        ));
    }
    let mut a = m.data.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    Ok(eig)
}

/// Extreme eigenvalues of a symmetric positive definite linear map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extremes {
    pub lambda_max: f64,
    pub lambda_min: f64,
}

impl Extremes {
    pub fn condition_number(&self) -> f64 {
        self.lambda_max / self.lambda_min
    }
}

/// Estimate the largest and smallest eigenvalues of `apply` by power
/// iteration, the smallest via the shifted map `lambda_max * I - A`.
///
/// Stops once the eigen-residual `|Av - lv|` falls below `tol * max(1, |l|)`.
pub fn power_iteration_extremes<F>(apply: F, dim: usize, iters: usize, tol: f64) -> Result<Extremes>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if dim == 0 {
        return Err(NumericsError::InvalidArgument(
            "dimension must be at least 1".into(),
        ));
    }
    let lambda_max = dominant_eigenvalue(&apply, dim, iters, tol)?;
    let shifted = |v: &[f64]| -> Vec<f64> {
        let av = apply(v);
        v.iter().zip(av).map(|(x, y)| lambda_max * x - y).collect()
    };
    let gap = dominant_eigenvalue(&shifted, dim, iters, tol)?;
    Ok(Extremes {
        lambda_max,
        lambda_min: lambda_max - gap,
    })
}

fn dominant_eigenvalue<F>(apply: &F, dim: usize, iters: usize, tol: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    // Deterministic start with generic components along every axis.
    let mut v: Vec<f64> = (0..dim)
        .map(|i| 1.0 + (i as f64 + 1.0).sqrt() * 0.1)
        .collect();
    normalize(&mut v);
    let mut residual = f64::INFINITY;
    for _ in 0..iters.max(1) {
        let av = apply(&v);
        let lambda: f64 = v.iter().zip(&av).map(|(a, b)| a * b).sum();
        residual = av
            .iter()
            .zip(&v)
            .map(|(a, x)| (a - lambda * x).powi(2))
            .sum::<f64>()
            .sqrt();
        if !residual.is_finite() {
            break;
        }
        if residual <= tol * lambda.abs().max(1.0) {
            return Ok(lambda);
        }
        let norm = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = av.into_iter().map(|x| x / norm).collect();
    }
    Err(NumericsError::NoConvergence { iters, residual })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_extremes() {
        let m = Matrix::identity(4);
        let e = power_iteration_extremes(|v| m.matvec(v), 4, 100, 1e-12).unwrap();
        assert_eq!((e.lambda_max, e.lambda_min), (1.0, 1.0));
    }

    #[test]
    fn diagonal_extremes() {
        let m = Matrix::diagonal(&[10.0, 1.0]);
        let e = power_iteration_extremes(|v| m.matvec(v), 2, 10_000, 1e-12).unwrap();
        assert!((e.lambda_max - 10.0).abs() < 1e-10);
        assert!((e.lambda_min - 1.0).abs() < 1e-10);
    }

    #[test]
    fn non_convergence_reports_residual() {
        // Rotation by 90 degrees has no real dominant eigenvector.
        let m = Matrix::new(2, vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        let err = power_iteration_extremes(|v| m.matvec(v), 2, 50, 1e-12).unwrap_err();
        match err {
            NumericsError::NoConvergence { iters, residual } => {
                assert_eq!(iters, 50);
                assert!(residual > 0.5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jacobi_two_by_two_closed_form() {
        let m = Matrix::new(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = symmetric_eigenvalues(&m).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-14 && (e[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn jacobi_rejects_asymmetric() {
        let m = Matrix::new(2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(symmetric_eigenvalues(&m).is_err());
    }

    #[test]
    fn jacobi_preserves_trace_and_determinant() {
        let m = Matrix::new(3, vec![4.0, 1.0, -2.0, 1.0, 3.0, 0.5, -2.0, 0.5, 6.0]).unwrap();
        let e = symmetric_eigenvalues(&m).unwrap();
        let trace: f64 = e.iter().sum();
        assert!((trace - 13.0).abs() < 1e-12);
        let det = 4.0 * (3.0 * 6.0 - 0.25) - 1.0 * (6.0 + 1.0) + (-2.0) * (0.5 + 6.0);
        assert!((e.iter().product::<f64>() - det).abs() < 1e-10);
    }
}
