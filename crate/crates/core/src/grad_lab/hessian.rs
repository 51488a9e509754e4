use babelkit_numerics::{power_iteration_extremes, symmetric_eigenvalues, Matrix};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabError, Result};
use crate::seed::stream_rng;

/// Constructed curvature pair `H_det`, `H_align`.
///
/// `H_det = Q diag(det_eigenvalues) Q^T`. `H_align = floor * I + sharpness *
/// sum_k u_k u_k^T` where `u_k` is the `k`-th top eigenvector of `H_det`
/// rotated by `misalignment_deg` toward the `k`-th bottom eigenvector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HessianSpec {
    pub det_eigenvalues: Vec<f64>,
    /// Seed of a random orthogonal basis; the standard basis when absent.
    #[serde(default)]
    pub basis_seed: Option<u64>,
    pub align_floor: f64,
    pub align_sharpness: f64,
    #[serde(default = "one")]
    pub align_rank: usize,
    pub misalignment_deg: f64,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub lambda: f64,
    pub kappa: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningConfig {
    pub spec: HessianSpec,
    pub lambdas: Vec<f64>,
}

fn orthogonal(n: usize, seed: Option<u64>) -> Vec<Vec<f64>> {
    let Some(seed) = seed else {
        return (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
    };
    let mut rng = stream_rng(seed, 0xba5e);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    cols
}

fn outer_sum(n: usize, terms: &[(f64, &[f64])]) -> Matrix {
    Matrix::from_fn(n, |i, j| terms.iter().map(|(w, v)| w * v[i] * v[j]).sum())
}

impl HessianSpec {
    pub fn dim(&self) -> usize {
        self.det_eigenvalues.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if n == 0 {
            return Err(LabError::Spec("empty spectrum".into()));
        }
        if self
            .det_eigenvalues
            .iter()
            .any(|&e| !(e > 0.0 && e.is_finite()))
        {
            return Err(LabError::NotPositiveDefinite("H_det"));
        }
        if !(self.align_floor > 0.0 && self.align_floor.is_finite()) {
            return Err(LabError::NotPositiveDefinite("H_align"));
        }
        if !(self.align_sharpness >= 0.0 && self.align_sharpness.is_finite()) {
            return Err(LabError::Spec("sharpness must be finite and >= 0".into()));
        }
        if 2 * self.align_rank > n {
            return Err(LabError::Spec(format!(
                "rank {} needs dimension >= {}",
                self.align_rank,
                2 * self.align_rank
            )));
        }
        if !self.misalignment_deg.is_finite() {
            return Err(LabError::Spec("angle must be finite".into()));
        }
        Ok(())
    }

    /// `(H_det, H_align)`.
    pub fn matrices(&self) -> Result<(Matrix, Matrix)> {
        self.validate()?;
        let n = self.dim();
        let q = orthogonal(n, self.basis_seed);
        let det_terms: Vec<(f64, &[f64])> = self
            .det_eigenvalues
            .iter()
            .zip(&q)
            .map(|(&e, v)| (e, v.as_slice()))
            .collect();
        let h_det = outer_sum(n, &det_terms);

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.det_eigenvalues[b].total_cmp(&self.det_eigenvalues[a]));
        let theta = self.misalignment_deg.to_radians();
        let dirs: Vec<Vec<f64>> = (0..self.align_rank)
            .map(|k| {
                let (top, bottom) = (&q[order[k]], &q[order[n - 1 - k]]);
                top.iter()
                    .zip(bottom)
                    .map(|(t, b)| theta.cos() * t + theta.sin() * b)
                    .collect()
            })
            .collect();
        let align_terms: Vec<(f64, &[f64])> = dirs
            .iter()
            .map(|v| (self.align_sharpness, v.as_slice()))
            .collect();
        let h_align = outer_sum(n, &align_terms).add_scaled(&Matrix::identity(n), self.align_floor);
        Ok((h_det, h_align))
    }

    pub fn combined(&self, lambda: f64) -> Result<Matrix> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(LabError::Spec(format!(
                "lambda {lambda} must be finite and >= 0"
            )));
        }
        let (d, a) = self.matrices()?;
        Ok(d.add_scaled(&a, lambda))
    }
}

fn extremes_dense(m: &Matrix) -> Result<(f64, f64)> {
    let eig = symmetric_eigenvalues(m)?;
    Ok((eig[eig.len() - 1], eig[0]))
}

fn finish(lambda: f64, lambda_max: f64, lambda_min: f64) -> Result<Conditioning> {
    if !(lambda_min > 0.0) {
        return Err(LabError::NotPositiveDefinite("H_det + lambda H_align"));
    }
    Ok(Conditioning {
        lambda,
        kappa: lambda_max / lambda_min,
        lambda_max,
        lambda_min,
    })
}

/// `kappa(H_det + lambda H_align)`: dense Jacobi up to dimension 8, power
/// iteration above.
pub fn condition_number(spec: &HessianSpec, lambda: f64) -> Result<Conditioning> {
    if spec.dim() <= 8 {
        let h = spec.combined(lambda)?;
        let (hi, lo) = extremes_dense(&h)?;
        finish(lambda, hi, lo)
    } else {
        condition_number_power(spec, lambda)
    }
}

pub fn condition_number_power(spec: &HessianSpec, lambda: f64) -> Result<Conditioning> {
    let h = spec.combined(lambda)?;
    let e = power_iteration_extremes(|v| h.matvec(v), spec.dim(), 1_000_000, 1e-10)?;
    finish(lambda, e.lambda_max, e.lambda_min)
}

/// Lower bound on `kappa` from Weyl's inequalities on the two summands.
pub fn weyl_lower_bound(spec: &HessianSpec, lambda: f64) -> Result<f64> {
    let (d, a) = spec.matrices()?;
    let (dmax, dmin) = extremes_dense(&d)?;
    let (amax, amin) = extremes_dense(&a)?;
    let (amax, amin) = (lambda * amax, lambda * amin);
    let hi = (dmax + amin).max(dmin + amax);
    let lo = (dmin + amax).min(dmax + amin);
    Ok(hi / lo)
}

pub fn conditioning_sweep(spec: &HessianSpec, lambdas: &[f64]) -> Result<Vec<Conditioning>> {
    lambdas.iter().map(|&l| condition_number(spec, l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(angle: f64, sharp: f64) -> HessianSpec {
        HessianSpec {
            det_eigenvalues: vec![10.0, 1.0],
            basis_seed: None,
            align_floor: 1.0,
            align_sharpness: sharp,
            align_rank: 1,
            misalignment_deg: angle,
        }
    }

    #[test]
    fn zero_lambda_is_det_conditioning() {
        assert!((condition_number(&spec(45.0, 100.0), 0.0).unwrap().kappa - 10.0).abs() < 1e-12);
    }

    #[test]
    fn commuting_identity_alignment() {
        let c = condition_number(&spec(0.0, 0.0), 1.0).unwrap();
        assert!((c.kappa - 5.5).abs() < 1e-12);
    }

    #[test]
    fn misaligned_sharp_direction_worsens_conditioning() {
        let k: Vec<f64> = conditioning_sweep(&spec(45.0, 100.0), &[0.0, 0.5, 1.0, 2.0, 4.0])
            .unwrap()
            .iter()
            .map(|c| c.kappa)
            .collect();
        assert!(k.windows(2).all(|w| w[1] > w[0]), "{k:?}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(45.0, 100.0);
        s.det_eigenvalues[1] = 0.0;
        assert!(matches!(
            condition_number(&s, 1.0),
            Err(LabError::NotPositiveDefinite(_))
        ));
        let mut s = spec(45.0, 100.0);
        s.align_rank = 2;
        assert!(s.validate().is_err());
        assert!(condition_number(&spec(45.0, 1.0), -1.0).is_err());
    }

    #[test]
    fn rotated_basis_keeps_spectrum() {
        let mut s = spec(30.0, 5.0);
        s.det_eigenvalues = vec![7.0, 3.0, 2.0, 0.5];
        s.basis_seed = Some(11);
        let (d, a) = s.matrices().unwrap();
        assert!(d.max_asymmetry() < 1e-12 && a.max_asymmetry() < 1e-12);
        let e = symmetric_eigenvalues(&d).unwrap();
        for (x, y) in e.iter().zip([0.5, 2.0, 3.0, 7.0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
