use babelkit_numerics::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::tasks::ModalityLoss;
use super::{LabError, Result};

/// Per-modality gradients over shared parameters and their pairwise
/// geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub modalities: Vec<String>,
    pub gradients: Vec<Vec<f64>>,
    /// `inner[i][j] = <g_i, g_j>`.
    pub inner: Vec<Vec<f64>>,
    /// Zero when either gradient vanishes.
    pub cosine: Vec<Vec<f64>>,
    /// `|sum_m g_m|^2`.
    pub joint_norm_sq: f64,
    /// `sum_m |g_m|^2`.
    pub sum_sq_norms: f64,
    /// `sum_{i != j} <g_i, g_j>`.
    pub cross_terms: f64,
}

impl GradientReport {
    pub fn from_gradients(modalities: Vec<String>, gradients: Vec<Vec<f64>>) -> Result<Self> {
        if gradients.is_empty() || modalities.len() != gradients.len() {
            return Err(LabError::Config(
                "one gradient per modality is required".into(),
            ));
        }
        let dim = gradients[0].len();
        if gradients.iter().any(|g| g.len() != dim) {
            return Err(LabError::Config("gradients differ in length".into()));
        }
        for (m, g) in modalities.iter().zip(&gradients) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(LabError::NonFiniteGradient(m.clone()));
            }
        }
        let k = gradients.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let inner: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| dot(&gradients[i], &gradients[j])).collect())
            .collect();
        let cosine = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        let d = (inner[i][i] * inner[j][j]).sqrt();
                        if d == 0.0 {
                            0.0
                        } else {
                            inner[i][j] / d
                        }
                    })
                    .collect()
            })
            .collect();
        let total: Vec<f64> = (0..dim)
            .map(|p| gradients.iter().map(|g| g[p]).sum())
            .collect();
        let joint_norm_sq = dot(&total, &total);
        let sum_sq_norms = (0..k).map(|i| inner[i][i]).sum();
        let cross_terms = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| inner[i][j])
            .sum();
        Ok(Self {
            modalities,
            gradients,
            inner,
            cosine,
            joint_norm_sq,
            sum_sq_norms,
            cross_terms,
        })
    }

    /// `| |sum g|^2 - (sum |g|^2 + cross) |` relative to `max(|sum g|^2, sum |g|^2)`.
    pub fn decomposition_error(&self) -> f64 {
        let rhs = self.sum_sq_norms + self.cross_terms;
        let scale = self
            .joint_norm_sq
            .abs()
            .max(self.sum_sq_norms)
            .max(f64::MIN_POSITIVE);
        (self.joint_norm_sq - rhs).abs() / scale
    }

    /// Mean cosine over unordered pairs.
    pub fn mean_pairwise_cosine(&self) -> Result<f64> {
        let k = self.modalities.len();
        if k < 2 {
            return Err(LabError::NoPairs);
        }
        let mut total = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                total += self.cosine[i][j];
            }
        }
        Ok(total / (k * (k - 1) / 2) as f64)
    }
}

fn gradient_of(task: &dyn ModalityLoss, shared: &[Tensor]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<_> = shared.iter().map(|t| tape.parameter(t.clone())).collect();
    let loss = task.record(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut flat = Vec::new();
    for v in &vars {
        let g = grads
            .get(tape.param_id(*v).expect("parameter"))
            .expect("gradient");
        flat.extend_from_slice(g.data());
    }
    Ok(flat)
}

/// Full-batch gradient of every task with respect to `shared`.
pub fn per_modality_gradients(
    shared: &[Tensor],
    tasks: &[&dyn ModalityLoss],
) -> Result<GradientReport> {
    if tasks.is_empty() {
        return Err(LabError::Config("no tasks".into()));
    }
    let grads = tasks
        .iter()
        .map(|t| gradient_of(*t, shared))
        .collect::<Result<Vec<_>>>()?;
    GradientReport::from_gradients(
        tasks.iter().map(|t| t.modality().to_string()).collect(),
        grads,
    )
}

/// Spread of normalized update directions when each step uses one task's
/// gradient, cycling through `tasks`: `1 - |mean u_t|^2` over `steps`
/// steps of size `lr`.
pub fn update_direction_variance(
    shared: &[Tensor],
    tasks: &[&dyn ModalityLoss],
    steps: usize,
    lr: f64,
) -> Result<f64> {
    if tasks.is_empty() || steps == 0 {
        return Err(LabError::Config(
            "need at least one task and one step".into(),
        ));
    }
    let mut params: Vec<Tensor> = shared.to_vec();
    let dim: usize = params.iter().map(|t| t.len()).sum();
    let mut mean = vec![0.0; dim];
    for t in 0..steps {
        let task = tasks[t % tasks.len()];
        let g = gradient_of(task, &params)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFiniteGradient(task.modality().to_string()));
        }
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            mean.iter_mut()
                .zip(&g)
                .for_each(|(m, v)| *m += v / n / steps as f64);
        }
        let mut offset = 0;
        for p in &mut params {
            let len = p.len();
            let slice = &g[offset..offset + len];
            *p = Tensor::new(
                p.shape().to_vec(),
                p.data()
                    .iter()
                    .zip(slice)
                    .map(|(w, d)| w - lr * d)
                    .collect(),
            )?;
            offset += len;
        }
    }
    Ok(1.0 - mean.iter().map(|v| v * v).sum::<f64>())
}
