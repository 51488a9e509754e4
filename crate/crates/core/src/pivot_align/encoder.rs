use babelkit_numerics::{PrecisionMode, Tape, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AlignError, Result};
use crate::lvsa::{fuse_on_tape, SelectedSet};
use crate::seed::stream_rng;

/// Shared two-layer encoder from an image vector to `n_z` visual tokens of
/// width `d_e`.
///
/// The first layer emits all tokens at once; the second refines each token.
/// When `fusion` is set the two layers form a 2-level pyramid whose fused
/// map is the encoder output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub dx: usize,
    pub nz: usize,
    pub de: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub fusion: Option<SelectedSet>,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl EncoderVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl Encoder {
    pub fn init(
        dx: usize,
        nz: usize,
        de: usize,
        fusion: Option<SelectedSet>,
        seed: u64,
    ) -> Result<Self> {
        if dx == 0 || nz == 0 || de == 0 {
            return Err(AlignError::Config(
                "encoder dimensions must be positive".into(),
            ));
        }
        if let Some(s) = &fusion {
            s.validate(2)?;
        }
        let mut rng = stream_rng(seed, 0xe2c);
        let mut gauss = |n: usize, sd: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    sd * g
                })
                .collect()
        };
        let w1 = Tensor::matrix(dx, nz * de, gauss(dx * nz * de, (2.0 / dx as f64).sqrt()))?;
        let w2 = Tensor::matrix(de, de, gauss(de * de, (1.0 / de as f64).sqrt()))?;
        Ok(Self {
            dx,
            nz,
            de,
            w1,
            b1: Tensor::full(&[nz * de], 0.1),
            w2,
            b2: Tensor::zeros(&[de]),
            fusion,
        })
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Flattened parameters in `w1, b1, w2, b2` order.
    pub fn flat(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.parameter(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        EncoderVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }

    /// Visual tokens `(N * n_z, d_e)` for images `x` of shape `(N, d_x)`.
    pub fn forward(&self, tape: &mut Tape, vars: &EncoderVars, x: Var, alpha: f64) -> Result<Var> {
        let n = tape.value(x)?.shape()[0];
        let h = tape.matmul(x, vars.w1)?;
        let h = tape.add(h, vars.b1)?;
        let h = tape.relu(h)?;
        let f1 = tape.reshape(h, &[n * self.nz, self.de])?;
        let f2 = tape.matmul(f1, vars.w2)?;
        let f2 = tape.add(f2, vars.b2)?;
        match &self.fusion {
            Some(sel) => Ok(fuse_on_tape(tape, &[f1, f2], sel, alpha)?),
            None => Ok(f2),
        }
    }

    /// Per-image mean of the visual tokens, `(N, d_e)`.
    pub fn pooled(&self, tape: &mut Tape, vars: &EncoderVars, x: Var, alpha: f64) -> Result<Var> {
        let n = tape.value(x)?.shape()[0];
        let z = self.forward(tape, vars, x, alpha)?;
        let pool = tape.constant(pooling_matrix(n, self.nz));
        Ok(tape.matmul(pool, z)?)
    }

    /// Forward pass without gradients.
    pub fn encode(&self, images: &[Vec<f64>], alpha: f64) -> Result<Tensor> {
        let mut tape = Tape::with_precision(PrecisionMode::EXACT);
        let vars = self.register(&mut tape, false);
        let x = tape.constant(images_tensor(images, self.dx)?);
        let z = self.forward(&mut tape, &vars, x, alpha)?;
        Ok(tape.value(z)?.clone())
    }
}

/// `(N, N * n_z)` matrix averaging each image's tokens.
pub(crate) fn pooling_matrix(n: usize, nz: usize) -> Tensor {
    let mut data = vec![0.0; n * n * nz];
    for i in 0..n {
        for k in 0..nz {
            data[i * n * nz + i * nz + k] = 1.0 / nz as f64;
        }
    }
    Tensor::matrix(n, n * nz, data).expect("sized")
}

pub(crate) fn images_tensor(images: &[Vec<f64>], dx: usize) -> Result<Tensor> {
    if images.iter().any(|x| x.len() != dx) {
        return Err(AlignError::Config(format!(
            "image length differs from d_x = {dx}"
        )));
    }
    Ok(Tensor::matrix(images.len(), dx, images.concat())?)
}
