use babelkit_numerics::{symmetric_eigenvalues, Matrix};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::{ConceptVocabulary, InstructionSample, INSTRUCTION};
use super::{AlignError, Result};
use crate::seed::stream_rng;

/// How one modality renders latents: `x = A z + b + noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    /// Seed of the orthonormal mixing columns and the offset direction.
    pub mixing_seed: u64,
    #[serde(default = "one")]
    pub gain: f64,
    /// Scale of the seeded offset vector `b`.
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Reuse another modality's mixing matrix, negated, plus seeded jitter.
    #[serde(default)]
    pub negate_of: Option<String>,
    #[serde(default)]
    pub jitter: f64,
}

fn one() -> f64 {
    1.0
}

impl ModalitySpec {
    pub fn new(name: &str, mixing_seed: u64) -> Self {
        Self {
            name: name.into(),
            mixing_seed,
            gain: 1.0,
            offset: 0.0,
            noise_sigma: 0.0,
            negate_of: None,
            jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticModalityGenerator {
    pub modality: String,
    /// Row-major `d_x x d_z`.
    pub mixing: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise_sigma: f64,
    pub dx: usize,
    pub dz: usize,
}

fn orthonormal_columns(dx: usize, dz: usize, seed: u64) -> Result<Vec<f64>> {
    if dz > dx {
        return Err(AlignError::Config(format!(
            "latent dim {dz} exceeds image dim {dx}"
        )));
    }
    let mut rng = stream_rng(seed, 0xa11);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dz);
    while cols.len() < dz {
        let mut v: Vec<f64> = (0..dx).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok((0..dx * dz).map(|k| cols[k % dz][k / dz]).collect())
}

impl SyntheticModalityGenerator {
    pub fn new(
        modality: &str,
        mixing: Vec<f64>,
        offset: Vec<f64>,
        noise_sigma: f64,
        dz: usize,
    ) -> Result<Self> {
        let dx = offset.len();
        if dz == 0 || mixing.len() != dx * dz {
            return Err(AlignError::Config(format!(
                "`{modality}`: mixing must be {dx}x{dz}"
            )));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(AlignError::Config(format!(
                "`{modality}`: noise_sigma must be finite and >= 0"
            )));
        }
        // full column rank iff the Gram matrix is positive definite
        let gram = Matrix::from_fn(dz, |i, j| {
            (0..dx)
                .map(|r| mixing[r * dz + i] * mixing[r * dz + j])
                .sum()
        });
        let eig = symmetric_eigenvalues(&gram)?;
        let scale = eig.last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
        if !(eig[0] > 1e-10 * scale) {
            return Err(AlignError::RankDeficient(modality.into()));
        }
        Ok(Self {
            modality: modality.into(),
            mixing,
            offset,
            noise_sigma,
            dx,
            dz,
        })
    }

    /// Build every modality of a spec list; `negate_of` may only point at an
    /// earlier entry.
    pub fn from_specs(specs: &[ModalitySpec], dx: usize, dz: usize) -> Result<Vec<Self>> {
        let mut out: Vec<Self> = Vec::with_capacity(specs.len());
        for s in specs {
            if out.iter().any(|g| g.modality == s.name) {
                return Err(AlignError::Config(format!(
                    "duplicate modality `{}`",
                    s.name
                )));
            }
            let mut rng = stream_rng(s.mixing_seed, 0x0ff5e7);
            let offset: Vec<f64> = (0..dx)
                .map(|_| s.offset * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let mixing = match &s.negate_of {
                None => orthonormal_columns(dx, dz, s.mixing_seed)?
                    .into_iter()
                    .map(|a| s.gain * a)
                    .collect::<Vec<f64>>(),
                Some(other) => {
                    let base = out
                        .iter()
                        .find(|g| &g.modality == other)
                        .ok_or_else(|| AlignError::UnknownModality(other.clone()))?;
                    let mut jr = stream_rng(s.mixing_seed, 0x717);
                    base.mixing
                        .iter()
                        .map(|a| {
                            let e: f64 = StandardNormal.sample(&mut jr);
                            -s.gain * a + s.jitter * e
                        })
                        .collect()
                }
            };
            out.push(Self::new(&s.name, mixing, offset, s.noise_sigma, dz)?);
        }
        Ok(out)
    }

    /// `A z + b` without noise.
    pub fn render(&self, z: &[f64]) -> Vec<f64> {
        (0..self.dx)
            .map(|r| {
                self.offset[r]
                    + (0..self.dz)
                        .map(|c| self.mixing[r * self.dz + c] * z[c])
                        .sum::<f64>()
            })
            .collect()
    }
}

/// One instruction sample of `concept` in `gen`'s modality.
pub fn generate_sample(
    gen: &SyntheticModalityGenerator,
    vocab: &ConceptVocabulary,
    concept: &str,
    rng_seed: u64,
) -> Result<InstructionSample> {
    let c = vocab.index_of(concept)?;
    if vocab.latent_dim() != gen.dz {
        return Err(AlignError::Config(
            "latent dimension differs between vocabulary and generator".into(),
        ));
    }
    let mut image = gen.render(vocab.latent(c));
    if gen.noise_sigma > 0.0 {
        let mut rng = stream_rng(rng_seed, 0x5a3);
        for v in &mut image {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += gen.noise_sigma * e;
        }
    }
    Ok(InstructionSample {
        image,
        instruction: INSTRUCTION.to_vec(),
        response: vocab.tokens(c),
        modality: gen.modality.clone(),
        concept: c,
    })
}
