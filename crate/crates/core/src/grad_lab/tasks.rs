use babelkit_numerics::{Tape, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabError, Result};
use crate::pivot_align::{
    generate_sample, ConceptVocabulary, Encoder, EncoderVars, SyntheticModalityGenerator,
};
use crate::seed::{derive_seed, stream_rng};

/// A per-modality loss over a list of shared parameter tensors.
pub trait ModalityLoss: Sync {
    fn modality(&self) -> &str;
    /// Record the loss on `tape`, reading the shared parameters from `shared`.
    fn record(&self, tape: &mut Tape, shared: &[Var]) -> Result<Var>;
}

/// `<c, theta>`: a constant gradient `c`.
#[derive(Clone, Debug)]
pub struct LinearTask {
    pub name: String,
    pub direction: Vec<f64>,
}

impl ModalityLoss for LinearTask {
    fn modality(&self) -> &str {
        &self.name
    }

    fn record(&self, tape: &mut Tape, shared: &[Var]) -> Result<Var> {
        let c = tape.constant(Tensor::vector(self.direction.clone()));
        let prod = tape.mul(shared[0], c)?;
        Ok(tape.sum(prod)?)
    }
}

/// `0.5 * |theta - center|^2`.
#[derive(Clone, Debug)]
pub struct QuadraticTask {
    pub name: String,
    pub center: Vec<f64>,
}

impl ModalityLoss for QuadraticTask {
    fn modality(&self) -> &str {
        &self.name
    }

    fn record(&self, tape: &mut Tape, shared: &[Var]) -> Result<Var> {
        let c = tape.constant(Tensor::vector(self.center.clone()));
        let d = tape.sub(shared[0], c)?;
        let sq = tape.square(d)?;
        let s = tape.sum(sq)?;
        Ok(tape.scale(s, 0.5)?)
    }
}

/// Linear box-regression head `pooled * psi + beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub psi: Tensor,
    pub beta: Tensor,
}

impl Head {
    pub fn init(de: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, 0x4ead);
        let sd = (1.0 / de as f64).sqrt();
        let psi: Vec<f64> = (0..de * 4)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                sd * g
            })
            .collect();
        Ok(Self {
            psi: Tensor::matrix(de, 4, psi)?,
            beta: Tensor::zeros(&[4]),
        })
    }
}

/// Box regression for one modality: images of each concept paired with that
/// concept's target box, scored by mean squared error.
#[derive(Clone, Debug)]
pub struct ToyDetectionTask {
    pub modality: String,
    pub images: Vec<Vec<f64>>,
    /// Row-major `(N, 4)`.
    pub targets: Vec<f64>,
}

impl ToyDetectionTask {
    pub fn generate(
        gen: &SyntheticModalityGenerator,
        vocab: &ConceptVocabulary,
        boxes: &[[f64; 4]],
        per_concept: usize,
        seed: u64,
    ) -> Result<Self> {
        if per_concept == 0 {
            return Err(LabError::Config(
                "samples_per_concept must be positive".into(),
            ));
        }
        let mut images = Vec::new();
        let mut targets = Vec::new();
        for (c, name) in vocab.concepts().iter().enumerate() {
            for i in 0..per_concept {
                let s = generate_sample(
                    gen,
                    vocab,
                    name,
                    derive_seed(seed, (c * per_concept + i) as u64),
                )?;
                images.push(s.image);
                targets.extend_from_slice(&boxes[c]);
            }
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Config("non-finite target box".into()));
        }
        Ok(Self {
            modality: gen.modality.clone(),
            images,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Pooled encoder features `(N, d_e)`.
    pub fn features(
        &self,
        tape: &mut Tape,
        encoder: &Encoder,
        ev: &EncoderVars,
        alpha: f64,
    ) -> Result<Var> {
        let x = tape.constant(Tensor::matrix(
            self.len(),
            encoder.dx,
            self.images.concat(),
        )?);
        Ok(encoder.pooled(tape, ev, x, alpha)?)
    }

    pub fn loss_from_features(
        &self,
        tape: &mut Tape,
        pooled: Var,
        psi: Var,
        beta: Var,
    ) -> Result<Var> {
        let pred = tape.matmul(pooled, psi)?;
        let pred = tape.add(pred, beta)?;
        let y = tape.constant(Tensor::matrix(self.len(), 4, self.targets.clone())?);
        Ok(tape.mse(pred, y)?)
    }
}

/// Box regression targets per concept, seeded, scaled by `scale` and
/// centered across concepts (normalized deltas rather than raw corners).
pub(crate) fn concept_boxes(concepts: usize, scale: f64, seed: u64) -> Vec<[f64; 4]> {
    let mut rng = stream_rng(seed, 0xb0c5);
    let mut boxes: Vec<[f64; 4]> = (0..concepts)
        .map(|_| {
            let mut b = [0.0; 4];
            for v in &mut b {
                let u: f64 = rand::Rng::gen_range(&mut rng, 0.1..1.0);
                *v = scale * u;
            }
            b
        })
        .collect();
    for j in 0..4 {
        let mean = boxes.iter().map(|b| b[j]).sum::<f64>() / concepts as f64;
        boxes.iter_mut().for_each(|b| b[j] -= mean);
    }
    boxes
}

/// A detection task viewed as a loss over the encoder parameters alone,
/// with the head held fixed.
pub struct DetectionLoss<'a> {
    pub task: &'a ToyDetectionTask,
    pub encoder: &'a Encoder,
    pub head: &'a Head,
    pub alpha: f64,
}

impl ModalityLoss for DetectionLoss<'_> {
    fn modality(&self) -> &str {
        &self.task.modality
    }

    fn record(&self, tape: &mut Tape, shared: &[Var]) -> Result<Var> {
        if shared.len() != 4 {
            return Err(LabError::Config(
                "detection loss expects the 4 encoder tensors".into(),
            ));
        }
        let ev = EncoderVars {
            w1: shared[0],
            b1: shared[1],
            w2: shared[2],
            b2: shared[3],
        };
        let pooled = self.task.features(tape, self.encoder, &ev, self.alpha)?;
        let psi = tape.constant(self.head.psi.clone());
        let beta = tape.constant(self.head.beta.clone());
        self.task.loss_from_features(tape, pooled, psi, beta)
    }
}
