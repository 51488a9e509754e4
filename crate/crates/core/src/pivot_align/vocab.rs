use serde::{Deserialize, Serialize};

use super::{AlignError, Result};
use crate::seed::stream_rng;
use rand_distr::{Distribution, StandardNormal};

/// Token ids of the shared prompt "what is this".
pub const INSTRUCTION: [usize; 3] = [0, 1, 2];

/// Concepts, their two-token responses and their unit latent vectors.
///
/// Concept `i` of `C` is spelled `[3 + i, 3 + C + i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    concepts: Vec<String>,
    vocab_size: usize,
    latents: Vec<Vec<f64>>,
}

impl ConceptVocabulary {
    pub fn new(
        concepts: Vec<String>,
        vocab_size: usize,
        latent_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if concepts.is_empty() {
            return Err(AlignError::Config("no concepts".into()));
        }
        let mut sorted = concepts.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != concepts.len() {
            return Err(AlignError::Config("duplicate concept names".into()));
        }
        let needed = INSTRUCTION.len() + 2 * concepts.len();
        if vocab_size < needed {
            return Err(AlignError::Config(format!(
                "vocab_size {vocab_size} too small for {} concepts (need {needed})",
                concepts.len()
            )));
        }
        if latent_dim == 0 {
            return Err(AlignError::Config(
                "latent dimension must be positive".into(),
            ));
        }
        let mut rng = stream_rng(seed, 0x1a7e);
        let latents = concepts
            .iter()
            .map(|_| {
                let v: Vec<f64> = (0..latent_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Ok(Self {
            concepts,
            vocab_size,
            latents,
        })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn latent_dim(&self) -> usize {
        self.latents[0].len()
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn index_of(&self, concept: &str) -> Result<usize> {
        self.concepts
            .iter()
            .position(|c| c == concept)
            .ok_or_else(|| AlignError::UnknownConcept(concept.to_string()))
    }

    pub fn tokens(&self, concept: usize) -> Vec<usize> {
        let base = INSTRUCTION.len();
        vec![base + concept, base + self.concepts.len() + concept]
    }

    pub fn latent(&self, concept: usize) -> &[f64] {
        &self.latents[concept]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub image: Vec<f64>,
    pub instruction: Vec<usize>,
    pub response: Vec<usize>,
    pub modality: String,
    pub concept: usize,
}
