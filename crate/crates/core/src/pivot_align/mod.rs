//! Alignment of heterogeneous synthetic modalities through a frozen language
//! pivot.
//!
//! Each modality renders shared latent concepts through its own affine map.
//! A shared encoder turns images into visual tokens, and a frozen toy
//! decoder scores the concept's response tokens given those tokens. Training
//! the encoder on the response-token likelihood makes the decoder's
//! conditional distributions agree across modalities.

mod encoder;
mod generator;
mod pivot;
mod train;
mod vocab;

pub use encoder::{Encoder, EncoderVars};
pub use generator::{generate_sample, ModalitySpec, SyntheticModalityGenerator};
pub use pivot::{LanguagePivot, PivotVars};
pub use train::{
    alignment_loss, alignment_loss_on_tape, cross_modal_consistency, next_token_distributions,
    pretrain_align, AlignConfig, AlignSetup, AlignStep, Dims, LossValue, LvsaConfig, PivotConfig,
    Pretrained,
};
pub use vocab::{ConceptVocabulary, InstructionSample, INSTRUCTION};

use babelkit_numerics::NumericsError;
use thiserror::Error;

use crate::lvsa::LvsaError;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Lvsa(#[from] LvsaError),
    #[error("config: {0}")]
    Config(String),
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("unknown modality `{0}`")]
    UnknownModality(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("mixing matrix of `{0}` is rank deficient")]
    RankDeficient(String),
    #[error("non-finite loss at step {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, AlignError>;
