//! Optimization diagnostics for multi-modal training: per-modality gradient
//! conflict, Hessian conditioning under an added alignment term, late versus
//! two-stage alignment under emulated reduced precision, and gradient
//! coherence before and after pivot alignment.

mod experiments;
mod hessian;
mod report;
mod runs;
mod tasks;

pub use experiments::{
    amp_stress, detection_gradient_reports, initial_losses, proposition3_experiment, stress_cells,
    write_conditioning_csv, write_stability_csv, write_trace_csv, write_trajectories_csv,
    CoherenceResult, CoherenceSeed, GradLabConfig, InitialLosses, Regime, StabilityConfig,
    StabilityRow, StabilityTable, StressCell,
};
pub use hessian::{
    condition_number, condition_number_power, conditioning_sweep, weyl_lower_bound, Conditioning,
    ConditioningConfig, HessianSpec,
};
pub use report::{per_modality_gradients, update_direction_variance, GradientReport};
pub use runs::{
    run_late_alignment, run_two_stage, DetModel, FinetuneConfig, LabSetup, RunTrace, TraceRecord,
    Verdict, DIVERGENCE_LOSS,
};
pub use tasks::{DetectionLoss, Head, LinearTask, ModalityLoss, QuadraticTask, ToyDetectionTask};

use babelkit_numerics::NumericsError;
use thiserror::Error;

use crate::pivot_align::AlignError;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite gradient for modality `{0}`")]
    NonFiniteGradient(String),
    #[error("Hessian spec: {0}")]
    Spec(String),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("at least two modalities are needed for pairwise statistics")]
    NoPairs,
    #[error("output: {0}")]
    Write(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
