use babelkit::detect_eval::EvalError;
use babelkit::grad_lab::LabError;
use babelkit::mixture::MixtureError;
use babelkit::pivot_align::AlignError;
use thiserror::Error;

/// Why a command stopped; maps onto the exit code contract.
#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Failure::Input(msg.into())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<MixtureError> for Failure {
    fn from(e: MixtureError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<AlignError> for Failure {
    fn from(e: AlignError) -> Self {
        match e {
            AlignError::NonFinite(step) => {
                Failure::Numerical(format!("non-finite alignment loss at step {step}"))
            }
            AlignError::Numerics(n) => Failure::Numerical(n.to_string()),
            other => Failure::Input(other.to_string()),
        }
    }
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Align(a) => a.into(),
            LabError::Numerics(n) => Failure::Numerical(n.to_string()),
            LabError::NonFiniteGradient(m) => {
                Failure::Numerical(format!("non-finite gradient for modality `{m}`"))
            }
            other => Failure::Input(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Input(e.to_string())
    }
}
