//! Layerwise annealed fusion of intermediate feature maps.
//!
//! The fused map interpolates between the final layer and the mean of a
//! selected set of layers, `(1 - a) * F_L + a * mean_{l in S} F_l`, with the
//! weight `a(t) = min(t / tau, 1)` ramping linearly over `tau` steps.

use babelkit_numerics::{NumericsError, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Annealing duration used throughout the experiments, in optimizer steps.
pub const DEFAULT_TAU: u64 = 6000;
/// Default fused layers for a 24-block encoder (1-based).
pub const DEFAULT_SELECTED: [usize; 4] = [3, 9, 18, 24];

#[derive(Debug, Error, PartialEq)]
pub enum LvsaError {
    #[error("feature pyramid needs at least one layer")]
    EmptyPyramid,
    #[error("layer {index} has shape {found:?}, expected {expected:?}")]
    LayerShape {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid selected set {indices:?} for {layers} layers: {reason}")]
    Selection {
        indices: Vec<usize>,
        layers: usize,
        reason: &'static str,
    },
    #[error("fusion weight {0} outside [0, 1]")]
    Alpha(f64),
    #[error("annealing duration must be positive")]
    Tau,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, LvsaError>;

/// Feature maps from successive encoder blocks, all of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    layers: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let first = layers.first().ok_or(LvsaError::EmptyPyramid)?;
        let expected = first.shape().to_vec();
        for (i, layer) in layers.iter().enumerate() {
            if layer.shape() != expected.as_slice() {
                return Err(LvsaError::LayerShape {
                    index: i + 1,
                    expected,
                    found: layer.shape().to_vec(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Layer by 1-based index.
    pub fn layer(&self, index: usize) -> Option<&Tensor> {
        index.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn shape(&self) -> &[usize] {
        self.layers[0].shape()
    }
}

/// Strictly increasing 1-based layer indices that include the final layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct SelectedSet {
    indices: Vec<usize>,
}

impl SelectedSet {
    /// Indices without a layer count; `validate` must be called against the
    /// pyramid before fusing. Rejects empty, zero and non-increasing input.
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let fail = |reason| LvsaError::Selection {
            indices: indices.clone(),
            layers: 0,
            reason,
        };
        if indices.is_empty() {
            return Err(fail("empty"));
        }
        if indices[0] == 0 {
            return Err(fail("indices are 1-based"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(fail("indices must be strictly increasing"));
        }
        Ok(Self { indices })
    }

    pub fn for_layers(indices: Vec<usize>, layer_count: usize) -> Result<Self> {
        let set = Self::new(indices)?;
        set.validate(layer_count)?;
        Ok(set)
    }

    /// Every layer of an `layer_count`-deep pyramid.
    pub fn all(layer_count: usize) -> Self {
        Self {
            indices: (1..=layer_count.max(1)).collect(),
        }
    }

    pub fn validate(&self, layer_count: usize) -> Result<()> {
        let max = *self.indices.last().expect("non-empty");
        if max > layer_count {
            return Err(LvsaError::Selection {
                indices: self.indices.clone(),
                layers: layer_count,
                reason: "index beyond the last layer",
            });
        }
        if max != layer_count {
            return Err(LvsaError::Selection {
                indices: self.indices.clone(),
                layers: layer_count,
                reason: "final layer must be selected",
            });
        }
        Ok(())
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

impl TryFrom<Vec<usize>> for SelectedSet {
    type Error = LvsaError;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SelectedSet> for Vec<usize> {
    fn from(s: SelectedSet) -> Self {
        s.indices
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct AnnealSchedule {
    tau: u64,
}

impl AnnealSchedule {
    pub fn new(tau: u64) -> Result<Self> {
        if tau == 0 {
            return Err(LvsaError::Tau);
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> u64 {
        self.tau
    }

    /// `min(t / tau, 1)`.
    pub fn alpha(&self, t: u64) -> f64 {
        if t >= self.tau {
            1.0
        } else {
            t as f64 / self.tau as f64
        }
    }
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

impl TryFrom<u64> for AnnealSchedule {
    type Error = LvsaError;
    fn try_from(tau: u64) -> Result<Self> {
        Self::new(tau)
    }
}

impl From<AnnealSchedule> for u64 {
    fn from(s: AnnealSchedule) -> u64 {
        s.tau
    }
}

pub fn anneal_alpha(schedule: &AnnealSchedule, t: u64) -> f64 {
    schedule.alpha(t)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(LvsaError::Alpha(alpha))
    }
}

/// Record the fusion of `layers` (0-based slice, 1-based `selected`) on a tape.
///
/// The selected mean is accumulated as a running mean, so identical
/// selected layers reproduce their common value exactly.
pub fn fuse_on_tape(
    tape: &mut Tape,
    layers: &[Var],
    selected: &SelectedSet,
    alpha: f64,
) -> Result<Var> {
    check_alpha(alpha)?;
    if layers.is_empty() {
        return Err(LvsaError::EmptyPyramid);
    }
    selected.validate(layers.len())?;
    let last = layers[layers.len() - 1];
    let mut mean = layers[selected.indices()[0] - 1];
    for (k, &idx) in selected.indices().iter().enumerate().skip(1) {
        let delta = tape.sub(layers[idx - 1], mean)?;
        let step = tape.scale(delta, 1.0 / (k + 1) as f64)?;
        mean = tape.add(mean, step)?;
    }
    let keep = tape.scale(last, 1.0 - alpha)?;
    let mix = tape.scale(mean, alpha)?;
    Ok(tape.add(keep, mix)?)
}

pub fn fuse(pyramid: &FeaturePyramid, selected: &SelectedSet, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    selected.validate(pyramid.layer_count())?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = pyramid
        .layers
        .iter()
        .map(|l| tape.constant(l.clone()))
        .collect();
    let out = fuse_on_tape(&mut tape, &vars, selected, alpha)?;
    Ok(tape.value(out)?.clone())
}

pub fn fuse_at_step(
    pyramid: &FeaturePyramid,
    selected: &SelectedSet,
    schedule: &AnnealSchedule,
    t: u64,
) -> Result<Tensor> {
    fuse(pyramid, selected, schedule.alpha(t))
}
