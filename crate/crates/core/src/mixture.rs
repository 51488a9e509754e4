//! Pretraining-mixture recipes and a seeded per-epoch sampler.
//!
//! Each sample of each dataset enters an epoch independently with the
//! dataset's sample rate; the union is then shuffled.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::stream_rng;

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("recipe: {0}")]
    Parse(String),
    #[error("recipe entry `{name}`: {message}")]
    Entry { name: String, message: String },
    #[error("duplicate dataset `{0}`")]
    Duplicate(String),
    #[error("draw references unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("draw index {index} out of range for `{name}` (size {size})")]
    IndexOutOfRange { name: String, index: u64, size: u64 },
    #[error("manifest: {0}")]
    Write(String),
}

pub type Result<T> = std::result::Result<T, MixtureError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "VQA")]
    Vqa,
    #[serde(rename = "VG")]
    Vg,
    Caption,
    #[serde(rename = "CLS")]
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeEntry {
    pub name: String,
    pub size: u64,
    pub sample_rate: f64,
    /// Some corpora serve several tasks (captioning and classification).
    pub tasks: Vec<TaskKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureRecipe {
    pub seed: u64,
    pub entries: Vec<RecipeEntry>,
}

impl MixtureRecipe {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            let bad = |message: &str| MixtureError::Entry {
                name: e.name.clone(),
                message: message.into(),
            };
            if e.name.is_empty() {
                return Err(bad("empty name"));
            }
            if e.size == 0 {
                return Err(bad("size must be positive"));
            }
            if !(0.0..=1.0).contains(&e.sample_rate) {
                return Err(bad("sample_rate outside [0, 1]"));
            }
            if e.tasks.is_empty() {
                return Err(bad("no tasks"));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(MixtureError::Duplicate(e.name.clone()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| MixtureError::Parse(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| MixtureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn entry(&self, name: &str) -> Option<&RecipeEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// `size * sample_rate` per dataset.
pub fn expected_counts(recipe: &MixtureRecipe) -> BTreeMap<String, f64> {
    recipe
        .entries
        .iter()
        .map(|e| (e.name.clone(), e.size as f64 * e.sample_rate))
        .collect()
}

pub fn expected_total(recipe: &MixtureRecipe) -> f64 {
    expected_counts(recipe).values().sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Draw {
    pub dataset: Arc<str>,
    pub index: u64,
}

fn include_indices(entry: &RecipeEntry, rng: &mut impl Rng) -> Vec<u64> {
    if entry.sample_rate >= 1.0 {
        (0..entry.size).collect()
    } else if entry.sample_rate <= 0.0 {
        Vec::new()
    } else {
        (0..entry.size)
            .filter(|_| rng.gen::<f64>() < entry.sample_rate)
            .collect()
    }
}

/// One epoch of draws. Dataset `k` uses its own random stream, so datasets
/// are independent and editing one entry leaves the others' inclusions alone.
pub fn draw_epoch(recipe: &MixtureRecipe, seed: u64) -> Vec<Draw> {
    let mut out = Vec::new();
    for (k, e) in recipe.entries.iter().enumerate() {
        let name: Arc<str> = Arc::from(e.name.as_str());
        let mut rng = stream_rng(seed, 1 + k as u64);
        out.extend(include_indices(e, &mut rng).into_iter().map(|index| Draw {
            dataset: name.clone(),
            index,
        }));
    }
    out.shuffle(&mut stream_rng(seed, 0));
    out
}

/// Per-dataset counts of an epoch, in recipe order.
pub fn drawn_counts(draws: &[Draw], recipe: &MixtureRecipe) -> Result<Vec<(String, u64)>> {
    let pos: HashMap<&str, usize> = recipe
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.name.as_str(), i))
        .collect();
    let mut counts = vec![0u64; recipe.entries.len()];
    for d in draws {
        let &i = pos
            .get(&*d.dataset)
            .ok_or_else(|| MixtureError::UnknownDataset(d.dataset.to_string()))?;
        let e = &recipe.entries[i];
        if d.index >= e.size {
            return Err(MixtureError::IndexOutOfRange {
                name: e.name.clone(),
                index: d.index,
                size: e.size,
            });
        }
        counts[i] += 1;
    }
    Ok(recipe
        .entries
        .iter()
        .map(|e| e.name.clone())
        .zip(counts)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateCheck {
    pub name: String,
    pub configured: f64,
    pub empirical: f64,
    pub pass: bool,
}

/// Compare each dataset's empirical inclusion rate with its configured rate.
pub fn verify_rates(
    draws: &[Draw],
    recipe: &MixtureRecipe,
    abs_tolerance: f64,
) -> Result<Vec<RateCheck>> {
    let counts = drawn_counts(draws, recipe)?;
    Ok(recipe
        .entries
        .iter()
        .zip(counts)
        .map(|(e, (_, n))| {
            let empirical = n as f64 / e.size as f64;
            RateCheck {
                name: e.name.clone(),
                configured: e.sample_rate,
                empirical,
                pass: (empirical - e.sample_rate).abs() <= abs_tolerance,
            }
        })
        .collect())
}

/// CSV manifest with columns position, dataset, index.
pub fn write_manifest(draws: &[Draw], path: &Path) -> Result<()> {
    let err = |e: csv::Error| MixtureError::Write(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["position", "dataset", "index"])
        .map_err(err)?;
    for (pos, d) in draws.iter().enumerate() {
        w.write_record([
            pos.to_string().as_str(),
            &d.dataset,
            d.index.to_string().as_str(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| MixtureError::Write(e.to_string()))
}
