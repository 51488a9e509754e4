use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

#[derive(Deserialize, Serialize)]
struct RegistryFile {
    modalities: BTreeMap<String, Vec<String>>,
}

/// Partition of categories into modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityRegistry {
    modalities: BTreeMap<String, Vec<String>>,
    owner: BTreeMap<String, String>,
}

impl ModalityRegistry {
    pub fn new(modalities: BTreeMap<String, Vec<String>>) -> Result<Self> {
        if modalities.is_empty() {
            return Err(EvalError::Registry(
                "at least one modality is required".into(),
            ));
        }
        let mut owner = BTreeMap::new();
        for (m, cats) in &modalities {
            if cats.is_empty() {
                return Err(EvalError::Registry(format!(
                    "modality `{m}` has no categories"
                )));
            }
            for c in cats {
                if let Some(prev) = owner.insert(c.clone(), m.clone()) {
                    return Err(EvalError::Registry(format!(
                        "category `{c}` listed under both `{prev}` and `{m}`"
                    )));
                }
            }
        }
        Ok(Self { modalities, owner })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RegistryFile =
            serde_json::from_str(text).map_err(|e| EvalError::Registry(e.to_string()))?;
        Self::new(file.modalities)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RegistryFile {
            modalities: self.modalities.clone(),
        })
        .expect("registry serializes")
    }

    pub fn modality_of(&self, category: &str) -> Option<&str> {
        self.owner.get(category).map(String::as_str)
    }

    pub fn modalities(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.modalities
            .iter()
            .map(|(m, c)| (m.as_str(), c.as_slice()))
    }

    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    /// Every category, in modality then listing order.
    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.modalities.values().flatten().map(String::as_str)
    }

    pub fn category_count(&self) -> usize {
        self.owner.len()
    }
}
