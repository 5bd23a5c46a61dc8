use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dataset {
    FairFace,
    #[serde(rename = "PATA")]
    Pata,
    NeutralControl,
    Synthetic,
}

impl Dataset {
    /// Closed race vocabulary, in canonical order; `None` means any non-empty label is accepted.
    pub fn race_categories(self) -> Option<&'static [&'static str]> {
        match self {
            Dataset::FairFace => Some(&[
                "White",
                "Black",
                "Latino_Hispanic",
                "East Asian",
                "Southeast Asian",
                "Indian",
                "Middle Eastern",
            ]),
            Dataset::Pata => Some(&[
                "Black",
                "Caucasian",
                "East Asian",
                "Hispanic/Latino",
                "Indian",
            ]),
            Dataset::NeutralControl | Dataset::Synthetic => None,
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::FairFace => "FairFace",
            Dataset::Pata => "PATA",
            Dataset::NeutralControl => "NeutralControl",
            Dataset::Synthetic => "Synthetic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Image,
    Prompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "Male",
            Gender::Female => "Female",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub race: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
    /// Prompt set this row belongs to; prompt manifests only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set_id: Option<String>,
}

impl Record {
    pub fn new(id: impl Into<String>) -> Self {
        Record {
            id: id.into(),
            gender: None,
            race: None,
            template_id: None,
            set_id: None,
        }
    }
}

/// JSON sidecar describing the rows of a VLBE file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordManifest {
    /// Required for image manifests; prompt manifests may omit it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<Dataset>,
    pub source_id: String,
    pub kind: EmbeddingKind,
    /// Checkpoint temperature, written by the extractor for probability reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub records: Vec<Record>,
}

impl RecordManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        if self.kind == EmbeddingKind::Image && self.dataset.is_none() {
            return Err(Error::Manifest("image manifest lacks a dataset".into()));
        }
        if let Some(ds) = self.dataset {
            for r in &self.records {
                if let Some(race) = &r.race {
                    let known = match ds.race_categories() {
                        Some(cats) => cats.contains(&race.as_str()),
                        None => !race.trim().is_empty(),
                    };
                    if !known {
                        return Err(Error::UnknownLabel {
                            attribute: "race",
                            label: race.clone(),
                            dataset: ds.to_string(),
                        });
                    }
                }
            }
        }
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidTemperature(t));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: RecordManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `dir/name.vlbe` -> `dir/name.<suffix>.json`.
pub fn sidecar_path(embedding_path: &Path, suffix: &str) -> PathBuf {
    let stem = embedding_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    embedding_path.with_file_name(format!("{stem}.{suffix}.json"))
}

pub fn manifest_path(embedding_path: &Path) -> PathBuf {
    sidecar_path(embedding_path, "manifest")
}
