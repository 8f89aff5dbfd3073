use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{KnowledgeError, LearningFragment};
use crate::types::{Expertise, MediaKind, Protection, Specificity, StepRef, TaskCategory};

/// Normalized form of one source document (TOML on disk).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceManifest {
    pub doc_id: String,
    #[serde(default)]
    pub appliance_models: Vec<String>,
    #[serde(default = "default_protection")]
    pub protection: Protection,
    /// Defaults to `ModelSpecific` when models are listed, else `Generic`.
    #[serde(default)]
    pub specificity: Option<Specificity>,
    #[serde(default, rename = "entry")]
    pub entries: Vec<ManifestEntry>,
}

fn default_protection() -> Protection {
    Protection::Open
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub locator: String,
    pub media_kind: MediaKind,
    pub body: String,
    pub expertise: Expertise,
    pub task_category: TaskCategory,
    #[serde(default)]
    pub step_ref: Option<StepRef>,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub topics: Vec<String>,
    #[serde(default)]
    pub fallback_text: Option<String>,
}

impl SourceManifest {
    pub fn from_toml(text: &str) -> Result<Self, KnowledgeError> {
        toml::from_str(text).map_err(|e| KnowledgeError::InvalidEntry(e.to_string()))
    }

    pub fn specificity(&self) -> Specificity {
        self.specificity
            .unwrap_or(if self.appliance_models.is_empty() {
                Specificity::Generic
            } else {
                Specificity::ModelSpecific
            })
    }
}

/// Segmentation input suggested by the manifest for one fragment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitHints {
    pub title: String,
    pub expertise: Expertise,
    pub task_category: TaskCategory,
    pub step_ref: Option<StepRef>,
    pub appliance_models: BTreeSet<String>,
    pub specificity: Specificity,
    pub protection: Protection,
    pub topics: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestedFragment {
    pub fragment: LearningFragment,
    pub hints: UnitHints,
}

/// Stable id of the fragment at `locator` in document `doc_id`.
pub fn fragment_id(doc_id: &str, locator: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(doc_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(locator.as_bytes());
    let digest = hex::encode(hasher.finalize());
    format!("frag-{}", &digest[..16])
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c.is_control())
}

pub fn ingest_manifest(manifest: &SourceManifest) -> Result<Vec<IngestedFragment>, KnowledgeError> {
    if manifest.entries.is_empty() {
        return Err(KnowledgeError::EmptyManifest(manifest.doc_id.clone()));
    }
    if manifest.doc_id.trim().is_empty() {
        return Err(KnowledgeError::InvalidEntry("empty doc_id".into()));
    }
    let appliance_models: BTreeSet<String> = manifest.appliance_models.iter().cloned().collect();
    if let Some(bad) = appliance_models.iter().find(|m| !valid_token(m)) {
        return Err(KnowledgeError::InvalidEntry(format!(
            "bad model id `{bad}`"
        )));
    }
    let specificity = manifest.specificity();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        if !seen.insert(entry.locator.as_str()) {
            return Err(KnowledgeError::DuplicateLocator {
                doc: manifest.doc_id.clone(),
                locator: entry.locator.clone(),
            });
        }
        if entry.locator.trim().is_empty() {
            return Err(KnowledgeError::InvalidEntry("empty locator".into()));
        }
        if entry.body.trim().is_empty() {
            return Err(KnowledgeError::InvalidEntry(format!(
                "entry `{}` has an empty body",
                entry.locator
            )));
        }
        if let Some(bad) = entry.topics.iter().find(|t| !valid_token(t)) {
            return Err(KnowledgeError::InvalidEntry(format!("bad topic `{bad}`")));
        }
        out.push(IngestedFragment {
            fragment: LearningFragment {
                id: fragment_id(&manifest.doc_id, &entry.locator),
                media_kind: entry.media_kind,
                body: entry.body.clone(),
                source_doc: manifest.doc_id.clone(),
                source_locator: entry.locator.clone(),
                fallback_text: entry.fallback_text.clone(),
            },
            hints: UnitHints {
                title: entry.title.clone().unwrap_or_else(|| entry.locator.clone()),
                expertise: entry.expertise,
                task_category: entry.task_category,
                step_ref: entry.step_ref.clone(),
                appliance_models: appliance_models.clone(),
                specificity,
                protection: manifest.protection,
                topics: entry.topics.iter().cloned().collect(),
            },
        });
    }
    Ok(out)
}
