//! Learning content: manufacturer documentation is ingested into fragments,
//! fragments are segmented into indexed learning units, and units are stored
//! either in the firm's EPSS (protected) or in the open knowledge base.

mod manifest;
mod segment;
pub mod xml;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::types::{Expertise, MediaKind, Protection, Specificity, StepRef, TaskCategory};

pub use manifest::{
    fragment_id, ingest_manifest, IngestedFragment, ManifestEntry, SourceManifest, UnitHints,
};
pub use segment::{segment, Grouping, SegmentationRules};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KnowledgeError {
    #[error("manifest `{0}` has no entries")]
    EmptyManifest(String),
    #[error("manifest `{doc}` repeats locator `{locator}`")]
    DuplicateLocator { doc: String, locator: String },
    #[error("invalid manifest entry: {0}")]
    InvalidEntry(String),
    #[error("fragments grouped into `{unit}` disagree on appliance models")]
    ConflictingSuggestions { unit: String },
    #[error("unit `{unit}` references missing fragment `{fragment}`")]
    DanglingFragment { unit: String, fragment: String },
    #[error("unit `{0}` has no fragments")]
    EmptyUnit(String),
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("document violates the learning-unit profile: {0}")]
    SchemaViolation(String),
}

impl KnowledgeError {
    pub fn code(&self) -> &'static str {
        match self {
            KnowledgeError::EmptyManifest(_) => "EmptyManifest",
            KnowledgeError::DuplicateLocator { .. } => "DuplicateLocator",
            KnowledgeError::InvalidEntry(_) => "InvalidEntry",
            KnowledgeError::ConflictingSuggestions { .. } => "ConflictingSuggestions",
            KnowledgeError::DanglingFragment { .. } => "DanglingFragment",
            KnowledgeError::EmptyUnit(_) => "EmptyUnit",
            KnowledgeError::UnknownUnit(_) => "UnknownUnit",
            KnowledgeError::SchemaViolation(_) => "SchemaViolation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningFragment {
    pub id: String,
    pub media_kind: MediaKind,
    /// Text content, or a locator of the external resource for non-text media.
    pub body: String,
    pub source_doc: String,
    pub source_locator: String,
    /// Text shown instead of this fragment on devices that cannot render it.
    pub fallback_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitMetadata {
    pub expertise: Expertise,
    pub task_category: TaskCategory,
    /// Empty means the unit applies to every model.
    pub appliance_models: BTreeSet<String>,
    pub step_ref: Option<StepRef>,
    pub specificity: Specificity,
    pub protection: Protection,
    pub topics: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningUnit {
    pub id: String,
    pub title: String,
    pub fragments: Vec<String>,
    pub metadata: UnitMetadata,
}

/// Which store(s) a query reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Scope {
    /// Firm-protected units only.
    #[serde(rename = "EPSS")]
    Epss,
    #[serde(rename = "OpenKB")]
    #[default]
    OpenKb,
    Both,
}

impl Scope {
    pub fn admits(self, protection: Protection) -> bool {
        match self {
            Scope::Epss => protection == Protection::FirmProtected,
            Scope::OpenKb => protection == Protection::Open,
            Scope::Both => true,
        }
    }

    /// The scope an unidentified caller actually gets: the protected store
    /// is dropped.
    pub fn open_only(self) -> Option<Scope> {
        match self {
            Scope::Epss => None,
            Scope::OpenKb | Scope::Both => Some(Scope::OpenKb),
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = crate::types::UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "EPSS" | "Epss" => Ok(Scope::Epss),
            "OpenKB" | "OpenKb" => Ok(Scope::OpenKb),
            "Both" => Ok(Scope::Both),
            _ => Err(crate::types::UnknownVariant {
                what: "scope",
                value: s.to_string(),
            }),
        }
    }
}

/// Filters for [`KnowledgeRepo::query_units`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitQuery {
    pub scope: Scope,
    /// Units listing this model, or listing no model at all.
    pub model: Option<String>,
    pub task_category: Option<TaskCategory>,
    /// Units at or below this expertise.
    pub expertise_max: Option<Expertise>,
    /// Units bound to this step, or bound to no step.
    pub step_ref: Option<StepRef>,
    pub topic: Option<String>,
}

impl UnitQuery {
    pub fn matches(&self, unit: &LearningUnit) -> bool {
        let m = &unit.metadata;
        self.scope.admits(m.protection)
            && self.model.as_ref().is_none_or(|model| {
                m.appliance_models.is_empty() || m.appliance_models.contains(model)
            })
            && self.task_category.is_none_or(|c| c == m.task_category)
            && self.expertise_max.is_none_or(|e| m.expertise <= e)
            && self
                .step_ref
                .as_ref()
                .is_none_or(|s| m.step_ref.as_ref().is_none_or(|own| own == s))
            && self.topic.as_ref().is_none_or(|t| m.topics.contains(t))
    }

    /// Sort key: units bound to the queried step first, then model-specific
    /// before generic, then by id.
    fn rank_key<'a>(&self, unit: &'a LearningUnit) -> (u8, u8, &'a str) {
        let step_match = match (&self.step_ref, &unit.metadata.step_ref) {
            (Some(q), Some(own)) if q == own => 0,
            _ => 1,
        };
        let specificity = match unit.metadata.specificity {
            Specificity::ModelSpecific => 0,
            Specificity::Generic => 1,
        };
        (step_match, specificity, unit.id.as_str())
    }
}

/// What [`KnowledgeRepo::index_unit`] stores per unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub unit_id: String,
    pub metadata: UnitMetadata,
    pub fragment_count: usize,
}

/// Fragment and unit storage. Readers share the locks; each index update
/// replaces one unit atomically.
#[derive(Debug, Default)]
pub struct KnowledgeRepo {
    fragments: RwLock<BTreeMap<String, LearningFragment>>,
    units: RwLock<BTreeMap<String, Arc<LearningUnit>>>,
}

impl KnowledgeRepo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_fragments<'a>(&self, fragments: impl IntoIterator<Item = &'a LearningFragment>) {
        let mut store = self.fragments.write();
        for f in fragments {
            store.insert(f.id.clone(), f.clone());
        }
    }

    pub fn fragment(&self, id: &str) -> Option<LearningFragment> {
        self.fragments.read().get(id).cloned()
    }

    pub fn fragments_of(&self, unit: &LearningUnit) -> Vec<LearningFragment> {
        let store = self.fragments.read();
        unit.fragments
            .iter()
            .filter_map(|id| store.get(id).cloned())
            .collect()
    }

    pub fn index_unit(&self, unit: LearningUnit) -> Result<IndexRecord, KnowledgeError> {
        if unit.fragments.is_empty() {
            return Err(KnowledgeError::EmptyUnit(unit.id));
        }
        {
            let fragments = self.fragments.read();
            if let Some(missing) = unit
                .fragments
                .iter()
                .find(|id| !fragments.contains_key(*id))
            {
                return Err(KnowledgeError::DanglingFragment {
                    unit: unit.id.clone(),
                    fragment: missing.clone(),
                });
            }
        }
        let record = IndexRecord {
            unit_id: unit.id.clone(),
            metadata: unit.metadata.clone(),
            fragment_count: unit.fragments.len(),
        };
        self.units.write().insert(unit.id.clone(), Arc::new(unit));
        Ok(record)
    }

    pub fn unit(&self, id: &str) -> Result<Arc<LearningUnit>, KnowledgeError> {
        self.units
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| KnowledgeError::UnknownUnit(id.to_string()))
    }

    pub fn contains_unit(&self, id: &str) -> bool {
        self.units.read().contains_key(id)
    }

    pub fn units(&self) -> Vec<Arc<LearningUnit>> {
        self.units.read().values().cloned().collect()
    }

    pub fn query_units(&self, query: &UnitQuery) -> Vec<Arc<LearningUnit>> {
        let mut hits: Vec<Arc<LearningUnit>> = self
            .units
            .read()
            .values()
            .filter(|u| query.matches(u))
            .cloned()
            .collect();
        hits.sort_by(|a, b| query.rank_key(a).cmp(&query.rank_key(b)));
        hits
    }

    pub fn export_xml(&self, unit_id: &str) -> Result<String, KnowledgeError> {
        let unit = self.unit(unit_id)?;
        let fragments = self.fragments_of(&unit);
        Ok(xml::export_xml(&unit, &fragments))
    }

    /// Ingests, segments and indexes one manifest. Returns the unit ids.
    pub fn load_manifest(
        &self,
        manifest: &SourceManifest,
        rules: &SegmentationRules,
    ) -> Result<Vec<String>, KnowledgeError> {
        let ingested = ingest_manifest(manifest)?;
        let units = segment(&ingested, rules)?;
        self.add_fragments(ingested.iter().map(|i| &i.fragment));
        let mut ids = Vec::with_capacity(units.len());
        for unit in units {
            ids.push(unit.id.clone());
            self.index_unit(unit)?;
        }
        Ok(ids)
    }
}
