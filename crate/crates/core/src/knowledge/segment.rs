use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{IngestedFragment, KnowledgeError, LearningUnit, UnitMetadata};
use crate::types::{Protection, Specificity, StepRef, TaskCategory};

/// How fragments are grouped into units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Grouping {
    /// Fragments bound to the same step and task category form one unit;
    /// fragments without a step each form their own unit.
    #[default]
    StepAndTask,
    /// Every fragment becomes its own unit.
    PerFragment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SegmentationRules {
    pub grouping: Grouping,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum GroupKey {
    Step(StepRef, TaskCategory),
    Single(String, String),
}

impl GroupKey {
    fn unit_id(&self) -> String {
        match self {
            GroupKey::Step(step, category) => {
                format!("{}:{}:{}", step.procedure, step.step, category.slug())
            }
            GroupKey::Single(doc, locator) => format!("{doc}:{locator}"),
        }
    }
}

/// Groups ingested fragments into units. Units come out in order of their
/// first fragment; fragments keep their input order inside a unit.
pub fn segment(
    fragments: &[IngestedFragment],
    rules: &SegmentationRules,
) -> Result<Vec<LearningUnit>, KnowledgeError> {
    let mut groups: IndexMap<GroupKey, Vec<&IngestedFragment>> = IndexMap::new();
    for item in fragments {
        let key = match (&rules.grouping, &item.hints.step_ref) {
            (Grouping::StepAndTask, Some(step)) => {
                GroupKey::Step(step.clone(), item.hints.task_category)
            }
            _ => GroupKey::Single(
                item.fragment.source_doc.clone(),
                item.fragment.source_locator.clone(),
            ),
        };
        groups.entry(key).or_default().push(item);
    }

    groups
        .into_iter()
        .map(|(key, members)| {
            let id = key.unit_id();
            let first = &members[0].hints;
            if members
                .iter()
                .any(|m| m.hints.appliance_models != first.appliance_models)
            {
                return Err(KnowledgeError::ConflictingSuggestions { unit: id });
            }
            let expertise = members
                .iter()
                .map(|m| m.hints.expertise)
                .min()
                .unwrap_or(first.expertise);
            let protection = if members
                .iter()
                .any(|m| m.hints.protection == Protection::FirmProtected)
            {
                Protection::FirmProtected
            } else {
                Protection::Open
            };
            let specificity = if members
                .iter()
                .any(|m| m.hints.specificity == Specificity::ModelSpecific)
            {
                Specificity::ModelSpecific
            } else {
                Specificity::Generic
            };
            Ok(LearningUnit {
                id,
                title: first.title.clone(),
                fragments: members.iter().map(|m| m.fragment.id.clone()).collect(),
                metadata: UnitMetadata {
                    expertise,
                    task_category: first.task_category,
                    appliance_models: first.appliance_models.clone(),
                    step_ref: first.step_ref.clone(),
                    specificity,
                    protection,
                    topics: members
                        .iter()
                        .flat_map(|m| m.hints.topics.iter().cloned())
                        .collect(),
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{ingest_manifest, ManifestEntry, SourceManifest};
    use crate::types::{Expertise, MediaKind};

    fn entry(
        locator: &str,
        media: MediaKind,
        step: Option<u32>,
        expertise: Expertise,
    ) -> ManifestEntry {
        ManifestEntry {
            locator: locator.into(),
            media_kind: media,
            body: format!("content {locator}"),
            expertise,
            task_category: TaskCategory::Dismantling,
            step_ref: step.map(|s| StepRef::new("hd-replace", s)),
            title: Some(format!("title {locator}")),
            topics: vec![],
            fallback_text: None,
        }
    }

    fn manifest(entries: Vec<ManifestEntry>) -> SourceManifest {
        SourceManifest {
            doc_id: "guide".into(),
            appliance_models: vec!["HDD-SATA".into()],
            protection: Protection::FirmProtected,
            specificity: None,
            entries,
        }
    }

    #[test]
    fn step_fragments_group_in_source_order() {
        let m = manifest(vec![
            entry("s2-text", MediaKind::Text, Some(2), Expertise::Basic),
            entry("s3-text", MediaKind::Text, Some(3), Expertise::Basic),
            entry("s3-photo", MediaKind::Photo, Some(3), Expertise::Beginner),
        ]);
        let ingested = ingest_manifest(&m).unwrap();
        let units = segment(&ingested, &SegmentationRules::default()).unwrap();
        assert_eq!(units.len(), 2);
        let step3 = &units[1];
        assert_eq!(step3.id, "hd-replace:3:dismantling");
        assert_eq!(step3.metadata.step_ref, Some(StepRef::new("hd-replace", 3)));
        assert_eq!(
            step3.fragments,
            vec![
                ingested[1].fragment.id.clone(),
                ingested[2].fragment.id.clone()
            ]
        );
        assert_eq!(step3.metadata.expertise, Expertise::Beginner);
        assert_eq!(step3.title, "title s3-text");
    }

    #[test]
    fn singleton() {
        let m = manifest(vec![entry("only", MediaKind::Text, None, Expertise::Basic)]);
        let units = segment(&ingest_manifest(&m).unwrap(), &SegmentationRules::default()).unwrap();
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].id, "guide:only");
        assert_eq!(units[0].fragments.len(), 1);
    }

    #[test]
    fn per_fragment_rule_splits_step_groups() {
        let m = manifest(vec![
            entry("a", MediaKind::Text, Some(3), Expertise::Basic),
            entry("b", MediaKind::Photo, Some(3), Expertise::Basic),
        ]);
        let rules = SegmentationRules {
            grouping: Grouping::PerFragment,
        };
        assert_eq!(
            segment(&ingest_manifest(&m).unwrap(), &rules)
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn conflicting_models_across_documents() {
        let a = ingest_manifest(&manifest(vec![entry(
            "a",
            MediaKind::Text,
            Some(3),
            Expertise::Basic,
        )]))
        .unwrap();
        let mut other = manifest(vec![entry("b", MediaKind::Text, Some(3), Expertise::Basic)]);
        other.doc_id = "other".into();
        other.appliance_models = vec!["IDE-DISK".into()];
        let b = ingest_manifest(&other).unwrap();
        let all: Vec<_> = a.into_iter().chain(b).collect();
        assert_eq!(
            segment(&all, &SegmentationRules::default())
                .unwrap_err()
                .code(),
            "ConflictingSuggestions"
        );
    }
}
