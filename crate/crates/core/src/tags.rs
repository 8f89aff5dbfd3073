//! Simulated RFID environment: central entity records, the tag registry,
//! scans and in-situ tag storage.
//!
//! A scan always returns the tag's own payload. When the network is
//! reachable it also attaches the central record and a summary of the
//! entity's operation history from the trace ledger.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::trace::{EventPayload, HistorySummary, NewEvent, TraceLedger};
use crate::types::{EntityKind, EntityRef};

pub const DEFAULT_TAG_CAPACITY: usize = 512;

/// Bytes charged per key/value pair on top of the key and value lengths.
pub const PAIR_OVERHEAD: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TagError {
    #[error("tag `{tag}` is already bound to {bound}")]
    DuplicateTag { tag: String, bound: EntityRef },
    #[error("entity {0} is not registered")]
    UnknownEntity(EntityRef),
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error("write needs {needed} bytes but tag `{tag}` holds {capacity}")]
    CapacityExceeded {
        tag: String,
        needed: usize,
        capacity: usize,
    },
    #[error("invalid tag data: {0}")]
    InvalidPayload(String),
}

impl TagError {
    pub fn code(&self) -> &'static str {
        match self {
            TagError::DuplicateTag { .. } => "DuplicateTag",
            TagError::UnknownEntity(_) => "UnknownEntity",
            TagError::UnknownTag(_) => "UnknownTag",
            TagError::CapacityExceeded { .. } => "CapacityExceeded",
            TagError::InvalidPayload(_) => "InvalidPayload",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TagId(String);

impl TagId {
    pub fn new(value: impl Into<String>) -> Result<Self, TagError> {
        let value = value.into();
        if value.trim().is_empty() {
            return Err(TagError::InvalidPayload("empty tag id".into()));
        }
        Ok(TagId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for TagId {
    type Error = TagError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        TagId::new(value)
    }
}

impl From<TagId> for String {
    fn from(id: TagId) -> String {
        id.0
    }
}

impl Borrow<str> for TagId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TagId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Central-store record of an appliance, tool, part or location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityRecord {
    pub kind: EntityKind,
    pub id: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub label: String,
    /// Free-form topic tags used to match enrichment content.
    #[serde(default)]
    pub topics: Vec<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl EntityRecord {
    pub fn new(entity: EntityRef, model: Option<&str>) -> Self {
        EntityRecord {
            kind: entity.kind,
            label: entity.id.clone(),
            id: entity.id,
            model: model.map(str::to_string),
            topics: Vec::new(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn entity_ref(&self) -> EntityRef {
        EntityRef::new(self.kind, self.id.clone())
    }
}

/// The manufacturer's central database of entities.
#[derive(Debug, Default)]
pub struct EntityStore {
    records: RwLock<BTreeMap<EntityRef, EntityRecord>>,
}

impl EntityStore {
    pub fn insert(&self, record: EntityRecord) {
        self.records.write().insert(record.entity_ref(), record);
    }

    pub fn get(&self, entity: &EntityRef) -> Option<EntityRecord> {
        self.records.read().get(entity).cloned()
    }

    pub fn contains(&self, entity: &EntityRef) -> bool {
        self.records.read().contains_key(entity)
    }

    pub fn all(&self) -> Vec<EntityRecord> {
        self.records.read().values().cloned().collect()
    }
}

/// Insertion-ordered key/value data stored on a tag.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagPayload(IndexMap<String, String>);

impl TagPayload {
    /// Size charged against tag capacity: UTF-8 bytes of every key and
    /// value plus [`PAIR_OVERHEAD`] per pair.
    pub fn serialized_size(&self) -> usize {
        self.0
            .iter()
            .map(|(k, v)| k.len() + v.len() + PAIR_OVERHEAD)
            .sum()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn with(&self, key: &str, value: &str) -> TagPayload {
        let mut next = self.clone();
        next.0.insert(key.to_string(), value.to_string());
        next
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for TagPayload {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        TagPayload(
            iter.into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfidTag {
    pub id: TagId,
    pub bound_entity: EntityRef,
    pub capacity_bytes: usize,
    pub payload: TagPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanResult {
    pub tag: TagId,
    pub entity: EntityRef,
    pub in_situ: TagPayload,
    pub central_record: Option<EntityRecord>,
    pub history: Option<HistorySummary>,
    pub resolved_online: bool,
}

/// One line of the tag fixture file (JSON Lines).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagFixture {
    pub tag_id: String,
    pub entity_kind: EntityKind,
    pub entity_id: String,
    #[serde(default = "default_capacity")]
    pub capacity_bytes: usize,
    #[serde(default)]
    pub payload: Vec<(String, String)>,
}

fn default_capacity() -> usize {
    DEFAULT_TAG_CAPACITY
}

fn check_printable(what: &str, s: &str) -> Result<(), TagError> {
    if s.chars().any(char::is_control) {
        return Err(TagError::InvalidPayload(format!(
            "{what} contains non-printable characters"
        )));
    }
    Ok(())
}

/// Tag registry plus scan/write operations. Each tag sits behind its own
/// lock so writes to one tag are serialized while other tags stay available.
pub struct TagContext {
    entities: Arc<EntityStore>,
    ledger: Arc<TraceLedger>,
    tags: RwLock<HashMap<TagId, Arc<RwLock<RfidTag>>>>,
    strict_entities: bool,
}

impl TagContext {
    /// With `strict_entities`, tags may only be bound to registered entities.
    pub fn new(
        entities: Arc<EntityStore>,
        ledger: Arc<TraceLedger>,
        strict_entities: bool,
    ) -> Self {
        TagContext {
            entities,
            ledger,
            tags: RwLock::default(),
            strict_entities,
        }
    }

    pub fn register_tag(
        &self,
        id: TagId,
        entity: EntityRef,
        capacity_bytes: usize,
    ) -> Result<RfidTag, TagError> {
        if self.strict_entities && !self.entities.contains(&entity) {
            return Err(TagError::UnknownEntity(entity));
        }
        let mut tags = self.tags.write();
        if let Some(existing) = tags.get(&id) {
            let existing = existing.read();
            if existing.bound_entity == entity && existing.capacity_bytes == capacity_bytes {
                return Ok(existing.clone());
            }
            return Err(TagError::DuplicateTag {
                tag: id.to_string(),
                bound: existing.bound_entity.clone(),
            });
        }
        let tag = RfidTag {
            id: id.clone(),
            bound_entity: entity,
            capacity_bytes,
            payload: TagPayload::default(),
        };
        tags.insert(id, Arc::new(RwLock::new(tag.clone())));
        Ok(tag)
    }

    /// Registers a fixture tag and writes its initial payload without
    /// emitting trace events.
    pub fn load_fixture(&self, fixture: &TagFixture) -> Result<RfidTag, TagError> {
        let id = TagId::new(fixture.tag_id.clone())?;
        let entity = EntityRef::new(fixture.entity_kind, fixture.entity_id.clone());
        self.register_tag(id.clone(), entity, fixture.capacity_bytes)?;
        let handle = self.handle(id.as_str())?;
        let mut tag = handle.write();
        for (key, value) in &fixture.payload {
            Self::apply_write(&mut tag, key, value)?;
        }
        Ok(tag.clone())
    }

    fn handle(&self, tag_id: &str) -> Result<Arc<RwLock<RfidTag>>, TagError> {
        self.tags
            .read()
            .get(tag_id)
            .cloned()
            .ok_or_else(|| TagError::UnknownTag(tag_id.to_string()))
    }

    pub fn tag(&self, tag_id: &str) -> Result<RfidTag, TagError> {
        Ok(self.handle(tag_id)?.read().clone())
    }

    pub fn entity_of(&self, tag_id: &str) -> Result<EntityRef, TagError> {
        Ok(self.handle(tag_id)?.read().bound_entity.clone())
    }

    /// The first tag bound to `entity`, by tag id.
    pub fn tag_for_entity(&self, entity: &EntityRef) -> Option<TagId> {
        let tags = self.tags.read();
        let mut ids: Vec<&TagId> = tags
            .iter()
            .filter(|(_, t)| t.read().bound_entity == *entity)
            .map(|(id, _)| id)
            .collect();
        ids.sort();
        ids.first().map(|id| (*id).clone())
    }

    pub fn tag_ids(&self) -> Vec<TagId> {
        let mut ids: Vec<TagId> = self.tags.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn scan(
        &self,
        actor_id: &str,
        tag_id: &str,
        network_online: bool,
    ) -> Result<ScanResult, TagError> {
        let tag = self.tag(tag_id)?;
        let (central_record, history) = if network_online {
            (
                self.entities.get(&tag.bound_entity),
                Some(self.ledger.history_summary(&tag.bound_entity)),
            )
        } else {
            (None, None)
        };
        self.ledger.append(NewEvent::new(
            actor_id,
            None,
            EventPayload::Scan {
                tag: tag.id.to_string(),
                entity: tag.bound_entity.clone(),
                online: network_online,
            },
        ));
        Ok(ScanResult {
            tag: tag.id,
            entity: tag.bound_entity,
            in_situ: tag.payload,
            central_record,
            history,
            resolved_online: network_online,
        })
    }

    fn apply_write(tag: &mut RfidTag, key: &str, value: &str) -> Result<(), TagError> {
        if key.is_empty() {
            return Err(TagError::InvalidPayload("empty key".into()));
        }
        check_printable("key", key)?;
        check_printable("value", value)?;
        let next = tag.payload.with(key, value);
        let needed = next.serialized_size();
        if needed > tag.capacity_bytes {
            return Err(TagError::CapacityExceeded {
                tag: tag.id.to_string(),
                needed,
                capacity: tag.capacity_bytes,
            });
        }
        tag.payload = next;
        Ok(())
    }

    pub fn write_tag(
        &self,
        actor_id: &str,
        tag_id: &str,
        key: &str,
        value: &str,
    ) -> Result<RfidTag, TagError> {
        let handle = self.handle(tag_id)?;
        let mut tag = handle.write();
        Self::apply_write(&mut tag, key, value)?;
        self.ledger.append(NewEvent::new(
            actor_id,
            None,
            EventPayload::TagWritten {
                tag: tag_id.to_string(),
                key: key.to_string(),
                value: Some(value.to_string()),
            },
        ));
        Ok(tag.clone())
    }

    /// Removes `key`; erasing an absent key is a no-op and records nothing.
    pub fn erase_tag(&self, actor_id: &str, tag_id: &str, key: &str) -> Result<RfidTag, TagError> {
        let handle = self.handle(tag_id)?;
        let mut tag = handle.write();
        if tag.payload.0.shift_remove(key).is_some() {
            self.ledger.append(NewEvent::new(
                actor_id,
                None,
                EventPayload::TagWritten {
                    tag: tag_id.to_string(),
                    key: key.to_string(),
                    value: None,
                },
            ));
        }
        Ok(tag.clone())
    }
}
