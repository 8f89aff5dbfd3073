//! Append-only, hash-chained trace of everything that happens in the workspace.
//!
//! Each sealed [`TraceEvent`] carries a SHA-256 `chain_hash` computed over the
//! previous event's hash and the event's canonical serialization, so any later
//! modification of stored bytes is detectable with [`TraceLedger::verify_chain`]
//! or [`verify_trace`].
//!
//! ## Trace file format
//!
//! One event per line, UTF-8 JSON with no insignificant whitespace and fields
//! in this order:
//!
//! ```text
//! {"seq":1,"timestamp":1,"actor_id":"A1","session_id":null,"kind":"Scan","payload":{...},"chain_hash":"<64 hex>"}
//! ```
//!
//! The hash input for event `n` is `hex(chain_hash[n-1]) || "\n" || body[n]`,
//! where `body` is the line without the trailing `chain_hash` field (closing
//! brace kept) and the genesis hash is 64 zeros.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collab::MessageKind;
use crate::types::EntityRef;
use crate::workflow::{Deviation, EnforcementMode, Procedure, StepStatus};

pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("no events recorded for session `{0}`")]
    UnknownSession(String),
}

impl TraceError {
    pub fn code(&self) -> &'static str {
        match self {
            TraceError::UnknownSession(_) => "UnknownSession",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Scan,
    SessionStarted,
    StepReported,
    Deviation,
    UnitDelivered,
    TagWritten,
    HelpRequested,
    Message,
    SessionClosed,
}

crate::types::impl_from_str_via_serde!(EventKind, "event kind");

/// Kind-specific content of an event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", deny_unknown_fields)]
pub enum EventPayload {
    Scan {
        tag: String,
        entity: EntityRef,
        online: bool,
    },
    SessionStarted {
        procedure: String,
        appliance: EntityRef,
        mode: EnforcementMode,
    },
    StepReported {
        step: u32,
        status: StepStatus,
    },
    /// A step report that raised deviations. `accepted` tells whether the
    /// report still changed the session (advisory mode).
    Deviation {
        step: u32,
        accepted: bool,
        deviations: Vec<Deviation>,
        status: StepStatus,
    },
    UnitDelivered {
        unit: String,
        device: String,
    },
    /// `value: None` records an erase.
    TagWritten {
        tag: String,
        key: String,
        value: Option<String>,
    },
    HelpRequested {
        request: String,
        problem: String,
    },
    Message {
        request: String,
        seq: u32,
        message_kind: MessageKind,
    },
    SessionClosed {
        reason: String,
    },
}

impl EventPayload {
    pub fn kind(&self) -> EventKind {
        match self {
            EventPayload::Scan { .. } => EventKind::Scan,
            EventPayload::SessionStarted { .. } => EventKind::SessionStarted,
            EventPayload::StepReported { .. } => EventKind::StepReported,
            EventPayload::Deviation { .. } => EventKind::Deviation,
            EventPayload::UnitDelivered { .. } => EventKind::UnitDelivered,
            EventPayload::TagWritten { .. } => EventKind::TagWritten,
            EventPayload::HelpRequested { .. } => EventKind::HelpRequested,
            EventPayload::Message { .. } => EventKind::Message,
            EventPayload::SessionClosed { .. } => EventKind::SessionClosed,
        }
    }

    /// One-line human readable description, used by replays.
    pub fn describe(&self) -> String {
        match self {
            EventPayload::Scan {
                tag,
                entity,
                online,
            } => {
                let net = if *online { "online" } else { "offline" };
                format!("scanned tag {tag} ({entity}, {net})")
            }
            EventPayload::SessionStarted {
                procedure,
                appliance,
                mode,
            } => format!("started procedure {procedure} on {appliance} ({mode:?} mode)"),
            EventPayload::StepReported { step, status } => {
                format!("step {step} reported: {status:?}")
            }
            EventPayload::Deviation {
                step,
                accepted,
                deviations,
                ..
            } => {
                let names: Vec<String> = deviations.iter().map(|d| d.to_string()).collect();
                let verdict = if *accepted { "accepted" } else { "rejected" };
                format!(
                    "step {step} {verdict} with deviations: {}",
                    names.join(", ")
                )
            }
            EventPayload::UnitDelivered { unit, device } => {
                format!("delivered unit {unit} to {device}")
            }
            EventPayload::TagWritten { tag, key, value } => match value {
                Some(v) => format!("wrote {key}={v} on tag {tag}"),
                None => format!("erased {key} on tag {tag}"),
            },
            EventPayload::HelpRequested { request, problem } => {
                format!("help requested ({request}): {problem}")
            }
            EventPayload::Message {
                request,
                seq,
                message_kind,
            } => format!("message {seq} on {request} ({message_kind:?})"),
            EventPayload::SessionClosed { reason } => format!("session closed: {reason}"),
        }
    }
}

/// An event before it is sealed into the ledger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewEvent {
    pub actor_id: String,
    pub session_id: Option<String>,
    pub payload: EventPayload,
}

impl NewEvent {
    pub fn new(
        actor_id: impl Into<String>,
        session_id: Option<&str>,
        payload: EventPayload,
    ) -> Self {
        NewEvent {
            actor_id: actor_id.into(),
            session_id: session_id.map(str::to_string),
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub timestamp: u64,
    pub actor_id: String,
    pub session_id: Option<String>,
    #[serde(flatten)]
    pub payload: EventPayload,
    pub chain_hash: String,
}

#[derive(Serialize)]
struct EventBody<'a> {
    seq: u64,
    timestamp: u64,
    actor_id: &'a str,
    session_id: &'a Option<String>,
    #[serde(flatten)]
    payload: &'a EventPayload,
}

impl TraceEvent {
    pub fn kind(&self) -> EventKind {
        self.payload.kind()
    }

    fn body_json(&self) -> String {
        serde_json::to_string(&EventBody {
            seq: self.seq,
            timestamp: self.timestamp,
            actor_id: &self.actor_id,
            session_id: &self.session_id,
            payload: &self.payload,
        })
        .expect("event bodies always serialize")
    }

    /// The canonical trace-file line for this event, without the newline.
    pub fn canonical_line(&self) -> String {
        let body = self.body_json();
        let mut line = String::with_capacity(body.len() + 82);
        line.push_str(&body[..body.len() - 1]);
        line.push_str(",\"chain_hash\":\"");
        line.push_str(&self.chain_hash);
        line.push_str("\"}");
        line
    }
}

fn chain_digest(prev_hash: &str, body: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prev_hash.as_bytes());
    hasher.update(b"\n");
    hasher.update(body.as_bytes());
    hex::encode(hasher.finalize())
}

/// Source of event timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    /// Per-ledger counter starting at 1; required for reproducible runs.
    #[default]
    Logical,
    /// Milliseconds since the Unix epoch.
    Wall,
}

/// Filters for [`TraceLedger::query`]. Every `Some` field must match.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFilter {
    #[serde(default)]
    pub actor: Option<String>,
    #[serde(default)]
    pub session: Option<String>,
    #[serde(default)]
    pub kind: Option<EventKind>,
    /// Inclusive lower bound on `seq`.
    #[serde(default)]
    pub from: Option<u64>,
    /// Inclusive upper bound on `seq`.
    #[serde(default)]
    pub to: Option<u64>,
}

impl TraceFilter {
    pub fn session(id: &str) -> Self {
        TraceFilter {
            session: Some(id.to_string()),
            ..Default::default()
        }
    }

    pub fn kind(kind: EventKind) -> Self {
        TraceFilter {
            kind: Some(kind),
            ..Default::default()
        }
    }

    pub fn matches(&self, event: &TraceEvent) -> bool {
        self.actor.as_ref().is_none_or(|a| *a == event.actor_id)
            && self
                .session
                .as_ref()
                .is_none_or(|s| event.session_id.as_ref() == Some(s))
            && self.kind.is_none_or(|k| k == event.kind())
            && self.from.is_none_or(|from| event.seq >= from)
            && self.to.is_none_or(|to| event.seq <= to)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub seq: u64,
    pub timestamp: u64,
    pub kind: EventKind,
    pub summary: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Conformant,
    NonConformant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedDeviation {
    pub seq: u64,
    pub step: u32,
    pub deviation: Deviation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub session_id: String,
    pub steps_total: u32,
    pub steps_done_in_order: u32,
    pub deviations: Vec<RecordedDeviation>,
    pub verdict: Verdict,
}

/// Summary of what the ledger knows about one entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub sessions: Vec<String>,
    pub events: usize,
    pub last_operation: Option<String>,
}

/// Status of a session reconstructed from its events alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplayedState {
    Active,
    Completed,
    Aborted,
}

struct Sealer {
    last_hash: String,
    next_seq: u64,
}

/// The ledger. Appends are serialized through a single lock, which fixes the
/// global order; readers take a shared lock over the sealed prefix.
pub struct TraceLedger {
    clock: Clock,
    sealer: Mutex<Sealer>,
    events: RwLock<Vec<TraceEvent>>,
}

impl Default for TraceLedger {
    fn default() -> Self {
        Self::new(Clock::Logical)
    }
}

impl std::fmt::Debug for TraceLedger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TraceLedger")
            .field("clock", &self.clock)
            .field("len", &self.len())
            .finish()
    }
}

impl TraceLedger {
    pub fn new(clock: Clock) -> Self {
        TraceLedger {
            clock,
            sealer: Mutex::new(Sealer {
                last_hash: GENESIS_HASH.to_string(),
                next_seq: 1,
            }),
            events: RwLock::new(Vec::new()),
        }
    }

    pub fn append(&self, event: NewEvent) -> TraceEvent {
        let mut sealer = self.sealer.lock();
        let seq = sealer.next_seq;
        let timestamp = match self.clock {
            Clock::Logical => seq,
            Clock::Wall => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or_default(),
        };
        let mut sealed = TraceEvent {
            seq,
            timestamp,
            actor_id: event.actor_id,
            session_id: event.session_id,
            payload: event.payload,
            chain_hash: String::new(),
        };
        sealed.chain_hash = chain_digest(&sealer.last_hash, &sealed.body_json());
        sealer.last_hash = sealed.chain_hash.clone();
        sealer.next_seq += 1;
        self.events.write().push(sealed.clone());
        sealed
    }

    pub fn len(&self) -> usize {
        self.events.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_hash(&self) -> String {
        self.sealer.lock().last_hash.clone()
    }

    pub fn snapshot(&self) -> Vec<TraceEvent> {
        self.events.read().clone()
    }

    pub fn query(&self, filter: &TraceFilter) -> Vec<TraceEvent> {
        self.events
            .read()
            .iter()
            .filter(|e| filter.matches(e))
            .cloned()
            .collect()
    }

    pub fn count(&self, filter: &TraceFilter) -> usize {
        self.events
            .read()
            .iter()
            .filter(|e| filter.matches(e))
            .count()
    }

    pub fn verify_chain(&self) -> bool {
        verify_events(&self.events.read())
    }

    /// The canonical trace file contents.
    pub fn to_trace_bytes(&self) -> Vec<u8> {
        let events = self.events.read();
        let mut out = Vec::new();
        for event in events.iter() {
            out.extend_from_slice(event.canonical_line().as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn session_events(&self, session_id: &str) -> Result<Vec<TraceEvent>, TraceError> {
        let events = self.query(&TraceFilter::session(session_id));
        if events.is_empty() {
            return Err(TraceError::UnknownSession(session_id.to_string()));
        }
        Ok(events)
    }

    pub fn replay(&self, session_id: &str) -> Result<Vec<TimelineEntry>, TraceError> {
        Ok(self
            .session_events(session_id)?
            .into_iter()
            .map(|e| TimelineEntry {
                seq: e.seq,
                timestamp: e.timestamp,
                kind: e.kind(),
                summary: e.payload.describe(),
            })
            .collect())
    }

    /// Conformance of a session, computed from ledger events and the
    /// procedure definition only.
    pub fn verify_conformance(
        &self,
        session_id: &str,
        procedure: &Procedure,
    ) -> Result<ConformanceReport, TraceError> {
        let events = self.session_events(session_id)?;
        let steps_total = procedure.steps.len() as u32;
        let progress = StepProgress::from_events(&events, steps_total);
        let verdict = if progress.deviations.is_empty() && progress.in_order == steps_total {
            Verdict::Conformant
        } else {
            Verdict::NonConformant
        };
        Ok(ConformanceReport {
            session_id: session_id.to_string(),
            steps_total,
            steps_done_in_order: progress.in_order,
            deviations: progress.deviations,
            verdict,
        })
    }

    /// Session state as implied by the ledger.
    pub fn replayed_state(
        &self,
        session_id: &str,
        steps_total: u32,
    ) -> Result<ReplayedState, TraceError> {
        let events = self.session_events(session_id)?;
        if events.iter().any(|e| e.kind() == EventKind::SessionClosed) {
            return Ok(ReplayedState::Aborted);
        }
        let progress = StepProgress::from_events(&events, steps_total);
        Ok(if progress.done.len() as u32 == steps_total {
            ReplayedState::Completed
        } else {
            ReplayedState::Active
        })
    }

    /// Steps accepted in a session, in the order they were accepted.
    pub fn accepted_steps(&self, session_id: &str) -> Result<Vec<u32>, TraceError> {
        let events = self.session_events(session_id)?;
        let mut seen = BTreeSet::new();
        Ok(events
            .iter()
            .filter_map(accepted_step)
            .filter(|step| seen.insert(*step))
            .collect())
    }

    /// Ids of sessions started on `entity`, in start order.
    pub fn sessions_on(&self, entity: &EntityRef) -> Vec<(String, String)> {
        self.events
            .read()
            .iter()
            .filter_map(|e| match (&e.payload, &e.session_id) {
                (EventPayload::SessionStarted { appliance, .. }, Some(session))
                    if appliance == entity =>
                {
                    Some((session.clone(), e.actor_id.clone()))
                }
                _ => None,
            })
            .collect()
    }

    /// Events concerning `entity`: its scans plus every event of sessions
    /// started on it.
    pub fn history_for(&self, entity: &EntityRef) -> Vec<TraceEvent> {
        let sessions: BTreeSet<String> = self
            .sessions_on(entity)
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        self.events
            .read()
            .iter()
            .filter(|e| match &e.payload {
                EventPayload::Scan {
                    entity: scanned, ..
                } => scanned == entity,
                _ => e.session_id.as_ref().is_some_and(|s| sessions.contains(s)),
            })
            .cloned()
            .collect()
    }

    pub fn history_summary(&self, entity: &EntityRef) -> HistorySummary {
        let history = self.history_for(entity);
        HistorySummary {
            sessions: self
                .sessions_on(entity)
                .into_iter()
                .map(|(s, _)| s)
                .collect(),
            events: history.len(),
            last_operation: history.last().map(|e| e.payload.describe()),
        }
    }

    #[cfg(test)]
    pub(crate) fn tamper(&self, index: usize, f: impl FnOnce(&mut TraceEvent)) {
        f(&mut self.events.write()[index]);
    }
}

fn accepted_step(event: &TraceEvent) -> Option<u32> {
    match event.payload {
        EventPayload::StepReported { step, .. } => Some(step),
        EventPayload::Deviation {
            step,
            accepted: true,
            ..
        } => Some(step),
        _ => None,
    }
}

struct StepProgress {
    done: BTreeSet<u32>,
    in_order: u32,
    deviations: Vec<RecordedDeviation>,
}

impl StepProgress {
    fn from_events(events: &[TraceEvent], steps_total: u32) -> Self {
        let mut done = BTreeSet::new();
        let mut in_order = 0;
        let mut deviations = Vec::new();
        for event in events {
            if let EventPayload::Deviation {
                step,
                deviations: list,
                ..
            } = &event.payload
            {
                deviations.extend(list.iter().map(|d| RecordedDeviation {
                    seq: event.seq,
                    step: *step,
                    deviation: d.clone(),
                }));
            }
            let Some(step) = accepted_step(event) else {
                continue;
            };
            if done.contains(&step) {
                continue;
            }
            let next_pending = (1..=steps_total).find(|i| !done.contains(i));
            if next_pending == Some(step) {
                in_order += 1;
            }
            done.insert(step);
        }
        StepProgress {
            done,
            in_order,
            deviations,
        }
    }
}

fn verify_events(events: &[TraceEvent]) -> bool {
    let mut prev = GENESIS_HASH.to_string();
    for (i, event) in events.iter().enumerate() {
        if event.seq != i as u64 + 1 {
            return false;
        }
        let expected = chain_digest(&prev, &event.body_json());
        if expected != event.chain_hash {
            return false;
        }
        prev = expected;
    }
    true
}

/// Where and why a stored trace failed verification.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("trace broken at line {line}: {reason}")]
pub struct ChainBreak {
    pub line: usize,
    pub reason: String,
}

/// Parses a trace file without verifying it.
pub fn parse_trace(bytes: &[u8]) -> Result<Vec<TraceEvent>, ChainBreak> {
    let text = std::str::from_utf8(bytes).map_err(|e| ChainBreak {
        line: 0,
        reason: format!("not UTF-8: {e}"),
    })?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let Some(body) = text.strip_suffix('\n') else {
        return Err(ChainBreak {
            line: text.lines().count(),
            reason: "missing final newline".into(),
        });
    };
    body.split('\n')
        .enumerate()
        .map(|(i, line)| {
            let event: TraceEvent = serde_json::from_str(line).map_err(|e| ChainBreak {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if event.canonical_line() != line {
                return Err(ChainBreak {
                    line: i + 1,
                    reason: "line is not in canonical form".into(),
                });
            }
            Ok(event)
        })
        .collect()
}

/// Verifies a stored trace byte-for-byte. Returns the number of events.
pub fn verify_trace(bytes: &[u8]) -> Result<usize, ChainBreak> {
    let events = parse_trace(bytes)?;
    let mut prev = GENESIS_HASH.to_string();
    for (i, event) in events.iter().enumerate() {
        if event.seq != i as u64 + 1 {
            return Err(ChainBreak {
                line: i + 1,
                reason: format!("expected seq {}, found {}", i + 1, event.seq),
            });
        }
        let expected = chain_digest(&prev, &event.body_json());
        if expected != event.chain_hash {
            return Err(ChainBreak {
                line: i + 1,
                reason: "chain hash mismatch".into(),
            });
        }
        prev = expected;
    }
    Ok(events.len())
}

/// Groups deviations recorded in a session by kind, counting them.
pub fn deviation_counts(report: &ConformanceReport) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for d in &report.deviations {
        *counts
            .entry(d.deviation.kind_name().to_string())
            .or_default() += 1;
    }
    counts
}
