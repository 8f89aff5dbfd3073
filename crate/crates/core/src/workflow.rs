//! Prescribed procedures and their enforcement.
//!
//! A [`WorkSession`] walks an actor through a [`Procedure`] on one appliance.
//! Every step report is checked for sequence, tools, parts and accreditation.
//! In [`EnforcementMode::Strict`] any deviation rejects the report; in
//! [`EnforcementMode::Advisory`] the step is still marked done and the
//! deviations are only recorded. Each report appends exactly one trace event.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::tags::EntityStore;
use crate::trace::{EventPayload, NewEvent, TraceLedger};
use crate::types::{Accreditation, EntityKind, EntityRef, Expertise};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorkflowError {
    #[error("malformed procedure: {0}")]
    MalformedProcedure(String),
    #[error("procedure `{0}` is already loaded with a different definition")]
    DuplicateProcedure(String),
    #[error("unknown procedure `{0}`")]
    UnknownProcedure(String),
    #[error("unknown actor `{0}`")]
    UnknownActor(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown appliance `{0}`")]
    UnknownAppliance(String),
    #[error("actor accreditation {actual} is below the required {required}")]
    InsufficientAccreditation {
        required: Accreditation,
        actual: Accreditation,
    },
    #[error("procedure is for model `{expected}` but the appliance is `{actual}`")]
    ModelMismatch { expected: String, actual: String },
    #[error("session `{0}` is closed")]
    SessionClosed(String),
    #[error("procedure has no step {0}")]
    UnknownStep(u32),
}

impl WorkflowError {
    pub fn code(&self) -> &'static str {
        match self {
            WorkflowError::MalformedProcedure(_) => "MalformedProcedure",
            WorkflowError::DuplicateProcedure(_) => "DuplicateProcedure",
            WorkflowError::UnknownProcedure(_) => "UnknownProcedure",
            WorkflowError::UnknownActor(_) => "UnknownActor",
            WorkflowError::UnknownSession(_) => "UnknownSession",
            WorkflowError::UnknownAppliance(_) => "UnknownAppliance",
            WorkflowError::InsufficientAccreditation { .. } => "InsufficientAccreditation",
            WorkflowError::ModelMismatch { .. } => "ModelMismatch",
            WorkflowError::SessionClosed(_) => "SessionClosed",
            WorkflowError::UnknownStep(_) => "UnknownStep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actor {
    pub id: String,
    pub name: String,
    pub accreditation: Accreditation,
    pub expertise: Expertise,
    /// Device profile id.
    pub device: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: u32,
    pub description: String,
    pub required_tools: BTreeSet<EntityRef>,
    pub required_parts: BTreeSet<EntityRef>,
    pub required_accreditation: Accreditation,
    pub learning_unit_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Procedure {
    pub id: String,
    pub appliance_model: String,
    pub title: String,
    pub min_accreditation: Accreditation,
    pub steps: Vec<Step>,
}

impl Procedure {
    pub fn step(&self, index: u32) -> Option<&Step> {
        index
            .checked_sub(1)
            .and_then(|i| self.steps.get(i as usize))
    }
}

/// On-disk form of a procedure (one TOML document per procedure). Tools and
/// parts are given by entity id; the step's accreditation defaults to the
/// procedure floor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcedureDefinition {
    pub id: String,
    pub appliance_model: String,
    pub title: String,
    pub min_accreditation: Accreditation,
    #[serde(default, rename = "step")]
    pub steps: Vec<StepDefinition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDefinition {
    pub index: u32,
    pub description: String,
    #[serde(default)]
    pub tools: Vec<String>,
    #[serde(default)]
    pub parts: Vec<String>,
    #[serde(default)]
    pub accreditation: Option<Accreditation>,
    #[serde(default)]
    pub units: Vec<String>,
}

impl ProcedureDefinition {
    pub fn from_toml(text: &str) -> Result<Self, WorkflowError> {
        toml::from_str(text).map_err(|e| WorkflowError::MalformedProcedure(e.to_string()))
    }
}

/// Validates a definition and builds the immutable procedure.
pub fn build_procedure(def: &ProcedureDefinition) -> Result<Procedure, WorkflowError> {
    let malformed = |msg: String| WorkflowError::MalformedProcedure(format!("{}: {msg}", def.id));
    if def.id.trim().is_empty() {
        return Err(WorkflowError::MalformedProcedure(
            "empty procedure id".into(),
        ));
    }
    if def.steps.is_empty() {
        return Err(malformed("no steps".into()));
    }
    let mut steps = Vec::with_capacity(def.steps.len());
    for (pos, step) in def.steps.iter().enumerate() {
        let expected = pos as u32 + 1;
        if step.index != expected {
            return Err(malformed(format!(
                "step indices must be 1..{} in order; found {} at position {expected}",
                def.steps.len(),
                step.index
            )));
        }
        if step.description.trim().is_empty() {
            return Err(malformed(format!(
                "step {expected} has an empty description"
            )));
        }
        steps.push(Step {
            index: step.index,
            description: step.description.clone(),
            required_tools: step.tools.iter().map(EntityRef::tool).collect(),
            required_parts: step.parts.iter().map(EntityRef::part).collect(),
            required_accreditation: step.accreditation.unwrap_or(def.min_accreditation),
            learning_unit_refs: step.units.clone(),
        });
    }
    Ok(Procedure {
        id: def.id.clone(),
        appliance_model: def.appliance_model.clone(),
        title: def.title.clone(),
        min_accreditation: def.min_accreditation,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum EnforcementMode {
    #[default]
    Strict,
    Advisory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepStatus {
    Pending,
    Done,
    Skipped,
    DoneOutOfOrder,
}

impl StepStatus {
    pub fn is_done(self) -> bool {
        matches!(self, StepStatus::Done | StepStatus::DoneOutOfOrder)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionState {
    Active,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", deny_unknown_fields)]
pub enum Deviation {
    OutOfOrder {
        expected: u32,
        reported: u32,
    },
    MissingTool {
        missing: Vec<EntityRef>,
    },
    MissingPart {
        missing: Vec<EntityRef>,
    },
    InsufficientAccreditation {
        required: Accreditation,
        actual: Accreditation,
    },
    AlreadyDone,
}

impl Deviation {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Deviation::OutOfOrder { .. } => "OutOfOrder",
            Deviation::MissingTool { .. } => "MissingTool",
            Deviation::MissingPart { .. } => "MissingPart",
            Deviation::InsufficientAccreditation { .. } => "InsufficientAccreditation",
            Deviation::AlreadyDone => "AlreadyDone",
        }
    }

    /// Topic tag of the learning units that explain this kind of deviation.
    pub fn topic(&self) -> &'static str {
        match self {
            Deviation::OutOfOrder { .. } | Deviation::AlreadyDone => "operation-sequence",
            Deviation::MissingTool { .. } => "tool-usage",
            Deviation::MissingPart { .. } => "part-handling",
            Deviation::InsufficientAccreditation { .. } => "accreditation",
        }
    }
}

impl fmt::Display for Deviation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Deviation::OutOfOrder { expected, reported } => {
                write!(f, "OutOfOrder(expected {expected}, reported {reported})")
            }
            Deviation::MissingTool { missing } | Deviation::MissingPart { missing } => {
                let ids: Vec<&str> = missing.iter().map(|e| e.id.as_str()).collect();
                write!(f, "{}({})", self.kind_name(), ids.join(", "))
            }
            Deviation::InsufficientAccreditation { required, .. } => {
                write!(f, "InsufficientAccreditation(requires {required})")
            }
            Deviation::AlreadyDone => f.write_str("AlreadyDone"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkSession {
    pub id: String,
    pub actor: Actor,
    pub appliance: EntityRef,
    pub procedure: Arc<Procedure>,
    pub mode: EnforcementMode,
    /// Next expected step, in `1..=n+1`.
    pub cursor: u32,
    pub step_status: Vec<StepStatus>,
    pub state: SessionState,
    /// Every deviation raised in this session, with its step.
    pub deviations: Vec<(u32, Deviation)>,
}

impl WorkSession {
    fn steps_total(&self) -> u32 {
        self.procedure.steps.len() as u32
    }

    fn lowest_pending(&self) -> Option<u32> {
        self.step_status
            .iter()
            .position(|s| *s == StepStatus::Pending)
            .map(|i| i as u32 + 1)
    }

    fn ensure_active(&self) -> Result<(), WorkflowError> {
        if self.state == SessionState::Active {
            Ok(())
        } else {
            Err(WorkflowError::SessionClosed(self.id.clone()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrescribedAction {
    pub session_id: String,
    pub step: u32,
    pub steps_total: u32,
    pub description: String,
    pub required_tools: BTreeSet<EntityRef>,
    pub required_parts: BTreeSet<EntityRef>,
    pub required_accreditation: Accreditation,
    pub learning_unit_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub accepted: bool,
    pub deviations: Vec<Deviation>,
    pub cursor: u32,
    pub state: SessionState,
}

/// Computes the deviations of a report against a session, without
/// changing anything. Extra scanned tools and parts are ignored.
pub fn step_deviations(
    session: &WorkSession,
    step: &Step,
    tools: &BTreeSet<EntityRef>,
    parts: &BTreeSet<EntityRef>,
) -> Vec<Deviation> {
    let mut out = Vec::new();
    if step.index != session.cursor {
        out.push(Deviation::OutOfOrder {
            expected: session.cursor,
            reported: step.index,
        });
    }
    let missing_tools: Vec<EntityRef> = step.required_tools.difference(tools).cloned().collect();
    if !missing_tools.is_empty() {
        out.push(Deviation::MissingTool {
            missing: missing_tools,
        });
    }
    let missing_parts: Vec<EntityRef> = step.required_parts.difference(parts).cloned().collect();
    if !missing_parts.is_empty() {
        out.push(Deviation::MissingPart {
            missing: missing_parts,
        });
    }
    if session.actor.accreditation < step.required_accreditation {
        out.push(Deviation::InsufficientAccreditation {
            required: step.required_accreditation,
            actual: session.actor.accreditation,
        });
    }
    if session.step_status[step.index as usize - 1].is_done() {
        out.push(Deviation::AlreadyDone);
    }
    out
}

/// Procedures, actors and live sessions.
pub struct Workflow {
    procedures: RwLock<BTreeMap<String, Arc<Procedure>>>,
    actors: RwLock<BTreeMap<String, Actor>>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<WorkSession>>>>,
    next_session: AtomicU64,
    entities: Arc<EntityStore>,
    ledger: Arc<TraceLedger>,
}

impl Workflow {
    pub fn new(entities: Arc<EntityStore>, ledger: Arc<TraceLedger>) -> Self {
        Workflow {
            procedures: RwLock::default(),
            actors: RwLock::default(),
            sessions: RwLock::default(),
            next_session: AtomicU64::new(1),
            entities,
            ledger,
        }
    }

    pub fn load_procedure(
        &self,
        def: &ProcedureDefinition,
    ) -> Result<Arc<Procedure>, WorkflowError> {
        let procedure = build_procedure(def)?;
        let mut procedures = self.procedures.write();
        if let Some(existing) = procedures.get(&procedure.id) {
            if **existing == procedure {
                return Ok(existing.clone());
            }
            return Err(WorkflowError::DuplicateProcedure(procedure.id));
        }
        let procedure = Arc::new(procedure);
        procedures.insert(procedure.id.clone(), procedure.clone());
        Ok(procedure)
    }

    pub fn procedure(&self, id: &str) -> Result<Arc<Procedure>, WorkflowError> {
        self.procedures
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| WorkflowError::UnknownProcedure(id.to_string()))
    }

    pub fn procedures(&self) -> Vec<Arc<Procedure>> {
        self.procedures.read().values().cloned().collect()
    }

    /// Procedures applicable to an appliance model, by id.
    pub fn procedures_for_model(&self, model: &str) -> Vec<Arc<Procedure>> {
        self.procedures
            .read()
            .values()
            .filter(|p| p.appliance_model == model)
            .cloned()
            .collect()
    }

    pub fn register_actor(&self, actor: Actor) {
        self.actors.write().insert(actor.id.clone(), actor);
    }

    pub fn actor(&self, id: &str) -> Result<Actor, WorkflowError> {
        self.actors
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| WorkflowError::UnknownActor(id.to_string()))
    }

    pub fn start_session(
        &self,
        actor_id: &str,
        appliance: &EntityRef,
        procedure_id: &str,
        mode: EnforcementMode,
    ) -> Result<WorkSession, WorkflowError> {
        let actor = self.actor(actor_id)?;
        let procedure = self.procedure(procedure_id)?;
        let record = self
            .entities
            .get(appliance)
            .filter(|r| r.kind == EntityKind::Appliance)
            .ok_or_else(|| WorkflowError::UnknownAppliance(appliance.id.clone()))?;
        let model = record.model.clone().unwrap_or_default();
        if model != procedure.appliance_model {
            return Err(WorkflowError::ModelMismatch {
                expected: procedure.appliance_model.clone(),
                actual: model,
            });
        }
        if actor.accreditation < procedure.min_accreditation {
            return Err(WorkflowError::InsufficientAccreditation {
                required: procedure.min_accreditation,
                actual: actor.accreditation,
            });
        }

        let id = format!("S-{:04}", self.next_session.fetch_add(1, Ordering::SeqCst));
        let session = WorkSession {
            id: id.clone(),
            actor,
            appliance: appliance.clone(),
            step_status: vec![StepStatus::Pending; procedure.steps.len()],
            procedure,
            mode,
            cursor: 1,
            state: SessionState::Active,
            deviations: Vec::new(),
        };
        // Hold the registry lock across the append so the session is never
        // observable without its SessionStarted event.
        let mut sessions = self.sessions.write();
        self.ledger.append(NewEvent::new(
            &session.actor.id,
            Some(&id),
            EventPayload::SessionStarted {
                procedure: session.procedure.id.clone(),
                appliance: appliance.clone(),
                mode,
            },
        ));
        sessions.insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    fn handle(&self, session_id: &str) -> Result<Arc<Mutex<WorkSession>>, WorkflowError> {
        self.sessions
            .read()
            .get(session_id)
            .cloned()
            .ok_or_else(|| WorkflowError::UnknownSession(session_id.to_string()))
    }

    pub fn session(&self, session_id: &str) -> Result<WorkSession, WorkflowError> {
        Ok(self.handle(session_id)?.lock().clone())
    }

    pub fn sessions(&self) -> Vec<WorkSession> {
        self.sessions
            .read()
            .values()
            .map(|s| s.lock().clone())
            .collect()
    }

    /// The active session of `actor` on `appliance`, if any.
    pub fn active_session(&self, actor_id: &str, appliance: &EntityRef) -> Option<WorkSession> {
        self.sessions
            .read()
            .values()
            .map(|s| s.lock().clone())
            .filter(|s| {
                s.state == SessionState::Active
                    && s.actor.id == actor_id
                    && s.appliance == *appliance
            })
            .last()
    }

    /// The most recently started active session of `actor`, on any appliance.
    pub fn active_session_of(&self, actor_id: &str) -> Option<WorkSession> {
        self.sessions
            .read()
            .values()
            .map(|s| s.lock().clone())
            .filter(|s| s.state == SessionState::Active && s.actor.id == actor_id)
            .last()
    }

    pub fn current_prescription(
        &self,
        session_id: &str,
    ) -> Result<PrescribedAction, WorkflowError> {
        let handle = self.handle(session_id)?;
        let session = handle.lock();
        session.ensure_active()?;
        let step = session
            .procedure
            .step(session.cursor)
            .ok_or(WorkflowError::UnknownStep(session.cursor))?;
        Ok(PrescribedAction {
            session_id: session.id.clone(),
            step: step.index,
            steps_total: session.steps_total(),
            description: step.description.clone(),
            required_tools: step.required_tools.clone(),
            required_parts: step.required_parts.clone(),
            required_accreditation: step.required_accreditation,
            learning_unit_refs: step.learning_unit_refs.clone(),
        })
    }

    pub fn report_step(
        &self,
        session_id: &str,
        step_index: u32,
        tools: &BTreeSet<EntityRef>,
        parts: &BTreeSet<EntityRef>,
    ) -> Result<StepOutcome, WorkflowError> {
        let handle = self.handle(session_id)?;
        let mut session = handle.lock();
        session.ensure_active()?;
        let procedure = session.procedure.clone();
        let step = procedure
            .step(step_index)
            .ok_or(WorkflowError::UnknownStep(step_index))?;

        let deviations = step_deviations(&session, step, tools, parts);
        let slot = step_index as usize - 1;
        let accepted = deviations.is_empty() || session.mode == EnforcementMode::Advisory;
        if accepted {
            if !session.step_status[slot].is_done() {
                session.step_status[slot] = if step_index == session.cursor {
                    StepStatus::Done
                } else {
                    StepStatus::DoneOutOfOrder
                };
            }
            match session.lowest_pending() {
                Some(next) => session.cursor = next,
                None => {
                    session.cursor = session.steps_total() + 1;
                    session.state = SessionState::Completed;
                }
            }
        }
        session
            .deviations
            .extend(deviations.iter().map(|d| (step_index, d.clone())));

        let status = session.step_status[slot];
        let payload = if deviations.is_empty() {
            EventPayload::StepReported {
                step: step_index,
                status,
            }
        } else {
            EventPayload::Deviation {
                step: step_index,
                accepted,
                deviations: deviations.clone(),
                status,
            }
        };
        self.ledger
            .append(NewEvent::new(&session.actor.id, Some(&session.id), payload));

        Ok(StepOutcome {
            accepted,
            deviations,
            cursor: session.cursor,
            state: session.state,
        })
    }

    pub fn abort_session(
        &self,
        session_id: &str,
        reason: &str,
    ) -> Result<WorkSession, WorkflowError> {
        let handle = self.handle(session_id)?;
        let mut session = handle.lock();
        session.ensure_active()?;
        session.state = SessionState::Aborted;
        for status in session.step_status.iter_mut() {
            if *status == StepStatus::Pending {
                *status = StepStatus::Skipped;
            }
        }
        self.ledger.append(NewEvent::new(
            &session.actor.id,
            Some(&session.id),
            EventPayload::SessionClosed {
                reason: reason.to_string(),
            },
        ));
        Ok(session.clone())
    }
}
