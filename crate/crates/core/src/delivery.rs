//! The control engine: turns scans into working contexts, picks learning
//! units for the before/during/after-work modes, adapts them to the
//! worker's device and talks to augmented appliances.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::knowledge::{KnowledgeRepo, LearningUnit, Scope, UnitQuery};
use crate::tags::{EntityStore, ScanResult, TagPayload};
use crate::trace::{EventPayload, NewEvent, TraceEvent, TraceLedger};
use crate::types::{EntityKind, EntityRef, MediaKind, StepRef};
use crate::workflow::{Procedure, SessionState, Workflow};

/// Ledger events kept in a context snapshot.
pub const HISTORY_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeliveryError {
    #[error("{0} is not an appliance")]
    EntityNotAppliance(EntityRef),
    #[error("no active session for this context")]
    NoActiveSession,
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("unknown device profile `{0}`")]
    UnknownDevice(String),
    #[error("invalid device profile: {0}")]
    InvalidDevice(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` is closed")]
    SessionClosed(String),
    #[error("unknown appliance `{0}`")]
    UnknownAppliance(String),
    #[error("{op} is not possible over a {link} link")]
    LinkViolation { link: ApplianceLink, op: LinkOp },
}

impl DeliveryError {
    pub fn code(&self) -> &'static str {
        match self {
            DeliveryError::EntityNotAppliance(_) => "EntityNotAppliance",
            DeliveryError::NoActiveSession => "NoActiveSession",
            DeliveryError::UnknownUnit(_) => "UnknownUnit",
            DeliveryError::UnknownDevice(_) => "UnknownDevice",
            DeliveryError::InvalidDevice(_) => "InvalidDevice",
            DeliveryError::UnknownSession(_) => "UnknownSession",
            DeliveryError::SessionClosed(_) => "SessionClosed",
            DeliveryError::UnknownAppliance(_) => "UnknownAppliance",
            DeliveryError::LinkViolation { .. } => "LinkViolation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DisplayKind {
    IntegratedScreenGoggles,
    SeeThroughGoggles,
    Tablet,
    Handheld,
}

impl DisplayKind {
    pub fn is_goggles(self) -> bool {
        matches!(
            self,
            DisplayKind::IntegratedScreenGoggles | DisplayKind::SeeThroughGoggles
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub id: String,
    pub display: DisplayKind,
    pub max_media: BTreeSet<MediaKind>,
    pub hands_free: bool,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), DeliveryError> {
        if self.max_media.is_empty() {
            return Err(DeliveryError::InvalidDevice(format!(
                "`{}` renders no media",
                self.id
            )));
        }
        if self.display.is_goggles() && !self.hands_free {
            return Err(DeliveryError::InvalidDevice(format!(
                "`{}`: goggles are always hands-free",
                self.id
            )));
        }
        Ok(())
    }

    /// Text is renderable everywhere.
    pub fn can_render(&self, media: MediaKind) -> bool {
        media == MediaKind::Text || self.max_media.contains(&media)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearningMode {
    BeforeWork,
    DuringWork,
    AfterWork,
}

crate::types::impl_from_str_via_serde!(LearningMode, "learning mode");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcedureSummary {
    pub id: String,
    pub title: String,
    pub steps: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    pub actor: String,
    pub appliance: EntityRef,
    pub model: Option<String>,
    pub label: Option<String>,
    pub in_situ: TagPayload,
    pub network_online: bool,
    /// Most recent ledger events about the appliance; empty offline.
    pub history: Vec<TraceEvent>,
    /// Operating guides for the model; empty offline.
    pub available_procedures: Vec<ProcedureSummary>,
    /// Active session of this actor on this appliance.
    pub session: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedFragment {
    pub fragment_id: String,
    pub media_kind: MediaKind,
    pub body: String,
    pub source_locator: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubstitutionAction {
    /// Replaced by the fragment's text fallback.
    Fallback,
    Omitted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub fragment_id: String,
    pub media_kind: MediaKind,
    pub action: SubstitutionAction,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rendition {
    pub unit_id: String,
    pub title: String,
    pub device: String,
    pub fragments: Vec<RenderedFragment>,
    pub substitutions: Vec<Substitution>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryReceipt {
    pub session: Option<String>,
    pub device: String,
    pub renditions: Vec<Rendition>,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub enum ApplianceLink {
    #[default]
    NoConnection,
    Unilateral,
    Bidirectional,
}

crate::types::impl_from_str_via_serde!(ApplianceLink, "appliance link");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkOp {
    /// Tell the worker what to do by hand.
    Suggest,
    Dispatch,
    ReadState,
}

impl LinkOp {
    pub const ALL: [LinkOp; 3] = [LinkOp::Suggest, LinkOp::Dispatch, LinkOp::ReadState];
}

impl ApplianceLink {
    pub const ALL: [ApplianceLink; 3] = [
        ApplianceLink::NoConnection,
        ApplianceLink::Unilateral,
        ApplianceLink::Bidirectional,
    ];

    pub fn permits(self, op: LinkOp) -> bool {
        match op {
            LinkOp::Suggest => true,
            LinkOp::Dispatch => self != ApplianceLink::NoConnection,
            LinkOp::ReadState => self == ApplianceLink::Bidirectional,
        }
    }
}

impl fmt::Display for ApplianceLink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for LinkOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApplianceCommand {
    PowerOn,
    PowerOff,
    OpenPanel,
    ClosePanel,
    ClearFaults,
    ReadState,
}

crate::types::impl_from_str_via_serde!(ApplianceCommand, "appliance command");

impl ApplianceCommand {
    /// What the worker is told to do when there is no connection.
    pub fn instruction(self) -> &'static str {
        match self {
            ApplianceCommand::PowerOn => "power on the appliance manually",
            ApplianceCommand::PowerOff => "power off the appliance manually",
            ApplianceCommand::OpenPanel => "open the appliance panel manually",
            ApplianceCommand::ClosePanel => "close the appliance panel manually",
            ApplianceCommand::ClearFaults => "clear the fault indicators manually",
            ApplianceCommand::ReadState => "check the appliance indicators",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Power {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Panel {
    Open,
    Closed,
}

/// State record of a simulated appliance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplianceState {
    pub power: Power,
    pub panel: Panel,
    pub faults: BTreeSet<String>,
}

impl Default for ApplianceState {
    fn default() -> Self {
        ApplianceState {
            power: Power::On,
            panel: Panel::Closed,
            faults: BTreeSet::new(),
        }
    }
}

/// Minimal key-value appliance endpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimAppliance {
    state: ApplianceState,
}

impl SimAppliance {
    pub fn with_state(state: ApplianceState) -> Self {
        SimAppliance { state }
    }

    pub fn apply(&mut self, command: ApplianceCommand) {
        let s = &mut self.state;
        match command {
            ApplianceCommand::PowerOn => s.power = Power::On,
            ApplianceCommand::PowerOff => s.power = Power::Off,
            ApplianceCommand::OpenPanel => s.panel = Panel::Open,
            ApplianceCommand::ClosePanel => s.panel = Panel::Closed,
            ApplianceCommand::ClearFaults => s.faults.clear(),
            ApplianceCommand::ReadState => {}
        }
    }

    pub fn state(&self) -> &ApplianceState {
        &self.state
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome")]
pub enum CommandOutcome {
    SuggestionOnly {
        instruction: String,
    },
    Dispatched {
        command: ApplianceCommand,
    },
    DispatchedWithState {
        command: ApplianceCommand,
        state: ApplianceState,
    },
    State {
        state: ApplianceState,
    },
}

/// Link mode configured on an appliance record (`attributes.link`).
pub fn configured_link(entities: &EntityStore, appliance: &EntityRef) -> ApplianceLink {
    entities
        .get(appliance)
        .and_then(|r| r.attributes.get("link").and_then(|l| l.parse().ok()))
        .unwrap_or_default()
}

pub struct DeliveryEngine {
    entities: Arc<EntityStore>,
    workflow: Arc<Workflow>,
    knowledge: Arc<KnowledgeRepo>,
    ledger: Arc<TraceLedger>,
    devices: RwLock<BTreeMap<String, DeviceProfile>>,
    appliances: Mutex<HashMap<String, Arc<Mutex<SimAppliance>>>>,
}

impl DeliveryEngine {
    pub fn new(
        entities: Arc<EntityStore>,
        workflow: Arc<Workflow>,
        knowledge: Arc<KnowledgeRepo>,
        ledger: Arc<TraceLedger>,
    ) -> Self {
        DeliveryEngine {
            entities,
            workflow,
            knowledge,
            ledger,
            devices: RwLock::default(),
            appliances: Mutex::default(),
        }
    }

    pub fn register_device(&self, profile: DeviceProfile) -> Result<(), DeliveryError> {
        profile.validate()?;
        self.devices.write().insert(profile.id.clone(), profile);
        Ok(())
    }

    pub fn device(&self, id: &str) -> Result<DeviceProfile, DeliveryError> {
        self.devices
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| DeliveryError::UnknownDevice(id.to_string()))
    }

    pub fn devices(&self) -> Vec<DeviceProfile> {
        self.devices.read().values().cloned().collect()
    }

    pub fn resolve_context(
        &self,
        scan: &ScanResult,
        actor_id: &str,
    ) -> Result<ContextSnapshot, DeliveryError> {
        if scan.entity.kind != EntityKind::Appliance {
            return Err(DeliveryError::EntityNotAppliance(scan.entity.clone()));
        }
        let online = scan.resolved_online;
        let record = scan.central_record.as_ref();
        let model = record
            .and_then(|r| r.model.clone())
            .or_else(|| scan.in_situ.get("model").map(str::to_string));
        let (history, available_procedures) = if online {
            let mut history = self.ledger.history_for(&scan.entity);
            let skip = history.len().saturating_sub(HISTORY_LIMIT);
            history.drain(..skip);
            let procedures = model
                .as_deref()
                .map(|m| {
                    self.workflow
                        .procedures_for_model(m)
                        .iter()
                        .map(|p| ProcedureSummary {
                            id: p.id.clone(),
                            title: p.title.clone(),
                            steps: p.steps.len() as u32,
                        })
                        .collect()
                })
                .unwrap_or_default();
            (history, procedures)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(ContextSnapshot {
            actor: actor_id.to_string(),
            appliance: scan.entity.clone(),
            model,
            label: record.map(|r| r.label.clone()),
            in_situ: scan.in_situ.clone(),
            network_online: online,
            history,
            available_procedures,
            session: self
                .workflow
                .active_session(actor_id, &scan.entity)
                .map(|s| s.id),
        })
    }

    /// Units bound to one step, in repository rank order.
    fn step_units(&self, model: Option<&str>, step: &StepRef) -> Vec<Arc<LearningUnit>> {
        self.knowledge
            .query_units(&UnitQuery {
                scope: Scope::Both,
                model: model.map(str::to_string),
                step_ref: Some(step.clone()),
                ..UnitQuery::default()
            })
            .into_iter()
            .filter(|u| u.metadata.step_ref.as_ref() == Some(step))
            .collect()
    }

    fn topic_units(&self, model: Option<&str>, topic: &str) -> Vec<Arc<LearningUnit>> {
        self.knowledge.query_units(&UnitQuery {
            scope: Scope::Both,
            model: model.map(str::to_string),
            topic: Some(topic.to_string()),
            ..UnitQuery::default()
        })
    }

    fn push_unique(out: &mut Vec<String>, seen: &mut BTreeSet<String>, id: &str) {
        if seen.insert(id.to_string()) {
            out.push(id.to_string());
        }
    }

    fn before_work(&self, model: Option<&str>, procedures: &[Arc<Procedure>]) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for procedure in procedures {
            for step in &procedure.steps {
                for unit in self.step_units(model, &StepRef::new(procedure.id.as_str(), step.index))
                {
                    Self::push_unique(&mut out, &mut seen, &unit.id);
                }
            }
        }
        for procedure in procedures {
            for step in &procedure.steps {
                for id in &step.learning_unit_refs {
                    if self.knowledge.contains_unit(id) {
                        Self::push_unique(&mut out, &mut seen, id);
                    }
                }
            }
        }
        out
    }

    pub fn select_units(
        &self,
        context: &ContextSnapshot,
        mode: LearningMode,
    ) -> Result<Vec<String>, DeliveryError> {
        let model = context.model.as_deref();
        match mode {
            LearningMode::BeforeWork => {
                let procedures = match &context.session {
                    Some(id) => vec![
                        self.workflow
                            .session(id)
                            .map_err(|_| DeliveryError::UnknownSession(id.clone()))?
                            .procedure,
                    ],
                    None => model
                        .map(|m| self.workflow.procedures_for_model(m))
                        .unwrap_or_default(),
                };
                Ok(self.before_work(model, &procedures))
            }
            LearningMode::DuringWork => {
                let id = context
                    .session
                    .as_ref()
                    .ok_or(DeliveryError::NoActiveSession)?;
                let session = self
                    .workflow
                    .session(id)
                    .map_err(|_| DeliveryError::UnknownSession(id.clone()))?;
                if session.state != SessionState::Active {
                    return Err(DeliveryError::NoActiveSession);
                }
                let step = session
                    .procedure
                    .step(session.cursor)
                    .ok_or(DeliveryError::NoActiveSession)?;
                let mut out = Vec::new();
                let mut seen = BTreeSet::new();
                let step_ref = StepRef::new(session.procedure.id.as_str(), step.index);
                for unit in self.step_units(model, &step_ref) {
                    Self::push_unique(&mut out, &mut seen, &unit.id);
                }
                for id in &step.learning_unit_refs {
                    if self.knowledge.contains_unit(id) {
                        Self::push_unique(&mut out, &mut seen, id);
                    }
                }
                Ok(out)
            }
            LearningMode::AfterWork => {
                let session_id = match &context.session {
                    Some(id) => id.clone(),
                    None => self
                        .last_session_on(&context.appliance, &context.actor)
                        .ok_or(DeliveryError::NoActiveSession)?,
                };
                self.after_work(model, &session_id)
            }
        }
    }

    /// Most recent session on `appliance`, preferring the actor's own.
    fn last_session_on(&self, appliance: &EntityRef, actor_id: &str) -> Option<String> {
        let sessions = self.ledger.sessions_on(appliance);
        sessions
            .iter()
            .rev()
            .find(|(_, actor)| actor == actor_id)
            .or_else(|| sessions.last())
            .map(|(s, _)| s.clone())
    }

    /// Units for a finished (or running) session, derived from its events:
    /// performed steps in the order they were accepted, then the units
    /// explaining each kind of deviation that occurred.
    fn after_work(
        &self,
        model: Option<&str>,
        session_id: &str,
    ) -> Result<Vec<String>, DeliveryError> {
        let events = self
            .ledger
            .session_events(session_id)
            .map_err(|_| DeliveryError::UnknownSession(session_id.to_string()))?;
        let procedure_id = events
            .iter()
            .find_map(|e| match &e.payload {
                EventPayload::SessionStarted { procedure, .. } => Some(procedure.clone()),
                _ => None,
            })
            .ok_or_else(|| DeliveryError::UnknownSession(session_id.to_string()))?;
        let steps = self
            .ledger
            .accepted_steps(session_id)
            .map_err(|_| DeliveryError::UnknownSession(session_id.to_string()))?;
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for step in steps {
            for unit in self.step_units(model, &StepRef::new(procedure_id.as_str(), step)) {
                Self::push_unique(&mut out, &mut seen, &unit.id);
            }
        }
        let mut topics = Vec::new();
        for event in &events {
            if let EventPayload::Deviation { deviations, .. } = &event.payload {
                for d in deviations {
                    if !topics.contains(&d.topic()) {
                        topics.push(d.topic());
                    }
                }
            }
        }
        for topic in topics {
            for unit in self.topic_units(model, topic) {
                Self::push_unique(&mut out, &mut seen, &unit.id);
            }
        }
        Ok(out)
    }

    pub fn adapt(&self, unit: &LearningUnit, device: &DeviceProfile) -> Rendition {
        let mut fragments = Vec::new();
        let mut substitutions = Vec::new();
        let members = self.knowledge.fragments_of(unit);
        for f in &members {
            if device.can_render(f.media_kind) {
                fragments.push(RenderedFragment {
                    fragment_id: f.id.clone(),
                    media_kind: f.media_kind,
                    body: f.body.clone(),
                    source_locator: f.source_locator.clone(),
                });
            } else if let Some(text) = &f.fallback_text {
                fragments.push(RenderedFragment {
                    fragment_id: f.id.clone(),
                    media_kind: MediaKind::Text,
                    body: text.clone(),
                    source_locator: f.source_locator.clone(),
                });
                substitutions.push(Substitution {
                    fragment_id: f.id.clone(),
                    media_kind: f.media_kind,
                    action: SubstitutionAction::Fallback,
                    note: format!("{} shown as text", f.media_kind),
                });
            } else {
                substitutions.push(Substitution {
                    fragment_id: f.id.clone(),
                    media_kind: f.media_kind,
                    action: SubstitutionAction::Omitted,
                    note: format!("{} not renderable on {}", f.media_kind, device.id),
                });
            }
        }
        if fragments.is_empty() {
            let (fragment_id, source_locator) = members
                .first()
                .map(|f| (f.id.clone(), f.source_locator.clone()))
                .unwrap_or_default();
            fragments.push(RenderedFragment {
                fragment_id,
                media_kind: MediaKind::Text,
                body: format!("{} (content available on another device)", unit.title),
                source_locator,
            });
        }
        Rendition {
            unit_id: unit.id.clone(),
            title: unit.title.clone(),
            device: device.id.clone(),
            fragments,
            substitutions,
        }
    }

    pub fn rendition(&self, unit_id: &str, device_id: &str) -> Result<Rendition, DeliveryError> {
        let device = self.device(device_id)?;
        let unit = self
            .knowledge
            .unit(unit_id)
            .map_err(|_| DeliveryError::UnknownUnit(unit_id.to_string()))?;
        Ok(self.adapt(&unit, &device))
    }

    /// Renders the units and records one delivery event per unit. Nothing is
    /// recorded if any unit or the device is unknown.
    pub fn deliver(
        &self,
        actor_id: &str,
        session: Option<&str>,
        unit_ids: &[String],
        device_id: &str,
    ) -> Result<DeliveryReceipt, DeliveryError> {
        let device = self.device(device_id)?;
        let units = unit_ids
            .iter()
            .map(|id| {
                self.knowledge
                    .unit(id)
                    .map_err(|_| DeliveryError::UnknownUnit(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let renditions: Vec<Rendition> = units.iter().map(|u| self.adapt(u, &device)).collect();
        for unit in &units {
            self.ledger.append(NewEvent::new(
                actor_id,
                session,
                EventPayload::UnitDelivered {
                    unit: unit.id.clone(),
                    device: device.id.clone(),
                },
            ));
        }
        Ok(DeliveryReceipt {
            session: session.map(str::to_string),
            device: device.id,
            renditions,
        })
    }

    /// Open generic units about a part: those listing the part's model or
    /// sharing one of its topic tags.
    pub fn enrich_on_part(&self, part: &EntityRef) -> Vec<String> {
        let Some(record) = self.entities.get(part) else {
            return Vec::new();
        };
        let topics: BTreeSet<&String> = record.topics.iter().collect();
        self.knowledge
            .query_units(&UnitQuery {
                scope: Scope::OpenKb,
                ..UnitQuery::default()
            })
            .into_iter()
            .filter(|u| {
                let m = &u.metadata;
                record
                    .model
                    .as_ref()
                    .is_some_and(|model| m.appliance_models.contains(model))
                    || m.topics.iter().any(|t| topics.contains(t))
            })
            .map(|u| u.id.clone())
            .collect()
    }

    fn sim(&self, appliance_id: &str) -> Arc<Mutex<SimAppliance>> {
        self.appliances
            .lock()
            .entry(appliance_id.to_string())
            .or_default()
            .clone()
    }

    pub fn appliance_state(&self, appliance_id: &str) -> ApplianceState {
        self.sim(appliance_id).lock().state().clone()
    }

    /// Performs one link operation against the simulated appliance.
    pub fn perform(
        &self,
        appliance: &EntityRef,
        link: ApplianceLink,
        op: LinkOp,
        command: ApplianceCommand,
    ) -> Result<CommandOutcome, DeliveryError> {
        if !link.permits(op) {
            return Err(DeliveryError::LinkViolation { link, op });
        }
        let sim = self.sim(&appliance.id);
        let mut sim = sim.lock();
        Ok(match op {
            LinkOp::Suggest => CommandOutcome::SuggestionOnly {
                instruction: command.instruction().to_string(),
            },
            LinkOp::Dispatch => {
                sim.apply(command);
                CommandOutcome::Dispatched { command }
            }
            LinkOp::ReadState => CommandOutcome::State {
                state: sim.state().clone(),
            },
        })
    }

    /// Issues `command` within a session the way the link allows: a manual
    /// instruction without a connection, a blind dispatch over a one-way
    /// link, dispatch plus state echo over a two-way link.
    pub fn appliance_command(
        &self,
        session_id: &str,
        link: ApplianceLink,
        command: ApplianceCommand,
    ) -> Result<CommandOutcome, DeliveryError> {
        let session = self
            .workflow
            .session(session_id)
            .map_err(|_| DeliveryError::UnknownSession(session_id.to_string()))?;
        if session.state != SessionState::Active {
            return Err(DeliveryError::SessionClosed(session_id.to_string()));
        }
        let appliance = &session.appliance;
        if command == ApplianceCommand::ReadState {
            return self.perform(appliance, link, LinkOp::ReadState, command);
        }
        match link {
            ApplianceLink::NoConnection => self.perform(appliance, link, LinkOp::Suggest, command),
            ApplianceLink::Unilateral => self.perform(appliance, link, LinkOp::Dispatch, command),
            ApplianceLink::Bidirectional => {
                self.perform(appliance, link, LinkOp::Dispatch, command)?;
                match self.perform(appliance, link, LinkOp::ReadState, command)? {
                    CommandOutcome::State { state } => {
                        Ok(CommandOutcome::DispatchedWithState { command, state })
                    }
                    other => Ok(other),
                }
            }
        }
    }
}
