//! The assembled system. Every external entry point (HTTP handlers and the
//! scenario runner) goes through [`Epss`], so both produce the same ledger
//! for the same sequence of operations.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::collab::{CollabError, CollabRelay, HelpRequest, Message, MessageBody};
use crate::delivery::{
    configured_link, ApplianceCommand, ApplianceLink, CommandOutcome, ContextSnapshot,
    DeliveryEngine, DeliveryError, DeliveryReceipt, LearningMode, Rendition,
};
use crate::fixtures::FixtureBundle;
use crate::knowledge::xml::{import_xml, ImportedUnit};
use crate::knowledge::{KnowledgeError, KnowledgeRepo, LearningUnit, SegmentationRules, UnitQuery};
use crate::tags::{EntityStore, RfidTag, ScanResult, TagContext, TagError};
use crate::trace::{
    Clock, ConformanceReport, TimelineEntry, TraceError, TraceEvent, TraceFilter, TraceLedger,
};
use crate::types::{EntityKind, EntityRef};
use crate::workflow::{
    EnforcementMode, PrescribedAction, StepOutcome, WorkSession, Workflow, WorkflowError,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EpssError {
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Delivery(#[from] DeliveryError),
    #[error(transparent)]
    Collab(#[from] CollabError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("actor `{0}` has not scanned an appliance yet")]
    NoContext(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl EpssError {
    pub fn code(&self) -> &'static str {
        match self {
            EpssError::Tag(e) => e.code(),
            EpssError::Workflow(e) => e.code(),
            EpssError::Knowledge(e) => e.code(),
            EpssError::Delivery(e) => e.code(),
            EpssError::Collab(e) => e.code(),
            EpssError::Trace(e) => e.code(),
            EpssError::NoContext(_) => "NoContext",
            EpssError::InvalidRequest(_) => "InvalidRequest",
        }
    }
}

pub type EpssResult<T> = Result<T, EpssError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanResponse {
    pub scan: ScanResult,
    /// Present when an appliance was scanned.
    pub context: Option<ContextSnapshot>,
    /// Content delivered because a part was scanned during a session.
    pub enrichment: Option<DeliveryReceipt>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnResponse {
    pub mode: LearningMode,
    pub appliance: EntityRef,
    pub session: Option<String>,
    pub units: Vec<String>,
    pub receipt: DeliveryReceipt,
}

pub struct Epss {
    pub entities: Arc<EntityStore>,
    pub ledger: Arc<TraceLedger>,
    pub tags: TagContext,
    pub workflow: Arc<Workflow>,
    pub knowledge: Arc<KnowledgeRepo>,
    pub delivery: DeliveryEngine,
    pub collab: CollabRelay,
    network_online: AtomicBool,
    /// Last appliance context per actor.
    contexts: Mutex<HashMap<String, ContextSnapshot>>,
}

impl Epss {
    pub fn new(clock: Clock) -> Self {
        let entities = Arc::new(EntityStore::default());
        let ledger = Arc::new(TraceLedger::new(clock));
        let knowledge = Arc::new(KnowledgeRepo::new());
        let workflow = Arc::new(Workflow::new(entities.clone(), ledger.clone()));
        Epss {
            tags: TagContext::new(entities.clone(), ledger.clone(), true),
            delivery: DeliveryEngine::new(
                entities.clone(),
                workflow.clone(),
                knowledge.clone(),
                ledger.clone(),
            ),
            collab: CollabRelay::new(workflow.clone(), knowledge.clone(), ledger.clone()),
            entities,
            ledger,
            workflow,
            knowledge,
            network_online: AtomicBool::new(true),
            contexts: Mutex::default(),
        }
    }

    /// Loads every fixture of the bundle. Loading records no trace events.
    pub fn from_bundle(bundle: &FixtureBundle, clock: Clock) -> EpssResult<Self> {
        let epss = Epss::new(clock);
        epss.load(bundle)?;
        Ok(epss)
    }

    pub fn load(&self, bundle: &FixtureBundle) -> EpssResult<()> {
        for record in &bundle.entities {
            self.entities.insert(record.clone());
        }
        for tag in &bundle.tags {
            self.tags.load_fixture(tag)?;
        }
        for device in &bundle.devices {
            self.delivery.register_device(device.clone())?;
        }
        for actor in &bundle.actors {
            self.workflow.register_actor(actor.clone());
        }
        for procedure in &bundle.procedures {
            self.workflow.load_procedure(procedure)?;
        }
        let rules = SegmentationRules::default();
        for manifest in &bundle.manifests {
            self.knowledge.load_manifest(manifest, &rules)?;
        }
        Ok(())
    }

    pub fn network_online(&self) -> bool {
        self.network_online.load(Ordering::SeqCst)
    }

    pub fn set_network(&self, online: bool) {
        self.network_online.store(online, Ordering::SeqCst);
    }

    /// Scans a tag. `online` overrides the current network state.
    pub fn scan(
        &self,
        actor_id: &str,
        tag_id: &str,
        online: Option<bool>,
    ) -> EpssResult<ScanResponse> {
        self.workflow.actor(actor_id)?;
        let online = online.unwrap_or_else(|| self.network_online());
        let scan = self.tags.scan(actor_id, tag_id, online)?;
        let mut context = None;
        let mut enrichment = None;
        match scan.entity.kind {
            EntityKind::Appliance => {
                let snapshot = self.delivery.resolve_context(&scan, actor_id)?;
                self.contexts
                    .lock()
                    .insert(actor_id.to_string(), snapshot.clone());
                context = Some(snapshot);
            }
            EntityKind::Part if online => {
                if let Some(session) = self.workflow.active_session_of(actor_id) {
                    let units = self.delivery.enrich_on_part(&scan.entity);
                    if !units.is_empty() {
                        enrichment = Some(self.delivery.deliver(
                            actor_id,
                            Some(&session.id),
                            &units,
                            &session.actor.device,
                        )?);
                    }
                }
            }
            _ => {}
        }
        Ok(ScanResponse {
            scan,
            context,
            enrichment,
        })
    }

    /// The actor's last appliance context, with its session refreshed.
    pub fn context_of(&self, actor_id: &str) -> EpssResult<ContextSnapshot> {
        let mut snapshot = self
            .contexts
            .lock()
            .get(actor_id)
            .cloned()
            .ok_or_else(|| EpssError::NoContext(actor_id.to_string()))?;
        snapshot.session = self
            .workflow
            .active_session(actor_id, &snapshot.appliance)
            .map(|s| s.id);
        Ok(snapshot)
    }

    pub fn start_session(
        &self,
        actor_id: &str,
        procedure_id: &str,
        appliance_id: &str,
        mode: EnforcementMode,
    ) -> EpssResult<WorkSession> {
        Ok(self.workflow.start_session(
            actor_id,
            &EntityRef::appliance(appliance_id),
            procedure_id,
            mode,
        )?)
    }

    pub fn session(&self, session_id: &str) -> EpssResult<WorkSession> {
        Ok(self.workflow.session(session_id)?)
    }

    pub fn prescription(&self, session_id: &str) -> EpssResult<PrescribedAction> {
        Ok(self.workflow.current_prescription(session_id)?)
    }

    pub fn report_step(
        &self,
        session_id: &str,
        step: u32,
        tools: &[String],
        parts: &[String],
    ) -> EpssResult<StepOutcome> {
        let tools: BTreeSet<EntityRef> = tools.iter().map(EntityRef::tool).collect();
        let parts: BTreeSet<EntityRef> = parts.iter().map(EntityRef::part).collect();
        Ok(self
            .workflow
            .report_step(session_id, step, &tools, &parts)?)
    }

    pub fn abort(&self, session_id: &str, reason: &str) -> EpssResult<WorkSession> {
        Ok(self.workflow.abort_session(session_id, reason)?)
    }

    /// Selects units for `mode` from the actor's context and delivers them to
    /// the actor's device.
    pub fn learn(&self, actor_id: &str, mode: LearningMode) -> EpssResult<LearnResponse> {
        let actor = self.workflow.actor(actor_id)?;
        let context = self.context_of(actor_id)?;
        let units = self.delivery.select_units(&context, mode)?;
        let receipt =
            self.delivery
                .deliver(actor_id, context.session.as_deref(), &units, &actor.device)?;
        Ok(LearnResponse {
            mode,
            appliance: context.appliance,
            session: context.session,
            units,
            receipt,
        })
    }

    pub fn deliver(
        &self,
        actor_id: &str,
        session: Option<&str>,
        units: &[String],
        device: Option<&str>,
    ) -> EpssResult<DeliveryReceipt> {
        let actor = self.workflow.actor(actor_id)?;
        let device = device.unwrap_or(&actor.device);
        Ok(self.delivery.deliver(actor_id, session, units, device)?)
    }

    pub fn query_units(&self, query: &UnitQuery) -> Vec<Arc<LearningUnit>> {
        self.knowledge.query_units(query)
    }

    pub fn unit(&self, unit_id: &str) -> EpssResult<Arc<LearningUnit>> {
        Ok(self.knowledge.unit(unit_id)?)
    }

    pub fn rendition(&self, unit_id: &str, device: &str) -> EpssResult<Rendition> {
        Ok(self.delivery.rendition(unit_id, device)?)
    }

    pub fn export_unit(&self, unit_id: &str) -> EpssResult<String> {
        Ok(self.knowledge.export_xml(unit_id)?)
    }

    /// Parses a unit document and indexes it with its fragments.
    pub fn import_unit(&self, doc: &str) -> EpssResult<ImportedUnit> {
        let imported = import_xml(doc)?;
        self.knowledge.add_fragments(&imported.fragments);
        self.knowledge.index_unit(imported.unit.clone())?;
        Ok(imported)
    }

    pub fn write_tag(
        &self,
        actor_id: &str,
        tag_id: &str,
        key: &str,
        value: Option<&str>,
    ) -> EpssResult<RfidTag> {
        self.workflow.actor(actor_id)?;
        Ok(match value {
            Some(v) => self.tags.write_tag(actor_id, tag_id, key, v)?,
            None => self.tags.erase_tag(actor_id, tag_id, key)?,
        })
    }

    pub fn request_help(&self, session_id: &str, problem: &str) -> EpssResult<HelpRequest> {
        Ok(self.collab.request_help(session_id, problem)?)
    }

    pub fn claim_help(&self, request_id: &str, expert: &str) -> EpssResult<HelpRequest> {
        Ok(self.collab.claim(request_id, expert)?)
    }

    pub fn close_help(&self, request_id: &str) -> EpssResult<HelpRequest> {
        Ok(self.collab.close(request_id)?)
    }

    pub fn post_message(
        &self,
        request_id: &str,
        from: &str,
        body: MessageBody,
    ) -> EpssResult<Message> {
        Ok(self.collab.post_message(request_id, from, body)?)
    }

    pub fn poll_messages(&self, request_id: &str, after: u32) -> EpssResult<Vec<Message>> {
        Ok(self.collab.poll_messages(request_id, after)?)
    }

    /// Sends a command to an appliance in the context of a session on it.
    /// Without an explicit link the appliance's configured link is used.
    pub fn appliance_command(
        &self,
        appliance_id: &str,
        session_id: &str,
        link: Option<ApplianceLink>,
        command: ApplianceCommand,
    ) -> EpssResult<CommandOutcome> {
        let session = self.workflow.session(session_id)?;
        if session.appliance.id != appliance_id {
            return Err(EpssError::InvalidRequest(format!(
                "session `{session_id}` is not on appliance `{appliance_id}`"
            )));
        }
        let link = link.unwrap_or_else(|| configured_link(&self.entities, &session.appliance));
        Ok(self.delivery.appliance_command(session_id, link, command)?)
    }

    pub fn trace(&self, filter: &TraceFilter) -> Vec<TraceEvent> {
        self.ledger.query(filter)
    }

    /// Conformance of a session from its ledger events and its procedure.
    pub fn conformance(&self, session_id: &str) -> EpssResult<ConformanceReport> {
        let procedure = self.workflow.session(session_id)?.procedure;
        Ok(self.ledger.verify_conformance(session_id, &procedure)?)
    }

    pub fn replay(&self, session_id: &str) -> EpssResult<Vec<TimelineEntry>> {
        Ok(self.ledger.replay(session_id)?)
    }
}
