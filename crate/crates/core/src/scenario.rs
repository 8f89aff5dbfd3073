//! Scripted end-to-end runs. A script declares the fixtures it uses and a
//! list of actions; the runner builds a fresh system from those fixtures
//! only, runs the actions through [`Epss`] on a logical clock and reports
//! from the ledger.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::collab::{MessageBody, MessageKind};
use crate::delivery::{ApplianceCommand, ApplianceLink, LearningMode};
use crate::fixtures::FixtureBundle;
use crate::system::{Epss, EpssError};
use crate::trace::{verify_trace, Clock, ConformanceReport, EventPayload, ReplayedState};
use crate::workflow::EnforcementMode;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScenarioError {
    #[error("script error: {0}")]
    Script(String),
    #[error("action {index} ({action}) failed with {code}: {message}")]
    ActionFailed {
        index: usize,
        action: String,
        code: String,
        message: String,
    },
}

impl ScenarioError {
    pub fn code(&self) -> &'static str {
        match self {
            ScenarioError::Script(_) => "ScriptError",
            ScenarioError::ActionFailed { .. } => "ActionFailed",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureRefs {
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub procedures: Vec<String>,
    #[serde(default)]
    pub manifests: Vec<String>,
    #[serde(default)]
    pub actors: Vec<String>,
    #[serde(default)]
    pub devices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Scan {
        actor: String,
        tag: String,
        #[serde(default)]
        online: Option<bool>,
    },
    SetNetwork {
        online: bool,
    },
    StartSession {
        actor: String,
        procedure: String,
        appliance: String,
        #[serde(default)]
        mode: EnforcementMode,
    },
    ReportStep {
        actor: String,
        step: u32,
        #[serde(default)]
        tools: Vec<String>,
        #[serde(default)]
        parts: Vec<String>,
    },
    RequestUnits {
        actor: String,
        mode: LearningMode,
    },
    RequestHelp {
        actor: String,
        problem: String,
    },
    ClaimHelp {
        actor: String,
    },
    PostMessage {
        actor: String,
        #[serde(default = "text_kind")]
        kind: MessageKind,
        #[serde(default)]
        text: String,
        #[serde(default)]
        step: Option<u32>,
        #[serde(default)]
        unit: Option<String>,
    },
    CloseHelp {
        actor: String,
    },
    WriteTag {
        actor: String,
        tag: String,
        key: String,
        value: String,
    },
    ApplianceCommand {
        actor: String,
        command: ApplianceCommand,
        #[serde(default)]
        link: Option<ApplianceLink>,
    },
    Abort {
        actor: String,
        #[serde(default = "default_abort_reason")]
        reason: String,
    },
}

fn text_kind() -> MessageKind {
    MessageKind::Text
}

fn default_abort_reason() -> String {
    "aborted by the technician".into()
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Scan { .. } => "scan",
            Action::SetNetwork { .. } => "set_network",
            Action::StartSession { .. } => "start_session",
            Action::ReportStep { .. } => "report_step",
            Action::RequestUnits { .. } => "request_units",
            Action::RequestHelp { .. } => "request_help",
            Action::ClaimHelp { .. } => "claim_help",
            Action::PostMessage { .. } => "post_message",
            Action::CloseHelp { .. } => "close_help",
            Action::WriteTag { .. } => "write_tag",
            Action::ApplianceCommand { .. } => "appliance_command",
            Action::Abort { .. } => "abort",
        }
    }

    fn actor(&self) -> Option<&str> {
        match self {
            Action::SetNetwork { .. } => None,
            Action::Scan { actor, .. }
            | Action::StartSession { actor, .. }
            | Action::ReportStep { actor, .. }
            | Action::RequestUnits { actor, .. }
            | Action::RequestHelp { actor, .. }
            | Action::ClaimHelp { actor }
            | Action::PostMessage { actor, .. }
            | Action::CloseHelp { actor }
            | Action::WriteTag { actor, .. }
            | Action::ApplianceCommand { actor, .. }
            | Action::Abort { actor, .. } => Some(actor),
        }
    }
}

/// One scripted action; `expect_error` names the error code the action
/// must fail with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScriptStep {
    #[serde(flatten)]
    pub action: Action,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expect_error: Option<String>,
}

impl<'de> Deserialize<'de> for ScriptStep {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let mut table = toml::Table::deserialize(d)?;
        let expect_error = match table.remove("expect_error") {
            None => None,
            Some(toml::Value::String(s)) => Some(s),
            Some(_) => return Err(serde::de::Error::custom("expect_error must be a string")),
        };
        let action =
            Action::deserialize(toml::Value::Table(table)).map_err(serde::de::Error::custom)?;
        Ok(ScriptStep {
            action,
            expect_error,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub fixtures: FixtureRefs,
    #[serde(default, rename = "action")]
    pub actions: Vec<ScriptStep>,
}

impl ScenarioScript {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Script(e.to_string()))
    }

    /// Checks the script against the bundle: declared fixtures exist, and
    /// actions only use declared fixtures.
    pub fn validate(&self, bundle: &FixtureBundle) -> Result<(), ScenarioError> {
        let err = |msg: String| Err(ScenarioError::Script(format!("{}: {msg}", self.name)));
        let f = &self.fixtures;
        let (tags, procedures, manifests, actors, devices) = (
            set(&f.tags),
            set(&f.procedures),
            set(&f.manifests),
            set(&f.actors),
            set(&f.devices),
        );
        for t in &tags {
            if !bundle.tags.iter().any(|x| x.tag_id == *t) {
                return err(format!("declared tag `{t}` is not in the fixtures"));
            }
        }
        for p in &procedures {
            if !bundle.procedures.iter().any(|x| x.id == *p) {
                return err(format!("declared procedure `{p}` is not in the fixtures"));
            }
        }
        for m in &manifests {
            if bundle.manifest(m).is_none() {
                return err(format!("declared manifest `{m}` is not in the fixtures"));
            }
        }
        for d in &devices {
            if !bundle.devices.iter().any(|x| x.id == *d) {
                return err(format!("declared device `{d}` is not in the fixtures"));
            }
        }
        for a in &actors {
            match bundle.actors.iter().find(|x| x.id == *a) {
                None => return err(format!("declared actor `{a}` is not in the fixtures")),
                Some(actor) if !devices.contains(actor.device.as_str()) => {
                    return err(format!(
                        "actor `{a}` uses undeclared device `{}`",
                        actor.device
                    ))
                }
                Some(_) => {}
            }
        }
        for (i, step) in self.actions.iter().enumerate() {
            let at =
                |what: &str, id: &str| format!("action {} uses undeclared {what} `{id}`", i + 1);
            if let Some(actor) = step.action.actor() {
                if !actors.contains(actor) {
                    return err(at("actor", actor));
                }
            }
            match &step.action {
                Action::Scan { tag, .. } | Action::WriteTag { tag, .. }
                    if !tags.contains(tag.as_str()) =>
                {
                    return err(at("tag", tag))
                }
                Action::StartSession {
                    procedure,
                    appliance,
                    ..
                } => {
                    if !procedures.contains(procedure.as_str()) {
                        return err(at("procedure", procedure));
                    }
                    if !bundle.entities.iter().any(|e| e.id == *appliance) {
                        return err(at("appliance", appliance));
                    }
                }
                Action::PostMessage {
                    kind, step, unit, ..
                } => match kind {
                    MessageKind::StepAnnotation if step.is_none() => {
                        return err(format!("action {}: StepAnnotation needs `step`", i + 1))
                    }
                    MessageKind::UnitPointer if unit.is_none() => {
                        return err(format!("action {}: UnitPointer needs `unit`", i + 1))
                    }
                    _ => {}
                },
                _ => {}
            }
        }
        Ok(())
    }

    /// The part of `bundle` this script declares. Central entity records are
    /// always included.
    pub fn select_fixtures(&self, bundle: &FixtureBundle) -> FixtureBundle {
        let f = &self.fixtures;
        FixtureBundle {
            entities: bundle.entities.clone(),
            tags: bundle
                .tags
                .iter()
                .filter(|t| f.tags.contains(&t.tag_id))
                .cloned()
                .collect(),
            actors: bundle
                .actors
                .iter()
                .filter(|a| f.actors.contains(&a.id))
                .cloned()
                .collect(),
            devices: bundle
                .devices
                .iter()
                .filter(|d| f.devices.contains(&d.id))
                .cloned()
                .collect(),
            procedures: bundle
                .procedures
                .iter()
                .filter(|p| f.procedures.contains(&p.id))
                .cloned()
                .collect(),
            manifests: f
                .manifests
                .iter()
                .filter_map(|m| bundle.manifest(m).cloned())
                .collect(),
            scripts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub actor: String,
    pub procedure: String,
    pub state: ReplayedState,
    pub steps_done: usize,
    pub conformance: ConformanceReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveredUnit {
    pub seq: u64,
    pub session: Option<String>,
    pub unit: String,
    pub device: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub script: String,
    pub actions: usize,
    pub sessions: Vec<SessionReport>,
    pub chain_verified: bool,
    pub events: usize,
    pub head_hash: String,
    pub delivered: Vec<DeliveredUnit>,
    /// One line per action.
    pub log: Vec<String>,
}

pub struct ScenarioRun {
    pub report: ScenarioReport,
    /// Canonical trace file contents.
    pub trace: Vec<u8>,
    pub system: Epss,
}

impl std::fmt::Debug for ScenarioRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScenarioRun")
            .field("report", &self.report)
            .field("trace_bytes", &self.trace.len())
            .finish_non_exhaustive()
    }
}

struct Runner {
    epss: Epss,
    last_help: Option<String>,
}

impl Runner {
    fn active_session(&self, actor: &str) -> Result<String, EpssError> {
        self.epss
            .workflow
            .active_session_of(actor)
            .map(|s| s.id)
            .ok_or(EpssError::Delivery(
                crate::delivery::DeliveryError::NoActiveSession,
            ))
    }

    fn help(&self) -> Result<String, EpssError> {
        self.last_help
            .clone()
            .ok_or_else(|| EpssError::InvalidRequest("no help request raised yet".into()))
    }

    fn exec(&mut self, action: &Action) -> Result<String, EpssError> {
        let e = &self.epss;
        Ok(match action {
            Action::Scan { actor, tag, online } => {
                let r = e.scan(actor, tag, *online)?;
                let mut line = format!(
                    "{actor} scanned {tag} ({}, {})",
                    r.scan.entity,
                    if r.scan.resolved_online {
                        "online"
                    } else {
                        "offline"
                    }
                );
                if let Some(ctx) = &r.context {
                    line += &format!(", {} guide(s) available", ctx.available_procedures.len());
                }
                if let Some(receipt) = &r.enrichment {
                    line += &format!(", {} enrichment unit(s)", receipt.renditions.len());
                }
                line
            }
            Action::SetNetwork { online } => {
                e.set_network(*online);
                format!("network {}", if *online { "online" } else { "offline" })
            }
            Action::StartSession {
                actor,
                procedure,
                appliance,
                mode,
            } => {
                let s = e.start_session(actor, procedure, appliance, *mode)?;
                format!(
                    "{actor} started {} ({procedure} on {appliance}, {mode:?})",
                    s.id
                )
            }
            Action::ReportStep {
                actor,
                step,
                tools,
                parts,
            } => {
                let session = self.active_session(actor)?;
                let o = e.report_step(&session, *step, tools, parts)?;
                let devs: Vec<String> = o.deviations.iter().map(|d| d.to_string()).collect();
                format!(
                    "{actor} reported step {step} in {session}: {}{} -> cursor {}, {:?}",
                    if o.accepted { "accepted" } else { "rejected" },
                    if devs.is_empty() {
                        String::new()
                    } else {
                        format!(" [{}]", devs.join("; "))
                    },
                    o.cursor,
                    o.state
                )
            }
            Action::RequestUnits { actor, mode } => {
                let r = e.learn(actor, *mode)?;
                format!("{actor} {mode:?}: {}", r.units.join(", "))
            }
            Action::RequestHelp { actor, problem } => {
                let session = self.active_session(actor)?;
                let h = e.request_help(&session, problem)?;
                self.last_help = Some(h.id.clone());
                format!("{actor} requested help {} in {session}", h.id)
            }
            Action::ClaimHelp { actor } => {
                let h = e.claim_help(&self.help()?, actor)?;
                format!("{actor} claimed {}", h.id)
            }
            Action::PostMessage {
                actor,
                kind,
                text,
                step,
                unit,
            } => {
                let body = match kind {
                    MessageKind::Text => MessageBody::Text { text: text.clone() },
                    MessageKind::StepAnnotation => MessageBody::StepAnnotation {
                        step: step.unwrap_or_default(),
                        text: text.clone(),
                    },
                    MessageKind::UnitPointer => MessageBody::UnitPointer {
                        unit: unit.clone().unwrap_or_default(),
                        text: text.clone(),
                    },
                };
                let request = self.help()?;
                let m = e.post_message(&request, actor, body)?;
                format!("{actor} posted #{} ({kind:?}) on {request}", m.seq)
            }
            Action::CloseHelp { actor } => {
                let h = e.close_help(&self.help()?)?;
                format!("{actor} closed {}", h.id)
            }
            Action::WriteTag {
                actor,
                tag,
                key,
                value,
            } => {
                let t = e.write_tag(actor, tag, key, Some(value))?;
                format!(
                    "{actor} wrote {key} on {tag} ({} bytes used)",
                    t.payload.serialized_size()
                )
            }
            Action::ApplianceCommand {
                actor,
                command,
                link,
            } => {
                let session = self.active_session(actor)?;
                let appliance = e.session(&session)?.appliance.id;
                let outcome = e.appliance_command(&appliance, &session, *link, *command)?;
                format!(
                    "{actor} {command:?} on {appliance}: {}",
                    serde_json::to_string(&outcome).unwrap_or_default()
                )
            }
            Action::Abort { actor, reason } => {
                let session = self.active_session(actor)?;
                e.abort(&session, reason)?;
                format!("{actor} aborted {session}")
            }
        })
    }
}

fn set(v: &[String]) -> BTreeSet<&str> {
    v.iter().map(String::as_str).collect()
}

/// Report built from the ledger after a run.
fn report(epss: &Epss, script: &ScenarioScript, log: Vec<String>) -> ScenarioReport {
    let events = epss.ledger.snapshot();
    let mut sessions = Vec::new();
    let mut delivered = Vec::new();
    for event in &events {
        match &event.payload {
            EventPayload::SessionStarted { procedure, .. } => {
                let session_id = event.session_id.clone().unwrap_or_default();
                let Ok(procedure_def) = epss.workflow.procedure(procedure) else {
                    continue;
                };
                let steps_total = procedure_def.steps.len() as u32;
                let (Ok(state), Ok(conformance), Ok(done)) = (
                    epss.ledger.replayed_state(&session_id, steps_total),
                    epss.ledger.verify_conformance(&session_id, &procedure_def),
                    epss.ledger.accepted_steps(&session_id),
                ) else {
                    continue;
                };
                sessions.push(SessionReport {
                    session_id,
                    actor: event.actor_id.clone(),
                    procedure: procedure.clone(),
                    state,
                    steps_done: done.len(),
                    conformance,
                });
            }
            EventPayload::UnitDelivered { unit, device } => delivered.push(DeliveredUnit {
                seq: event.seq,
                session: event.session_id.clone(),
                unit: unit.clone(),
                device: device.clone(),
            }),
            _ => {}
        }
    }
    let trace = epss.ledger.to_trace_bytes();
    ScenarioReport {
        script: script.name.clone(),
        actions: script.actions.len(),
        sessions,
        chain_verified: epss.ledger.verify_chain() && verify_trace(&trace).is_ok(),
        events: events.len(),
        head_hash: epss.ledger.head_hash(),
        delivered,
        log,
    }
}

/// Runs `script` from a clean state built from the fixtures it declares.
pub fn run_scenario(
    bundle: &FixtureBundle,
    script: &ScenarioScript,
) -> Result<ScenarioRun, ScenarioError> {
    script.validate(bundle)?;
    let epss = Epss::from_bundle(&script.select_fixtures(bundle), Clock::Logical)
        .map_err(|e| ScenarioError::Script(format!("fixtures: {e}")))?;
    let mut runner = Runner {
        epss,
        last_help: None,
    };
    let mut log = Vec::with_capacity(script.actions.len());
    for (i, step) in script.actions.iter().enumerate() {
        let index = i + 1;
        match (runner.exec(&step.action), &step.expect_error) {
            (Ok(line), None) => log.push(format!("{index:>3} {line}")),
            (Err(e), Some(expected)) if e.code() == expected => log.push(format!(
                "{index:>3} {} refused as expected: {}",
                step.action.name(),
                e.code()
            )),
            (Ok(_), Some(expected)) => {
                return Err(ScenarioError::ActionFailed {
                    index,
                    action: step.action.name().into(),
                    code: "UnexpectedSuccess".into(),
                    message: format!("expected {expected}"),
                })
            }
            (Err(e), _) => {
                return Err(ScenarioError::ActionFailed {
                    index,
                    action: step.action.name().into(),
                    code: e.code().into(),
                    message: e.to_string(),
                })
            }
        }
    }
    let report = report(&runner.epss, script, log);
    Ok(ScenarioRun {
        trace: runner.epss.ledger.to_trace_bytes(),
        report,
        system: runner.epss,
    })
}

/// Deviation counts per kind over all sessions of a report.
pub fn deviation_totals(report: &ScenarioReport) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in &report.sessions {
        for d in &s.conformance.deviations {
            *out.entry(d.deviation.kind_name().to_string()).or_default() += 1;
        }
    }
    out
}
