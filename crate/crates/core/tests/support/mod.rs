//! Oracles and generators shared by the integration tests and the
//! acceptance target.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use proptest::sample::subsequence;
use proptest::string::string_regex;

use epss_core::knowledge::{LearningFragment, LearningUnit, UnitMetadata};
use epss_core::tags::{EntityRecord, EntityStore};
use epss_core::trace::{Clock, EventKind, TraceFilter, TraceLedger, Verdict};
use epss_core::types::{
    Accreditation, EntityRef, Expertise, MediaKind, Protection, Specificity, StepRef, TaskCategory,
};
use epss_core::workflow::{Actor, EnforcementMode, ProcedureDefinition, StepDefinition, Workflow};
use epss_core::{Epss, FixtureBundle};

pub fn builtin_epss() -> Epss {
    Epss::from_bundle(&FixtureBundle::builtin(), Clock::Logical).expect("builtin fixtures load")
}

// ---------------------------------------------------------------------------
// Reference state machine for step reporting.

pub const TOOLS: [&str; 3] = ["t1", "t2", "t3"];
pub const PARTS: [&str; 2] = ["p1", "p2"];

#[derive(Debug, Clone)]
pub struct CaseStep {
    pub tools: BTreeSet<String>,
    pub parts: BTreeSet<String>,
    pub accreditation: Accreditation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Report {
        step: u32,
        tools: BTreeSet<String>,
        parts: BTreeSet<String>,
    },
    Abort,
}

/// A generated move. `Next` reports whatever the reference machine expects
/// next, optionally with everything the step needs.
#[derive(Debug, Clone)]
enum Plan {
    Random(Op),
    Next { equipped: bool },
}

#[derive(Debug, Clone)]
pub struct Case {
    pub steps: Vec<CaseStep>,
    pub actor: Accreditation,
    pub mode: EnforcementMode,
    pub ops: Vec<Op>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunState {
    Active,
    Completed,
    Aborted,
}

/// What an engine did with one case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observed {
    /// Per op: (accepted, deviation kinds) or an error code.
    pub outcomes: Vec<Result<(bool, Vec<String>), String>>,
    pub state: RunState,
    pub done: Vec<bool>,
    pub deviation_events: usize,
    pub steps_in_order: u32,
    pub verdict: Verdict,
}

#[derive(Debug, Clone)]
struct RefMachine {
    steps: Vec<CaseStep>,
    actor: Accreditation,
    mode: EnforcementMode,
    done: Vec<bool>,
    state: RunState,
    deviation_events: usize,
    in_order: u32,
    outcomes: Vec<Result<(bool, Vec<String>), String>>,
}

impl RefMachine {
    fn new(case: &Case) -> Self {
        RefMachine {
            steps: case.steps.clone(),
            actor: case.actor,
            mode: case.mode,
            done: vec![false; case.steps.len()],
            state: RunState::Active,
            deviation_events: 0,
            in_order: 0,
            outcomes: Vec::new(),
        }
    }

    fn expected(&self) -> u32 {
        self.done
            .iter()
            .position(|d| !d)
            .map_or(self.steps.len() as u32 + 1, |i| i as u32 + 1)
    }

    fn apply(&mut self, op: &Op) {
        let outcome = self.outcome(op);
        self.outcomes.push(outcome);
    }

    fn outcome(&mut self, op: &Op) -> Result<(bool, Vec<String>), String> {
        if self.state != RunState::Active {
            return Err("SessionClosed".into());
        }
        let (step, tools, parts) = match op {
            Op::Abort => {
                self.state = RunState::Aborted;
                return Ok((true, vec![]));
            }
            Op::Report { step, tools, parts } => (*step, tools, parts),
        };
        if step == 0 || step as usize > self.steps.len() {
            return Err("UnknownStep".into());
        }
        let slot = step as usize - 1;
        let def = &self.steps[slot];
        let expected = self.expected();
        let mut kinds = Vec::new();
        if step != expected {
            kinds.push("OutOfOrder".to_string());
        }
        if !def.tools.is_subset(tools) {
            kinds.push("MissingTool".to_string());
        }
        if !def.parts.is_subset(parts) {
            kinds.push("MissingPart".to_string());
        }
        if self.actor < def.accreditation {
            kinds.push("InsufficientAccreditation".to_string());
        }
        if self.done[slot] {
            kinds.push("AlreadyDone".to_string());
        }
        let accepted = kinds.is_empty() || self.mode == EnforcementMode::Advisory;
        if accepted && !self.done[slot] {
            self.done[slot] = true;
            if step == expected {
                self.in_order += 1;
            }
            if self.done.iter().all(|d| *d) {
                self.state = RunState::Completed;
            }
        }
        if !kinds.is_empty() {
            self.deviation_events += 1;
        }
        Ok((accepted, kinds))
    }

    fn observed(&self) -> Observed {
        let conformant = self.deviation_events == 0 && self.in_order as usize == self.steps.len();
        Observed {
            outcomes: self.outcomes.clone(),
            state: self.state,
            done: self.done.clone(),
            deviation_events: self.deviation_events,
            steps_in_order: self.in_order,
            verdict: if conformant {
                Verdict::Conformant
            } else {
                Verdict::NonConformant
            },
        }
    }
}

pub fn reference_run(case: &Case) -> Observed {
    let mut machine = RefMachine::new(case);
    for op in &case.ops {
        machine.apply(op);
    }
    machine.observed()
}

/// The live engine's view plus what the ledger says about the same session.
pub struct LiveRun {
    pub observed: Observed,
    pub ledger_state: RunState,
    pub ledger_chain_ok: bool,
}

fn run_state(name: &str) -> RunState {
    match name {
        "Active" => RunState::Active,
        "Completed" => RunState::Completed,
        "Aborted" => RunState::Aborted,
        other => panic!("unexpected state {other}"),
    }
}

pub fn live_run(case: &Case) -> LiveRun {
    let entities = Arc::new(EntityStore::default());
    entities.insert(EntityRecord::new(EntityRef::appliance("APP"), Some("M")));
    for t in TOOLS {
        entities.insert(EntityRecord::new(EntityRef::tool(t), None));
    }
    for p in PARTS {
        entities.insert(EntityRecord::new(EntityRef::part(p), None));
    }
    let ledger = Arc::new(TraceLedger::new(Clock::Logical));
    let workflow = Workflow::new(entities, ledger.clone());
    let procedure = workflow
        .load_procedure(&ProcedureDefinition {
            id: "gen".into(),
            appliance_model: "M".into(),
            title: "generated".into(),
            min_accreditation: Accreditation::Trainee,
            steps: case
                .steps
                .iter()
                .enumerate()
                .map(|(i, s)| StepDefinition {
                    index: i as u32 + 1,
                    description: format!("step {}", i + 1),
                    tools: s.tools.iter().cloned().collect(),
                    parts: s.parts.iter().cloned().collect(),
                    accreditation: Some(s.accreditation),
                    units: vec![],
                })
                .collect(),
        })
        .expect("generated procedure is valid");
    workflow.register_actor(Actor {
        id: "X".into(),
        name: "generated".into(),
        accreditation: case.actor,
        expertise: Expertise::Basic,
        device: "tablet".into(),
    });
    let session = workflow
        .start_session("X", &EntityRef::appliance("APP"), "gen", case.mode)
        .expect("session starts")
        .id;

    let mut outcomes = Vec::new();
    for op in &case.ops {
        let outcome = match op {
            Op::Abort => workflow
                .abort_session(&session, "generated")
                .map(|_| (true, vec![]))
                .map_err(|e| e.code().to_string()),
            Op::Report { step, tools, parts } => {
                let tools: BTreeSet<EntityRef> = tools.iter().map(EntityRef::tool).collect();
                let parts: BTreeSet<EntityRef> = parts.iter().map(EntityRef::part).collect();
                workflow
                    .report_step(&session, *step, &tools, &parts)
                    .map(|o| {
                        (
                            o.accepted,
                            o.deviations
                                .iter()
                                .map(|d| d.kind_name().to_string())
                                .collect(),
                        )
                    })
                    .map_err(|e| e.code().to_string())
            }
        };
        outcomes.push(outcome);
    }

    let live = workflow.session(&session).unwrap();
    let report = ledger.verify_conformance(&session, &procedure).unwrap();
    let replayed = ledger
        .replayed_state(&session, procedure.steps.len() as u32)
        .unwrap();
    let mut filter = TraceFilter::session(&session);
    filter.kind = Some(EventKind::Deviation);
    LiveRun {
        observed: Observed {
            outcomes,
            state: run_state(&format!("{:?}", live.state)),
            done: live.step_status.iter().map(|s| s.is_done()).collect(),
            deviation_events: ledger.count(&filter),
            steps_in_order: report.steps_done_in_order,
            verdict: report.verdict,
        },
        ledger_state: run_state(&format!("{replayed:?}")),
        ledger_chain_ok: ledger.verify_chain(),
    }
}

fn accreditation() -> impl Strategy<Value = Accreditation> {
    prop_oneof![
        Just(Accreditation::Trainee),
        Just(Accreditation::Technician),
        Just(Accreditation::Senior),
    ]
}

fn subset(items: &'static [&'static str]) -> impl Strategy<Value = BTreeSet<String>> {
    subsequence(items.to_vec(), 0..=items.len())
        .prop_map(|v| v.into_iter().map(str::to_string).collect())
}

fn plan(n: u32) -> impl Strategy<Value = Plan> {
    prop_oneof![
        6 => any::<bool>().prop_map(|equipped| Plan::Next { equipped }),
        4 => (0..=n + 1, subset(&TOOLS), subset(&PARTS))
            .prop_map(|(step, tools, parts)| Plan::Random(Op::Report { step, tools, parts })),
        1 => Just(Plan::Random(Op::Abort)),
    ]
}

/// Procedures of 1..=8 steps with random requirements and random report
/// sequences.
pub fn case() -> impl Strategy<Value = Case> {
    (1u32..=8)
        .prop_flat_map(|n| {
            let step = (subset(&TOOLS), subset(&PARTS), accreditation()).prop_map(
                |(tools, parts, accreditation)| CaseStep {
                    tools,
                    parts,
                    accreditation,
                },
            );
            (
                prop::collection::vec(step, n as usize),
                accreditation(),
                prop_oneof![
                    Just(EnforcementMode::Strict),
                    Just(EnforcementMode::Advisory)
                ],
                prop::collection::vec(plan(n), 0..=(3 * n as usize + 2)),
            )
        })
        .prop_map(|(steps, actor, mode, plans)| {
            let mut case = Case {
                steps,
                actor,
                mode,
                ops: Vec::new(),
            };
            let mut machine = RefMachine::new(&case);
            for p in plans {
                let op = match p {
                    Plan::Random(op) => op,
                    Plan::Next { equipped } => {
                        let step = machine.expected().min(case.steps.len() as u32);
                        let def = &case.steps[step as usize - 1];
                        Op::Report {
                            step,
                            tools: if equipped {
                                def.tools.clone()
                            } else {
                                BTreeSet::new()
                            },
                            parts: if equipped {
                                def.parts.clone()
                            } else {
                                BTreeSet::new()
                            },
                        }
                    }
                };
                machine.apply(&op);
                case.ops.push(op);
            }
            case
        })
}

// ---------------------------------------------------------------------------
// Learning units with awkward text.

/// Any character XML 1.0 can carry.
pub fn xml_text(max: usize) -> BoxedStrategy<String> {
    let wide = format!(
        "[\t\n\r\\x{{20}}-\\x{{D7FF}}\\x{{E000}}-\\x{{FFFD}}\\x{{10000}}-\\x{{10FFFF}}]{{0,{max}}}"
    );
    let markup = format!("[<>&\"' \t\r\na-z]{{0,{max}}}");
    prop_oneof![
        string_regex(&wide).expect("valid regex"),
        string_regex(&markup).expect("valid regex"),
    ]
    .boxed()
}

fn non_blank(max: usize) -> BoxedStrategy<String> {
    xml_text(max)
        .prop_filter("blank", |s| !s.trim().is_empty())
        .boxed()
}

fn media_kind() -> impl Strategy<Value = MediaKind> {
    prop::sample::select(MediaKind::ALL.to_vec())
}

pub fn unit_with_fragments() -> impl Strategy<Value = (LearningUnit, Vec<LearningFragment>)> {
    let fragment = (
        xml_text(12),
        media_kind(),
        non_blank(40),
        xml_text(12),
        xml_text(12),
        prop::option::of(xml_text(20)),
    );
    let metadata = (
        prop::sample::select(Expertise::ALL.to_vec()),
        prop::sample::select(TaskCategory::ALL.to_vec()),
        prop::collection::btree_set("[A-Za-z0-9][A-Za-z0-9 ._-]{0,10}", 0..4),
        prop::option::of((xml_text(10), any::<u32>())),
        prop::sample::select(Specificity::ALL.to_vec()),
        prop::sample::select(Protection::ALL.to_vec()),
        prop::collection::btree_set("[a-z0-9-]{1,10}", 0..4),
    );
    (
        non_blank(16),
        non_blank(30),
        metadata,
        prop::collection::vec(fragment, 1..5),
    )
        .prop_map(|(id, title, m, frags)| {
            let fragments: Vec<LearningFragment> = frags
                .into_iter()
                .enumerate()
                .map(
                    |(i, (fid, media_kind, body, doc, locator, fallback_text))| LearningFragment {
                        id: format!("{i}{fid}"),
                        media_kind,
                        body,
                        source_doc: doc,
                        source_locator: locator,
                        fallback_text,
                    },
                )
                .collect();
            let unit = LearningUnit {
                id,
                title,
                fragments: fragments.iter().map(|f| f.id.clone()).collect(),
                metadata: UnitMetadata {
                    expertise: m.0,
                    task_category: m.1,
                    appliance_models: m.2,
                    step_ref: m.3.map(|(p, s)| StepRef::new(p, s)),
                    specificity: m.4,
                    protection: m.5,
                    topics: m.6,
                },
            };
            (unit, fragments)
        })
}
