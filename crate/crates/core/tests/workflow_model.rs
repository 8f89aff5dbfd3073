mod support;

use std::collections::BTreeSet;

use proptest::prelude::*;

use epss_core::trace::Verdict;
use epss_core::types::Accreditation;
use epss_core::workflow::EnforcementMode;

use support::{case, live_run, reference_run, Case, CaseStep, Op, RunState};

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn report(step: u32, tools: &[&str]) -> Op {
    Op::Report {
        step,
        tools: set(tools),
        parts: BTreeSet::new(),
    }
}

fn plain(n: usize) -> Vec<CaseStep> {
    (0..n)
        .map(|_| CaseStep {
            tools: BTreeSet::new(),
            parts: BTreeSet::new(),
            accreditation: Accreditation::Trainee,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn live_engine_agrees_with_reference(case in case()) {
        let expected = reference_run(&case);
        let live = live_run(&case);
        prop_assert_eq!(&live.observed, &expected);
        prop_assert_eq!(live.ledger_state, live.observed.state);
        prop_assert!(live.ledger_chain_ok);
    }
}

#[test]
fn out_of_order_strict_is_rejected() {
    let case = Case {
        steps: plain(3),
        actor: Accreditation::Technician,
        mode: EnforcementMode::Strict,
        ops: vec![report(1, &[]), report(3, &[])],
    };
    let live = live_run(&case).observed;
    assert_eq!(
        live.outcomes[1],
        Ok((false, vec!["OutOfOrder".to_string()]))
    );
    assert_eq!(live.deviation_events, 1);
    assert_eq!(live.done, vec![true, false, false]);
    assert_eq!(live.state, RunState::Active);
}

#[test]
fn missing_tool_advisory_is_recorded() {
    let mut steps = plain(3);
    steps[1].tools = set(&["t1"]);
    let case = Case {
        steps,
        actor: Accreditation::Technician,
        mode: EnforcementMode::Advisory,
        ops: vec![report(1, &[]), report(2, &[]), report(3, &[])],
    };
    let live = live_run(&case).observed;
    assert_eq!(
        live.outcomes[1],
        Ok((true, vec!["MissingTool".to_string()]))
    );
    assert_eq!(live.state, RunState::Completed);
    assert_eq!(live.verdict, Verdict::NonConformant);
}

#[test]
fn clean_run_is_conformant() {
    let case = Case {
        steps: plain(5),
        actor: Accreditation::Technician,
        mode: EnforcementMode::Strict,
        ops: (1..=5).map(|i| report(i, &[])).collect(),
    };
    let live = live_run(&case);
    assert_eq!(live.observed.verdict, Verdict::Conformant);
    assert_eq!(live.observed.steps_in_order, 5);
    assert_eq!(live.ledger_state, RunState::Completed);
}

#[test]
fn reports_after_close_fail() {
    let case = Case {
        steps: plain(2),
        actor: Accreditation::Technician,
        mode: EnforcementMode::Strict,
        ops: vec![report(1, &[]), Op::Abort, report(2, &[]), Op::Abort],
    };
    let live = live_run(&case).observed;
    assert_eq!(live.outcomes[2], Err("SessionClosed".to_string()));
    assert_eq!(live.outcomes[3], Err("SessionClosed".to_string()));
    assert_eq!(live.state, RunState::Aborted);
}

#[test]
fn step_accreditation_is_checked() {
    let mut steps = plain(2);
    steps[1].accreditation = Accreditation::Senior;
    let case = Case {
        steps,
        actor: Accreditation::Technician,
        mode: EnforcementMode::Strict,
        ops: vec![report(1, &[]), report(2, &[]), report(9, &[])],
    };
    let live = live_run(&case).observed;
    assert_eq!(
        live.outcomes[1],
        Ok((false, vec!["InsufficientAccreditation".to_string()]))
    );
    assert_eq!(live.outcomes[2], Err("UnknownStep".to_string()));
}
