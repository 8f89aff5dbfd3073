mod support;

use std::collections::BTreeSet;

use proptest::prelude::*;

use epss_core::delivery::{DeviceProfile, DisplayKind, LearningMode, SubstitutionAction};
use epss_core::knowledge::LearningUnit;
use epss_core::trace::{EventKind, TraceFilter};
use epss_core::types::{MediaKind, Specificity};
use epss_core::workflow::{EnforcementMode, Procedure};
use epss_core::{run_scenario, Epss, FixtureBundle};

const MODEL: &str = "HDD-SATA";

/// Units bound to `procedure` step `k` that fit the model, model-specific
/// first, then by id. Read straight off the index.
fn oracle_step_units(epss: &Epss, procedure: &str, k: u32) -> Vec<String> {
    let mut units: Vec<_> = epss
        .knowledge
        .units()
        .into_iter()
        .filter(|u| {
            u.metadata
                .step_ref
                .as_ref()
                .is_some_and(|s| s.procedure == procedure && s.step == k)
        })
        .filter(|u| {
            u.metadata.appliance_models.is_empty() || u.metadata.appliance_models.contains(MODEL)
        })
        .collect();
    units.sort_by_key(|u| {
        (
            u.metadata.specificity != Specificity::ModelSpecific,
            u.id.clone(),
        )
    });
    units.into_iter().map(|u| u.id.clone()).collect()
}

fn append_unique(out: &mut Vec<String>, ids: impl IntoIterator<Item = String>) {
    for id in ids {
        if !out.contains(&id) {
            out.push(id);
        }
    }
}

fn existing_refs(epss: &Epss, refs: &[String]) -> Vec<String> {
    refs.iter()
        .filter(|r| epss.knowledge.contains_unit(r))
        .cloned()
        .collect()
}

fn hd_replace(epss: &Epss) -> std::sync::Arc<Procedure> {
    epss.workflow.procedure("hd-replace").unwrap()
}

fn start(epss: &Epss) -> String {
    epss.scan("A1", "T-PC042", Some(true)).unwrap();
    epss.start_session("A1", "hd-replace", "PC-042", EnforcementMode::Strict)
        .unwrap()
        .id
}

fn ids(tools: &BTreeSet<epss_core::types::EntityRef>) -> Vec<String> {
    tools.iter().map(|e| e.id.clone()).collect()
}

#[test]
fn every_fixture_step_has_exactly_one_unit() {
    let epss = support::builtin_epss();
    for k in 1..=14 {
        assert_eq!(
            oracle_step_units(&epss, "hd-replace", k).len(),
            1,
            "step {k}"
        );
    }
}

#[test]
fn during_work_leads_with_the_current_step_unit() {
    let epss = support::builtin_epss();
    let session = start(&epss);
    let procedure = hd_replace(&epss);
    for step in &procedure.steps {
        let context = epss.context_of("A1").unwrap();
        assert_eq!(context.session.as_deref(), Some(session.as_str()));
        let got = epss
            .delivery
            .select_units(&context, LearningMode::DuringWork)
            .unwrap();

        let mut expected = oracle_step_units(&epss, "hd-replace", step.index);
        append_unique(
            &mut expected,
            existing_refs(&epss, &step.learning_unit_refs),
        );
        assert_eq!(got, expected, "cursor {}", step.index);
        assert_eq!(
            got[0],
            oracle_step_units(&epss, "hd-replace", step.index)[0]
        );

        let outcome = epss
            .report_step(
                &session,
                step.index,
                &ids(&step.required_tools),
                &ids(&step.required_parts),
            )
            .unwrap();
        assert!(outcome.accepted, "step {}", step.index);
    }
    let context = epss.context_of("A1").unwrap();
    assert_eq!(context.session, None);
    let err = epss
        .delivery
        .select_units(&context, LearningMode::DuringWork)
        .unwrap_err();
    assert_eq!(err.code(), "NoActiveSession");
}

#[test]
fn before_work_lists_all_step_units_in_order() {
    for with_session in [true, false] {
        let epss = support::builtin_epss();
        if with_session {
            start(&epss);
        } else {
            epss.scan("A1", "T-PC042", Some(true)).unwrap();
        }
        let procedure = hd_replace(&epss);
        let context = epss.context_of("A1").unwrap();
        let got = epss
            .delivery
            .select_units(&context, LearningMode::BeforeWork)
            .unwrap();

        let steps: Vec<String> = (1..=14)
            .flat_map(|k| oracle_step_units(&epss, "hd-replace", k))
            .collect();
        assert_eq!(steps.len(), 14);
        assert_eq!(got[..14], steps[..]);
        let mut expected = steps.clone();
        for step in &procedure.steps {
            append_unique(
                &mut expected,
                existing_refs(&epss, &step.learning_unit_refs),
            );
        }
        assert_eq!(got, expected, "session: {with_session}");
    }
}

#[test]
fn after_work_on_the_deviant_run_teaches_the_sequence() {
    let bundle = FixtureBundle::builtin();
    let run = run_scenario(&bundle, bundle.script("hd-replace-deviant").unwrap()).unwrap();
    let epss = &run.system;
    let session = &run.report.sessions[0].session_id;

    let context = epss.context_of("A1").unwrap();
    let got = epss
        .delivery
        .select_units(&context, LearningMode::AfterWork)
        .unwrap();

    let accepted = epss.ledger.accepted_steps(session).unwrap();
    assert_eq!(accepted, vec![1]);
    let mut expected: Vec<String> = accepted
        .iter()
        .flat_map(|k| oracle_step_units(epss, "hd-replace", *k))
        .collect();
    let mut topic_units: Vec<_> = epss
        .knowledge
        .units()
        .into_iter()
        .filter(|u| u.metadata.topics.contains("operation-sequence"))
        .collect();
    topic_units.sort_by_key(|u| {
        (
            u.metadata.specificity != Specificity::ModelSpecific,
            u.id.clone(),
        )
    });
    assert!(!topic_units.is_empty());
    append_unique(&mut expected, topic_units.iter().map(|u| u.id.clone()));
    assert_eq!(got, expected);
    assert!(got.contains(&"practice:operation-sequence".to_string()));

    // The script's own AfterWork request delivered the same list.
    let delivered: Vec<String> = run
        .report
        .delivered
        .iter()
        .rev()
        .take(got.len())
        .rev()
        .map(|d| d.unit.clone())
        .collect();
    assert_eq!(delivered, got);
}

#[test]
fn after_work_topics_follow_the_deviation_kinds() {
    let epss = support::builtin_epss();
    let session = start(&epss);
    // Step 1 without the screwdriver, advisory: MissingTool.
    epss.abort(&session, "restart").unwrap();
    let session = epss
        .start_session("A1", "hd-replace", "PC-042", EnforcementMode::Advisory)
        .unwrap()
        .id;
    epss.report_step(&session, 1, &[], &[]).unwrap();
    epss.abort(&session, "stop").unwrap();
    let context = epss.context_of("A1").unwrap();
    let got = epss
        .delivery
        .select_units(&context, LearningMode::AfterWork)
        .unwrap();
    assert!(got.contains(&"practice:tool-usage".to_string()), "{got:?}");
    assert!(
        !got.contains(&"practice:operation-sequence".to_string()),
        "{got:?}"
    );
}

fn device() -> impl Strategy<Value = DeviceProfile> {
    (
        prop::sample::select(vec![
            DisplayKind::Tablet,
            DisplayKind::Handheld,
            DisplayKind::SeeThroughGoggles,
            DisplayKind::IntegratedScreenGoggles,
        ]),
        prop::sample::subsequence(MediaKind::ALL.to_vec(), 1..=MediaKind::ALL.len()),
    )
        .prop_map(|(display, media)| DeviceProfile {
            id: "generated".into(),
            display,
            max_media: media.into_iter().collect(),
            hands_free: display.is_goggles(),
        })
}

fn check_adaptation(
    epss: &Epss,
    unit: &LearningUnit,
    device: &DeviceProfile,
) -> Result<(), TestCaseError> {
    let rendition = epss.delivery.adapt(unit, device);
    prop_assert!(!rendition.fragments.is_empty());
    for f in &rendition.fragments {
        prop_assert!(f.media_kind == MediaKind::Text || device.max_media.contains(&f.media_kind));
    }
    let sources = epss.knowledge.fragments_of(unit);
    for source in &sources {
        let renderable =
            source.media_kind == MediaKind::Text || device.max_media.contains(&source.media_kind);
        let shown = rendition
            .fragments
            .iter()
            .find(|f| f.fragment_id == source.id);
        let substitution = rendition
            .substitutions
            .iter()
            .find(|s| s.fragment_id == source.id);
        if renderable {
            prop_assert_eq!(shown.map(|f| &f.body), Some(&source.body));
            prop_assert!(substitution.is_none());
        } else {
            let substitution = substitution.expect("unrenderable fragment is accounted for");
            match &source.fallback_text {
                Some(text) => {
                    prop_assert_eq!(substitution.action, SubstitutionAction::Fallback);
                    prop_assert_eq!(
                        shown.map(|f| (&f.body, f.media_kind)),
                        Some((text, MediaKind::Text))
                    );
                }
                None => prop_assert_eq!(substitution.action, SubstitutionAction::Omitted),
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn adaptation_only_emits_renderable_media(device in device()) {
        let epss = support::builtin_epss();
        prop_assert!(device.validate().is_ok());
        for unit in epss.knowledge.units() {
            check_adaptation(&epss, &unit, &device)?;
        }
    }

    #[test]
    fn deliveries_and_trace_agree(picks in prop::collection::vec(any::<prop::sample::Index>(), 0..10), bogus in any::<bool>()) {
        let epss = support::builtin_epss();
        let all: Vec<String> = epss.knowledge.units().iter().map(|u| u.id.clone()).collect();
        let mut units: Vec<String> = picks.iter().map(|i| i.get(&all).clone()).collect();
        if bogus {
            units.push("no-such-unit".into());
        }
        let before = epss.ledger.count(&TraceFilter::kind(EventKind::UnitDelivered));
        let result = epss.deliver("A1", None, &units, None);
        let after = epss.ledger.count(&TraceFilter::kind(EventKind::UnitDelivered));
        match result {
            Ok(receipt) => {
                prop_assert!(!bogus);
                prop_assert_eq!(receipt.renditions.len(), units.len());
                prop_assert_eq!(after - before, units.len());
            }
            Err(e) => {
                prop_assert!(bogus);
                prop_assert_eq!(e.code(), "UnknownUnit");
                prop_assert_eq!(after, before);
            }
        }
        prop_assert!(epss.ledger.verify_chain());
    }
}

#[test]
fn fixture_devices_adapt_the_dismantling_unit() {
    let epss = support::builtin_epss();
    let tablet = epss
        .rendition("hd-replace:3:dismantling", "tablet")
        .unwrap();
    assert!(tablet.substitutions.is_empty());
    let goggles = epss
        .rendition("hd-replace:3:dismantling", "goggles-st")
        .unwrap();
    let actions: Vec<(MediaKind, SubstitutionAction)> = goggles
        .substitutions
        .iter()
        .map(|s| (s.media_kind, s.action))
        .collect();
    assert!(
        actions.contains(&(MediaKind::Blueprint, SubstitutionAction::Omitted)),
        "{actions:?}"
    );
    assert!(
        actions.contains(&(MediaKind::VideoRef, SubstitutionAction::Fallback)),
        "{actions:?}"
    );
    for device in epss.delivery.devices() {
        for unit in epss.knowledge.units() {
            check_adaptation(&epss, &unit, &device).unwrap();
        }
    }
}

#[test]
fn invalid_devices_are_refused() {
    let epss = support::builtin_epss();
    let bad = DeviceProfile {
        id: "g".into(),
        display: DisplayKind::SeeThroughGoggles,
        max_media: [MediaKind::Text].into_iter().collect(),
        hands_free: false,
    };
    assert_eq!(
        epss.delivery.register_device(bad).unwrap_err().code(),
        "InvalidDevice"
    );
    assert_eq!(
        epss.rendition("appendix:A", "fax").unwrap_err().code(),
        "UnknownDevice"
    );
}
