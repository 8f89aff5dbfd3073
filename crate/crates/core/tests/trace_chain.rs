use std::sync::Arc;
use std::thread;

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;

use epss_core::collab::MessageKind;
use epss_core::trace::{
    parse_trace, verify_trace, Clock, EventPayload, NewEvent, TraceLedger, GENESIS_HASH,
};
use epss_core::types::EntityRef;
use epss_core::workflow::StepStatus;

fn payload() -> impl Strategy<Value = EventPayload> {
    prop_oneof![
        (any::<String>(), "[A-Z]{2}-[0-9]{3}", any::<bool>()).prop_map(|(tag, id, online)| {
            EventPayload::Scan {
                tag,
                entity: EntityRef::appliance(id),
                online,
            }
        }),
        (1u32..20).prop_map(|step| EventPayload::StepReported {
            step,
            status: StepStatus::Done,
        }),
        (any::<String>(), any::<String>())
            .prop_map(|(unit, device)| EventPayload::UnitDelivered { unit, device }),
        (
            any::<String>(),
            any::<String>(),
            proptest::option::of(any::<String>())
        )
            .prop_map(|(tag, key, value)| EventPayload::TagWritten { tag, key, value }),
        (any::<String>(), any::<u32>()).prop_map(|(request, seq)| EventPayload::Message {
            request,
            seq,
            message_kind: MessageKind::Text,
        }),
        any::<String>().prop_map(|reason| EventPayload::SessionClosed { reason }),
    ]
}

fn new_event() -> impl Strategy<Value = NewEvent> {
    ("[A-Z][0-9]", proptest::option::of("S-[0-9]{4}"), payload())
        .prop_map(|(actor, session, payload)| NewEvent::new(actor, session.as_deref(), payload))
}

fn ledger_of(events: &[NewEvent]) -> TraceLedger {
    let ledger = TraceLedger::new(Clock::Logical);
    for e in events {
        ledger.append(e.clone());
    }
    ledger
}

#[test]
fn thousand_random_appends_keep_the_chain() {
    let mut runner = TestRunner::deterministic();
    let strategy = new_event();
    let ledger = TraceLedger::new(Clock::Logical);
    for i in 0..1000 {
        let event = strategy.new_tree(&mut runner).unwrap().current();
        let stored = ledger.append(event);
        assert_eq!(stored.seq, i + 1);
        if i % 100 == 99 {
            assert!(ledger.verify_chain());
        }
    }
    assert!(ledger.verify_chain());
    assert_eq!(verify_trace(&ledger.to_trace_bytes()), Ok(1000));
}

#[test]
fn empty_ledger_verifies() {
    let ledger = TraceLedger::new(Clock::Logical);
    assert!(ledger.verify_chain());
    assert_eq!(ledger.head_hash(), GENESIS_HASH);
    assert_eq!(verify_trace(b""), Ok(0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn trace_bytes_round_trip(events in proptest::collection::vec(new_event(), 1..40)) {
        let ledger = ledger_of(&events);
        let bytes = ledger.to_trace_bytes();
        prop_assert_eq!(verify_trace(&bytes), Ok(events.len()));
        prop_assert_eq!(parse_trace(&bytes).unwrap(), ledger.snapshot());
    }

    #[test]
    fn any_byte_mutation_is_detected(
        events in proptest::collection::vec(new_event(), 1..30),
        position in any::<prop::sample::Index>(),
        replacement in any::<u8>(),
    ) {
        let bytes = ledger_of(&events).to_trace_bytes();
        let i = position.index(bytes.len());
        prop_assume!(bytes[i] != replacement);
        let mut mutated = bytes.clone();
        mutated[i] = replacement;
        prop_assert!(verify_trace(&mutated).is_err());
    }
}

#[test]
fn every_position_is_protected() {
    let mut runner = TestRunner::deterministic();
    let events: Vec<NewEvent> = (0..8)
        .map(|_| new_event().new_tree(&mut runner).unwrap().current())
        .collect();
    let bytes = ledger_of(&events).to_trace_bytes();
    for i in 0..bytes.len() {
        for flip in [0x01u8, 0x20, 0x80] {
            let mut mutated = bytes.clone();
            mutated[i] ^= flip;
            assert!(
                verify_trace(&mutated).is_err(),
                "mutation at byte {i} (xor {flip:#x}) went unnoticed"
            );
        }
    }
}

#[test]
fn truncation_and_reordering_are_detected() {
    let ledger = TraceLedger::new(Clock::Logical);
    for i in 0..5 {
        ledger.append(NewEvent::new(
            "A1",
            None,
            EventPayload::SessionClosed {
                reason: format!("r{i}"),
            },
        ));
    }
    let text = String::from_utf8(ledger.to_trace_bytes()).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();

    let dropped: String = lines
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != 2)
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    assert!(verify_trace(dropped.as_bytes()).is_err());

    lines.swap(1, 3);
    let swapped: String = lines.iter().map(|l| format!("{l}\n")).collect();
    assert!(verify_trace(swapped.as_bytes()).is_err());

    assert!(verify_trace(&text.as_bytes()[..text.len() - 1]).is_err());
}

#[test]
fn concurrent_appends_stay_chained() {
    let ledger = Arc::new(TraceLedger::new(Clock::Logical));
    let workers: Vec<_> = (0..8)
        .map(|w| {
            let ledger = ledger.clone();
            thread::spawn(move || {
                for i in 0..100 {
                    ledger.append(NewEvent::new(
                        format!("W{w}"),
                        None,
                        EventPayload::UnitDelivered {
                            unit: format!("u{i}"),
                            device: "tablet".into(),
                        },
                    ));
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    let events = ledger.snapshot();
    assert_eq!(events.len(), 800);
    assert!(events
        .iter()
        .enumerate()
        .all(|(i, e)| e.seq == i as u64 + 1));
    assert!(ledger.verify_chain());
    assert_eq!(verify_trace(&ledger.to_trace_bytes()), Ok(800));
}
