use std::sync::{Arc, OnceLock};

use proptest::prelude::*;

use cps::apdu::{CommandApdu, ResponseApdu};
use cps::card::Card;
use cps::catalog::Catalog;
use cps::engine::{
    count_interleavings, enumerate_interleavings, program_items, run_sequence, sample_interleavings, Classification,
    SequenceItem, Source, Verdict,
};
use cps::template::ApduTemplate;
use cps::watchdog::{Policy, Reason, Watchdog};

fn catalog() -> &'static Arc<Catalog> {
    static C: OnceLock<Arc<Catalog>> = OnceLock::new();
    C.get_or_init(|| Arc::new(Catalog::builtin()))
}

/// Everything a client might send an Incrypto card: the certified steps,
/// their modified variants, the challenge pair, the destructive erase and a
/// few commands no rule expects.
fn pool() -> &'static Vec<SequenceItem> {
    static P: OnceLock<Vec<SequenceItem>> = OnceLock::new();
    P.get_or_init(|| {
        let c = catalog();
        let mut items = Vec::new();
        for id in ["incrypto_P1", "table2_P2", "incrypto_challenge", "mse_erase"] {
            items.extend(program_items(&c.program(id).unwrap()));
        }
        for wire in ["00 B0 00 00 10", "00 20 00 81 08 ${PIN}", "00 20 00 81 02 00 00", "FF FF FF FF"] {
            items.push(SequenceItem { source: Source::Client("fuzz".into()), template: ApduTemplate::parse_wire(wire).unwrap() });
        }
        items
    })
}

fn stream(max: usize) -> impl Strategy<Value = Vec<SequenceItem>> {
    prop::collection::vec(0..pool().len(), 0..max).prop_map(|ix| ix.into_iter().map(|i| pool()[i].clone()).collect())
}

fn arb_command() -> impl Strategy<Value = CommandApdu> {
    (any::<[u8; 4]>(), prop::option::of(prop::collection::vec(any::<u8>(), 1..=255)), any::<Option<u8>>()).prop_map(
        |(h, data, le)| {
            let cmd = CommandApdu::new(h[0], h[1], h[2], h[3]).with_le(le);
            match data {
                Some(d) => cmd.with_data(d).unwrap(),
                None => cmd,
            }
        },
    )
}

fn offline(items: &[SequenceItem], seed: u64) -> cps::engine::RunReport {
    let c = catalog();
    run_sequence(c.profile("incrypto").unwrap(), c.program("incrypto_P1").unwrap(), items, seed).unwrap()
}

proptest! {
    #[test]
    fn command_codec_round_trips(cmd in arb_command()) {
        let bytes = cmd.to_bytes();
        prop_assert_eq!(CommandApdu::parse(&bytes).unwrap(), cmd);
    }

    #[test]
    fn response_codec_round_trips(data in prop::collection::vec(any::<u8>(), 0..300), sw in any::<[u8; 2]>()) {
        let r = ResponseApdu::new(data, cps::apdu::StatusWord::from_bytes(sw[0], sw[1]));
        prop_assert_eq!(ResponseApdu::parse(&r.to_bytes()).unwrap(), r);
    }

    #[test]
    fn card_is_deterministic(cmds in prop::collection::vec(arb_command(), 0..20), seed in any::<u64>()) {
        for profile in ["incrypto", "infineon"] {
            let p = catalog().profile(profile).unwrap();
            let mut a = Card::new(p.clone(), seed);
            let mut b = Card::new(p, seed);
            for cmd in &cmds {
                prop_assert_eq!(a.transmit(cmd), b.transmit(cmd));
            }
            prop_assert_eq!(a.state(), b.state());
        }
    }

    #[test]
    fn classification_and_progress(items in stream(30), seed in 0u64..1000) {
        let report = offline(&items, seed);
        prop_assert_eq!(report.records.len(), items.len());
        let len = catalog().program("incrypto_P1").unwrap().len();
        let mut position = 0;
        for r in &report.records {
            prop_assert_eq!(r.position_before, position);
            prop_assert_eq!(r.classification, Classification::of(r.response.is_success(), !r.external));
            // Only an accepted, legal command moves the program forward.
            if r.classification == Classification::Case1 {
                prop_assert!(r.position_after > r.position_before);
            } else {
                prop_assert_eq!(r.position_after, r.position_before);
            }
            prop_assert!(r.position_after <= len);
            position = r.position_after;
        }
        match report.verdict {
            Verdict::Completed => prop_assert_eq!(report.anomalies(), 0),
            Verdict::CompletedWithAnomalies(n) => prop_assert_eq!(n, report.anomalies()),
            Verdict::ErroredAt(i) => prop_assert_eq!(report.records[i].classification, Classification::Case2),
            Verdict::Incomplete { position } => {
                prop_assert!(position < len);
                prop_assert_eq!(report.errors(), 0);
            }
        }
    }

    #[test]
    fn reports_are_deterministic(items in stream(30), seed in any::<u64>()) {
        let a = offline(&items, seed);
        let b = offline(&items, seed);
        prop_assert_eq!(a.to_json_lines(), b.to_json_lines());
    }

    #[test]
    fn interleavings_preserve_both_orders(l in 0usize..6, k in 0usize..6, seed in any::<u64>()) {
        let a: Vec<i32> = (0..l as i32).collect();
        let b: Vec<i32> = (100..100 + k as i32).collect();
        let all: Vec<Vec<i32>> = enumerate_interleavings(&a, &b).collect();
        prop_assert_eq!(num_bigint::BigUint::from(all.len()), count_interleavings(l, k));
        let distinct: std::collections::HashSet<_> = all.iter().collect();
        prop_assert_eq!(distinct.len(), all.len());
        for s in all.iter().chain(&sample_interleavings(&a, &b, 5, seed)) {
            let left: Vec<i32> = s.iter().copied().filter(|x| *x < 100).collect();
            let right: Vec<i32> = s.iter().copied().filter(|x| *x >= 100).collect();
            prop_assert_eq!(&left, &a);
            prop_assert_eq!(&right, &b);
        }
    }

    #[test]
    fn strict_forwards_only_certified_steps(items in stream(30), seed in 0u64..1000) {
        let mut wd = Watchdog::new(catalog().clone());
        wd.add_card("c", "incrypto", seed).unwrap();
        let mut s = wd.open_session("x", "c", "incrypto_P1", Policy::Strict, false).unwrap();
        let program = s.program().clone();
        for item in &items {
            let before = s.position();
            let out = wd.submit_template(&mut s, &item.template).unwrap();
            prop_assert!(!out.decision.warned());
            if out.decision.forwarded() {
                prop_assert_eq!(out.decision.reason, Reason::MatchedExpected);
                prop_assert!(program.is_globally_legal(before, &out.command));
            } else {
                prop_assert_eq!(s.position(), before);
            }
        }
        prop_assert_eq!(s.anomaly_count(), 0);
        prop_assert!(!wd.card_snapshot("c").unwrap().state().destroyed);
    }

    #[test]
    fn chainguard_forwards_at_most_one_anomaly(items in stream(30), seed in 0u64..1000) {
        let mut wd = Watchdog::new(catalog().clone());
        wd.add_card("c", "incrypto", seed).unwrap();
        let mut s = wd.open_session("x", "c", "incrypto_P1", Policy::ChainGuard, false).unwrap();
        let mut warned = 0;
        for item in &items {
            warned += usize::from(wd.submit_template(&mut s, &item.template).unwrap().decision.warned());
        }
        prop_assert!(warned <= 1);
        prop_assert_eq!(warned, s.anomaly_count());
    }

    #[test]
    fn monitor_matches_offline_classification(items in stream(30), seed in 0u64..1000) {
        let mut wd = Watchdog::new(catalog().clone());
        wd.add_card("c", "incrypto", seed).unwrap();
        let mut s = wd.open_session("x", "c", "incrypto_P1", Policy::Monitor, false).unwrap();
        let report = offline(&items, seed);
        for (item, rec) in items.iter().zip(&report.records) {
            let out = wd.submit_template(&mut s, &item.template).unwrap();
            prop_assert!(out.decision.forwarded());
            prop_assert_eq!(&out.command, &rec.command);
            prop_assert_eq!(&out.response, &rec.response);
            prop_assert_eq!(out.decision.warned(), rec.external);
            prop_assert_eq!(s.position(), rec.position_after);
        }
    }
}

/// Every interleaving of two short certified fragments: Monitor warnings
/// coincide with the offline external commands.
#[test]
fn monitor_equivalence_exhaustive_small() {
    let c = catalog();
    let a: Vec<SequenceItem> = program_items(&c.program("incrypto_P1").unwrap()).into_iter().take(5).collect();
    let b: Vec<SequenceItem> = program_items(&c.program("table2_P2").unwrap()).into_iter().skip(3).take(5).collect();
    let mut runs = 0;
    for (n, merged) in enumerate_interleavings(&a, &b).enumerate() {
        let seed = n as u64;
        let report = offline(&merged, seed);
        let mut wd = Watchdog::new(c.clone());
        wd.add_card("c", "incrypto", seed).unwrap();
        let mut s = wd.open_session("x", "c", "incrypto_P1", Policy::Monitor, false).unwrap();
        for (item, rec) in merged.iter().zip(&report.records) {
            let out = wd.submit_template(&mut s, &item.template).unwrap();
            assert_eq!(out.decision.warned(), rec.external, "interleaving {n}");
            assert_eq!(out.response, rec.response, "interleaving {n}");
        }
        runs += 1;
    }
    assert_eq!(runs, 252);
}
