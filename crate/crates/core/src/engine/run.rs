use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::apdu::{CommandApdu, ResponseApdu};
use crate::card::{Card, CardProfile};
use crate::hex::format_hex_compact;
use crate::program::{Legality, ProgressTracker, StraightLineProgram};
use crate::template::{ApduTemplate, Bindings, RnBinder, TemplateError};

/// Where a command in a sequence came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Source {
    Node { program: String, node: String },
    Mutation,
    Client(String),
}

impl Source {
    pub fn node(program: impl Into<String>, node: impl Into<String>) -> Self {
        Source::Node { program: program.into(), node: node.into() }
    }

    pub fn program(&self) -> Option<&str> {
        match self {
            Source::Node { program, .. } => Some(program),
            _ => None,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Node { program, node } => write!(f, "{program}:{node}"),
            Source::Mutation => f.write_str("mutation"),
            Source::Client(id) => write!(f, "client:{id}"),
        }
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "mutation" {
            return Ok(Source::Mutation);
        }
        match s.split_once(':') {
            Some(("client", id)) if !id.is_empty() => Ok(Source::Client(id.to_string())),
            Some((p, n)) if !p.is_empty() && !n.is_empty() => Ok(Source::node(p, n)),
            _ => Err(format!("bad source tag {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SequenceItem {
    pub source: Source,
    pub template: ApduTemplate,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("sequence line {line}: {message}")]
pub struct SequenceError {
    pub line: usize,
    pub message: String,
}

/// Parses a sequence document: one `<source-tag> <hex-apdu>` per line,
/// `#` comments. The APDU is in wire form and may contain placeholders.
pub fn parse_sequence(text: &str) -> Result<Vec<SequenceItem>, SequenceError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| SequenceError { line, message };
        let (tag, apdu) = content.split_once(char::is_whitespace).ok_or_else(|| err("missing apdu".into()))?;
        let source = tag.parse().map_err(err)?;
        let template = ApduTemplate::parse_wire(apdu.trim()).map_err(|e| err(e.to_string()))?;
        out.push(SequenceItem { source, template });
    }
    Ok(out)
}

pub fn format_sequence(items: &[SequenceItem]) -> String {
    items.iter().map(|i| format!("{} {}\n", i.source, i.template)).collect()
}

/// Every step of `program`, tagged with its node label.
pub fn program_items(program: &StraightLineProgram) -> Vec<SequenceItem> {
    program
        .steps()
        .iter()
        .map(|s| SequenceItem { source: Source::node(&program.id, s.node.to_string()), template: s.pattern.clone() })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Classification {
    /// Legal at the current position and accepted.
    Case1,
    /// Rejected by the card.
    Case2,
    /// Accepted by the card but not legal at the current position: an anomaly.
    Case3,
}

impl Classification {
    pub fn of(success: bool, legal: bool) -> Self {
        match (success, legal) {
            (false, _) => Classification::Case2,
            (true, true) => Classification::Case1,
            (true, false) => Classification::Case3,
        }
    }
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classification::Case1 => "case1",
            Classification::Case2 => "case2",
            Classification::Case3 => "case3",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub sequence_index: usize,
    pub source: Source,
    pub command: CommandApdu,
    pub response: ResponseApdu,
    pub classification: Classification,
    /// Not globally legal at the position it arrived at.
    pub external: bool,
    pub position_before: usize,
    pub position_after: usize,
}

impl StepRecord {
    pub fn to_json(&self) -> Value {
        json!({
            "type": "step",
            "index": self.sequence_index,
            "source": self.source.to_string(),
            "command": format_hex_compact(&self.command.to_bytes()),
            "response": format_hex_compact(&self.response.to_bytes()),
            "sw": self.response.sw.to_string(),
            "case": self.classification.to_string(),
            "external": self.external,
            "position_before": self.position_before,
            "position_after": self.position_after,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Completed,
    CompletedWithAnomalies(usize),
    /// Index of the first rejected command, which came before the
    /// reference program completed.
    ErroredAt(usize),
    /// No error, but the reference program did not reach its last step.
    Incomplete { position: usize },
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Completed => f.write_str("Completed"),
            Verdict::CompletedWithAnomalies(n) => write!(f, "Completed, anomalies: {n}"),
            Verdict::ErroredAt(i) => write!(f, "Errored at step {i}"),
            Verdict::Incomplete { position } => write!(f, "Incomplete at position {position}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    pub run_id: String,
    pub profile_id: String,
    pub program_id: String,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub verdict: Verdict,
    pub final_card_destroyed: bool,
}

impl RunReport {
    pub fn count(&self, class: Classification) -> usize {
        self.records.iter().filter(|r| r.classification == class).count()
    }

    pub fn anomalies(&self) -> usize {
        self.count(Classification::Case3)
    }

    pub fn errors(&self) -> usize {
        self.count(Classification::Case2)
    }

    pub fn summary_json(&self) -> Value {
        let (verdict, at) = match self.verdict {
            Verdict::Completed => ("Completed", None),
            Verdict::CompletedWithAnomalies(n) => ("CompletedWithAnomalies", Some(n)),
            Verdict::ErroredAt(i) => ("ErroredAt", Some(i)),
            Verdict::Incomplete { position } => ("Incomplete", Some(position)),
        };
        json!({
            "type": "summary",
            "run_id": self.run_id,
            "profile": self.profile_id,
            "program": self.program_id,
            "seed": self.seed,
            "verdict": verdict,
            "verdict_value": at,
            "anomalies": self.anomalies(),
            "errors": self.errors(),
            "final_card_destroyed": self.final_card_destroyed,
        })
    }

    /// One JSON object per step record, then the summary object.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_json().to_string());
            out.push('\n');
        }
        out.push_str(&self.summary_json().to_string());
        out.push('\n');
        out
    }
}

fn verdict(records: &[StepRecord], program_len: usize) -> Verdict {
    let completed_at = records.iter().position(|r| r.position_after >= program_len);
    let first_error = records.iter().position(|r| r.classification == Classification::Case2);
    match (first_error, completed_at) {
        (Some(e), None) => Verdict::ErroredAt(records[e].sequence_index),
        (Some(e), Some(c)) if e < c => Verdict::ErroredAt(records[e].sequence_index),
        (_, Some(_)) => match records.iter().filter(|r| r.classification == Classification::Case3).count() {
            0 => Verdict::Completed,
            n => Verdict::CompletedWithAnomalies(n),
        },
        (None, None) => Verdict::Incomplete { position: records.last().map_or(0, |r| r.position_after) },
    }
}

/// Executes sequences against a card and classifies every step against a
/// reference program.
#[derive(Debug, Clone)]
pub struct Runner {
    profile: Arc<CardProfile>,
    reference: Arc<StraightLineProgram>,
    seed: u64,
    bindings: Bindings,
}

impl Runner {
    /// Bindings default to the profile PIN and counting payloads. If the
    /// reference program has no reference PIN and is certified for this
    /// profile, the profile PIN is used for legality checks.
    pub fn new(profile: Arc<CardProfile>, reference: Arc<StraightLineProgram>, seed: u64) -> Self {
        let reference = if reference.reference_pin().is_none() && reference.card_profile_id == profile.id {
            Arc::new((*reference).clone().with_reference_pin(profile.pin.clone()))
        } else {
            reference
        };
        let bindings = Bindings::standard(profile.pin.clone());
        Runner { profile, reference, seed, bindings }
    }

    pub fn with_bindings(mut self, bindings: Bindings) -> Self {
        self.bindings = bindings;
        self
    }

    pub fn profile(&self) -> &Arc<CardProfile> {
        &self.profile
    }

    pub fn reference(&self) -> &Arc<StraightLineProgram> {
        &self.reference
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Runs on a fresh card instance.
    pub fn run(&self, items: &[SequenceItem]) -> Result<RunReport, TemplateError> {
        let mut card = Card::new(self.profile.clone(), self.seed);
        self.run_on(&mut card, items)
    }

    /// Runs on an existing card; its state carries over.
    pub fn run_on(&self, card: &mut Card, items: &[SequenceItem]) -> Result<RunReport, TemplateError> {
        let bound: Vec<ApduTemplate> =
            items.iter().map(|i| i.template.bind(&self.bindings)).collect::<Result<_, _>>()?;
        let mut tracker = ProgressTracker::new();
        let mut rn = RnBinder::default();
        let mut records = Vec::with_capacity(items.len());
        for (index, (item, template)) in items.iter().zip(&bound).enumerate() {
            let command = template.resolve(&rn.current())?;
            let position_before = tracker.position();
            let legality = tracker.check(&self.reference, &command);
            let response = card.transmit(&command);
            rn.observe(&command, &response);
            tracker.record(legality, response.is_success());
            let legal = matches!(legality, Legality::Expected(_));
            records.push(StepRecord {
                sequence_index: index,
                source: item.source.clone(),
                classification: Classification::of(response.is_success(), legal),
                external: !legal,
                command,
                response,
                position_before,
                position_after: tracker.position(),
            });
        }
        Ok(RunReport {
            run_id: String::new(),
            profile_id: self.profile.id.clone(),
            program_id: self.reference.id.clone(),
            seed: self.seed,
            verdict: verdict(&records, self.reference.len()),
            final_card_destroyed: card.state().destroyed,
            records,
        })
    }

    /// Runs every sequence on its own fresh card using at most `workers`
    /// threads. Reports come back in input order with `run_id` set to the
    /// sequence index.
    pub fn run_many<I>(&self, sequences: I, workers: usize) -> Result<Vec<RunReport>, TemplateError>
    where
        I: IntoIterator<Item = Vec<SequenceItem>>,
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .expect("thread pool");
        let mut out = Vec::new();
        let mut iter = sequences.into_iter().enumerate().peekable();
        while iter.peek().is_some() {
            let batch: Vec<(usize, Vec<SequenceItem>)> = iter.by_ref().take(1024).collect();
            let reports: Vec<Result<RunReport, TemplateError>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|(i, seq)| {
                        self.run(seq).map(|mut r| {
                            r.run_id = i.to_string();
                            r
                        })
                    })
                    .collect()
            });
            for r in reports {
                out.push(r?);
            }
        }
        Ok(out)
    }
}

/// Runs `items` on a fresh card of `profile`, classifying against
/// `reference`.
pub fn run_sequence(
    profile: Arc<CardProfile>,
    reference: Arc<StraightLineProgram>,
    items: &[SequenceItem],
    seed: u64,
) -> Result<RunReport, TemplateError> {
    Runner::new(profile, reference, seed).run(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;
    use crate::engine::enumerate_interleavings;

    const TABLE1: &str = include_str!("../../scripts/table1.seq");
    const TABLE2: &str = include_str!("../../scripts/table2.seq");
    const FIG3: &str = include_str!("../../scripts/fig3.seq");

    fn incrypto_runner(seed: u64) -> Runner {
        let c = Catalog::builtin();
        Runner::new(c.profile("incrypto").unwrap(), c.program("incrypto_P1").unwrap(), seed)
    }

    #[test]
    fn sequence_parsing() {
        let items = parse_sequence(TABLE2).unwrap();
        assert_eq!(items.len(), 16);
        assert_eq!(items[1].source, Source::node("table2_P2", "2,k"));
        assert_eq!(parse_sequence(&format_sequence(&items)).unwrap(), items);
        let e = parse_sequence("incrypto_P1:1,1\n").unwrap_err();
        assert_eq!(e.line, 1);
        let e = parse_sequence("# c\nbogus 00 A4 00 00\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = parse_sequence("x:1 00 A4\n").unwrap_err();
        assert_eq!(e.line, 1);
    }

    #[test]
    fn table1_completes_cleanly() {
        let r = incrypto_runner(7).run(&parse_sequence(TABLE1).unwrap()).unwrap();
        assert_eq!(r.verdict, Verdict::Completed);
        assert_eq!(r.count(Classification::Case1), 10);
        assert_eq!(r.records[9].response.data.len(), 128);
        assert!(!r.final_card_destroyed);
    }

    #[test]
    fn table2_completes_with_ten_anomalies() {
        let r = incrypto_runner(7).run(&parse_sequence(TABLE2).unwrap()).unwrap();
        assert_eq!(r.errors(), 0);
        assert_eq!(r.verdict, Verdict::CompletedWithAnomalies(10));
        for rec in &r.records {
            let from_p2 = rec.source.program() == Some("table2_P2");
            assert_eq!(rec.classification == Classification::Case3, from_p2, "{}", rec.source);
        }
    }

    #[test]
    fn fig3_errors_at_mse_restore() {
        let r = incrypto_runner(7).run(&parse_sequence(FIG3).unwrap()).unwrap();
        assert_eq!(r.records[2].classification, Classification::Case3);
        assert_eq!(r.records[3].classification, Classification::Case2);
        assert_eq!(r.verdict, Verdict::ErroredAt(3));
        assert!(r.final_card_destroyed);
    }

    #[test]
    fn case3_never_advances_and_position_is_bounded() {
        let runner = incrypto_runner(3);
        let a = program_items(runner.reference());
        let b = parse_sequence(TABLE2).unwrap().into_iter().filter(|i| i.source.program() == Some("table2_P2"));
        let b: Vec<_> = b.take(3).collect();
        for seq in enumerate_interleavings(&a, &b) {
            let r = runner.run(&seq).unwrap();
            for rec in &r.records {
                assert!(rec.position_after <= 10);
                match rec.classification {
                    Classification::Case1 => assert!(rec.position_after > rec.position_before),
                    _ => assert_eq!(rec.position_after, rec.position_before),
                }
            }
        }
    }

    #[test]
    fn deterministic_reports() {
        let items = parse_sequence(TABLE2).unwrap();
        let a = incrypto_runner(11).run(&items).unwrap();
        let b = incrypto_runner(11).run(&items).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json_lines(), b.to_json_lines());
        let c = incrypto_runner(12).run(&items).unwrap();
        assert_ne!(a.records[8].response, c.records[8].response);
    }

    #[test]
    fn run_many_keeps_order() {
        let runner = incrypto_runner(1);
        let a = program_items(runner.reference());
        let c = Catalog::builtin();
        let b = program_items(&c.program("incrypto_challenge").unwrap());
        let seqs: Vec<_> = enumerate_interleavings(&a, &b).collect();
        let parallel = runner.run_many(seqs.clone(), 4).unwrap();
        assert_eq!(parallel.len(), 66);
        for (i, (seq, rep)) in seqs.iter().zip(&parallel).enumerate() {
            assert_eq!(rep.run_id, i.to_string());
            let serial = runner.run(seq).unwrap();
            assert_eq!(serial.records, rep.records);
        }
    }

    #[test]
    fn missing_binding_is_reported() {
        let runner = incrypto_runner(1).with_bindings(Bindings::new());
        let err = runner.run(&parse_sequence(TABLE1).unwrap()).unwrap_err();
        assert_eq!(err, TemplateError::MissingBinding("PIN".into()));
    }

    #[test]
    fn json_lines_shape() {
        let r = incrypto_runner(7).run(&parse_sequence(TABLE2).unwrap()).unwrap();
        let lines: Vec<Value> =
            r.to_json_lines().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 17);
        assert_eq!(lines[1]["case"], "case3");
        assert_eq!(lines[16]["verdict"], "CompletedWithAnomalies");
        assert_eq!(lines[16]["anomalies"], 10);
    }

    #[test]
    fn verdict_rules() {
        let rec = |i: usize, class, after| StepRecord {
            sequence_index: i,
            source: Source::Mutation,
            command: CommandApdu::new(0, 0, 0, 0),
            response: ResponseApdu::status(crate::apdu::StatusWord::SUCCESS),
            classification: class,
            external: false,
            position_before: 0,
            position_after: after,
        };
        use Classification::*;
        assert_eq!(verdict(&[rec(0, Case1, 1)], 1), Verdict::Completed);
        assert_eq!(verdict(&[rec(0, Case1, 1), rec(1, Case2, 1)], 1), Verdict::Completed);
        assert_eq!(verdict(&[rec(0, Case2, 0), rec(1, Case1, 1)], 1), Verdict::ErroredAt(0));
        assert_eq!(verdict(&[rec(0, Case3, 0), rec(1, Case1, 1)], 1), Verdict::CompletedWithAnomalies(1));
        assert_eq!(verdict(&[rec(0, Case3, 0)], 1), Verdict::Incomplete { position: 0 });
    }
}
