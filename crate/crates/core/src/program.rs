//! Certified straight-line programs and the global legality predicate.
//!
//! A command is globally legal at position `p` of a program when it is an
//! instance of the step template at `p`. The check is purely syntactic and
//! never consults card state.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::apdu::CommandApdu;
use crate::doc::{Document, SyntaxError};
use crate::hex::parse_hex_token;
use crate::template::{ApduTemplate, Bindings, TemplateError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProgramError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("program has no steps")]
    Empty,
    #[error("step {0} does not increase the step index")]
    NonIncreasingNode(NodeLabel),
    #[error("position {position} is past the end of a {len}-step program")]
    PositionOutOfRange { position: usize, len: usize },
}

/// `(program index, step index)`, written `1,7`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeLabel {
    pub program: u32,
    pub step: u32,
}

impl NodeLabel {
    pub fn new(program: u32, step: u32) -> Self {
        NodeLabel { program, step }
    }
}

impl fmt::Display for NodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.program, self.step)
    }
}

impl FromStr for NodeLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once(',').ok_or_else(|| format!("node label {s:?} is not `i,j`"))?;
        let parse = |x: &str| x.trim().parse::<u32>().map_err(|_| format!("bad node label {s:?}"));
        Ok(NodeLabel { program: parse(a)?, step: parse(b)? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepTemplate {
    pub node: NodeLabel,
    pub name: String,
    pub pattern: ApduTemplate,
    pub expect_success: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StraightLineProgram {
    pub id: String,
    pub card_profile_id: String,
    steps: Vec<StepTemplate>,
    reference_pin: Option<Vec<u8>>,
}

impl StraightLineProgram {
    pub fn new(
        id: impl Into<String>,
        card_profile_id: impl Into<String>,
        steps: Vec<StepTemplate>,
    ) -> Result<Self, ProgramError> {
        if steps.is_empty() {
            return Err(ProgramError::Empty);
        }
        for pair in steps.windows(2) {
            if pair[1].node.step <= pair[0].node.step {
                return Err(ProgramError::NonIncreasingNode(pair[1].node));
            }
        }
        Ok(StraightLineProgram { id: id.into(), card_profile_id: card_profile_id.into(), steps, reference_pin: None })
    }

    /// Fixes the PIN that `${PIN}` must equal in legality checks. Without
    /// it any PIN value of the right position is accepted.
    pub fn with_reference_pin(mut self, pin: Vec<u8>) -> Self {
        self.reference_pin = Some(pin);
        self
    }

    pub fn reference_pin(&self) -> Option<&[u8]> {
        self.reference_pin.as_deref()
    }

    pub fn steps(&self) -> &[StepTemplate] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Concrete commands for every step. `${RN}` stays in place for late
    /// binding at execution time.
    pub fn instantiate(&self, bindings: &Bindings) -> Result<Vec<ApduTemplate>, ProgramError> {
        self.steps
            .iter()
            .map(|s| s.pattern.bind(bindings).map_err(ProgramError::from))
            .collect()
    }

    pub fn is_globally_legal(&self, position: usize, cmd: &CommandApdu) -> bool {
        self.steps
            .get(position)
            .is_some_and(|s| s.pattern.matches(cmd, self.reference_pin.as_deref()))
    }

    pub fn next_expected(&self, position: usize) -> Result<&StepTemplate, ProgramError> {
        self.steps
            .get(position)
            .ok_or(ProgramError::PositionOutOfRange { position, len: self.steps.len() })
    }

    pub fn position_of(&self, node: NodeLabel) -> Option<usize> {
        self.steps.iter().position(|s| s.node == node)
    }

    pub fn parse(text: &str) -> Result<Self, ProgramError> {
        load_program(text)
    }
}

/// Parses a program document.
pub fn load_program(text: &str) -> Result<StraightLineProgram, ProgramError> {
    let doc = Document::parse(text)?;
    doc.check_sections(&["program", "step"])?;
    let header = doc.single("program")?;
    header.check_keys(&["id", "card_profile_id"])?;
    let id = header.require("id")?.value.clone();
    let card = header.require("card_profile_id")?.value.clone();

    let mut steps = Vec::new();
    for section in doc.sections("step") {
        section.check_keys(&["node", "name", "apdu", "le", "expect"])?;
        let node_entry = section.require("node")?;
        let node: NodeLabel = node_entry.value.parse().map_err(|m| SyntaxError::new(node_entry.line, m))?;
        let le = match section.get("le") {
            None => None,
            Some(e) if e.value == "none" => None,
            Some(e) => match parse_hex_token(&e.value) {
                Ok(b) if b.len() == 1 => Some(b[0]),
                _ => return Err(SyntaxError::new(e.line, format!("bad le {:?}", e.value)).into()),
            },
        };
        let apdu = section.require("apdu")?;
        let pattern = ApduTemplate::parse_fields(&apdu.value, le).map_err(|e| match e {
            TemplateError::Hex(h) => ProgramError::Syntax(SyntaxError::new(apdu.line, h.to_string())),
            other => ProgramError::Template(other),
        })?;
        let expect_success = match section.get("expect") {
            None => true,
            Some(e) => match e.value.as_str() {
                "success" => true,
                "error" => false,
                _ => return Err(SyntaxError::new(e.line, "expect must be `success` or `error`").into()),
            },
        };
        steps.push(StepTemplate {
            node,
            name: section.value("name").unwrap_or_default().to_string(),
            pattern,
            expect_success,
        });
    }
    StraightLineProgram::new(id, card, steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Legality {
    /// Legal at this step index.
    Expected(usize),
    External,
}

/// Tracks a session's position in its certified program.
///
/// The position advances only when a legal command succeeds. After an
/// external command has been seen, the process may have moved to any step,
/// so the next command is also accepted as legal at the first later step
/// it matches (resynchronisation). Without a preceding external command,
/// skipping ahead is not legal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProgressTracker {
    position: usize,
    external_since_match: bool,
}

impl ProgressTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn is_complete(&self, program: &StraightLineProgram) -> bool {
        self.position >= program.len()
    }

    pub fn check(&self, program: &StraightLineProgram, cmd: &CommandApdu) -> Legality {
        if program.is_globally_legal(self.position, cmd) {
            return Legality::Expected(self.position);
        }
        if self.external_since_match {
            if let Some(q) = (self.position + 1..program.len()).find(|&q| program.is_globally_legal(q, cmd)) {
                return Legality::Expected(q);
            }
        }
        Legality::External
    }

    pub fn record(&mut self, legality: Legality, success: bool) {
        match legality {
            Legality::Expected(q) if success => {
                self.position = q + 1;
                self.external_since_match = false;
            }
            Legality::Expected(_) => {}
            Legality::External => self.external_since_match = true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;
    use crate::hex::parse_hex;
    use std::sync::Arc;

    fn p1() -> Arc<StraightLineProgram> {
        Catalog::builtin().program("incrypto_P1").unwrap()
    }

    fn apdu(hex: &str) -> CommandApdu {
        CommandApdu::parse(&parse_hex(hex).unwrap()).unwrap()
    }

    const PIN: [u8; 8] = *b"12345678";

    #[test]
    fn instantiate_matches_table() {
        let cmds = p1().instantiate(&Bindings::standard(PIN.to_vec())).unwrap();
        assert_eq!(cmds.len(), 10);
        let rn = [0xAA; 8];
        let hex: Vec<String> = cmds.iter().map(|t| t.resolve(&rn).unwrap().to_string()).collect();
        assert_eq!(hex[0], "00 A4 00 00 FF");
        assert_eq!(hex[1], "00 A4 00 00 02 14 00 FF");
        assert_eq!(hex[2], "00 22 F3 03 00");
        assert_eq!(hex[3], "00 22 F1 B6 03 83 01 10 00");
        assert_eq!(hex[4], "00 84 00 00 08");
        assert_eq!(hex[5], "80 86 00 00 08 AA AA AA AA AA AA AA AA 00");
        assert_eq!(hex[6], "0C 20 00 9A 08 31 32 33 34 35 36 37 38 00");
        assert_eq!(hex[7], hex[4]);
        assert_eq!(hex[8], hex[5]);
        assert!(hex[9].starts_with("0C 2A 9E 9A 75 00 01 02"));
        assert!(hex[9].ends_with("72 73 74 FF"));
    }

    #[test]
    fn instantiate_identity_without_placeholders() {
        let prog = load_program(
            "[program]\nid=p\ncard_profile_id=c\n[step]\nnode=1,1\napdu=00 A4 00 00\nle=FF\n",
        )
        .unwrap();
        let cmds = prog.instantiate(&Bindings::new()).unwrap();
        assert_eq!(cmds[0], prog.steps()[0].pattern);
    }

    #[test]
    fn instantiate_missing_pin() {
        let err = p1().instantiate(&Bindings::new()).unwrap_err();
        assert_eq!(err, ProgramError::Template(TemplateError::MissingBinding("PIN".into())));
    }

    #[test]
    fn legality_examples() {
        let p = p1();
        assert!(p.is_globally_legal(2, &apdu("00 22 F3 03 00")));
        assert!(!p.is_globally_legal(2, &apdu("81 86 00 00 02 14 00 00")));
        assert!(!p.is_globally_legal(1, &apdu("81 86 00 00 02 14 00 00")));
        assert!(!p.is_globally_legal(10, &apdu("00 A4 00 00 FF")));
    }

    #[test]
    fn rn_is_a_wildcard() {
        use rand::{Rng, SeedableRng};
        let p = p1();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let rn: [u8; 8] = rng.gen();
            let cmd = CommandApdu::new(0x80, 0x86, 0, 0).with_data(rn.to_vec()).unwrap().with_le(0);
            assert!(p.is_globally_legal(5, &cmd));
            assert!(p.is_globally_legal(8, &cmd));
        }
    }

    #[test]
    fn next_expected_examples() {
        let p = p1();
        let s = p.next_expected(0).unwrap();
        assert_eq!((s.node, s.name.as_str()), (NodeLabel::new(1, 1), "Select MF"));
        let s = p.next_expected(9).unwrap();
        assert_eq!((s.node, s.name.as_str()), (NodeLabel::new(1, 10), "PSO Compute DS"));
        assert_eq!(p.next_expected(10).unwrap_err(), ProgramError::PositionOutOfRange { position: 10, len: 10 });
    }

    #[test]
    fn every_instantiated_step_is_legal_at_its_position() {
        let catalog = Catalog::builtin();
        for prog in catalog.programs() {
            let pin = catalog.profile(&prog.card_profile_id).map(|p| p.pin.clone()).unwrap_or_default();
            let prog = (**prog).clone().with_reference_pin(pin.clone());
            let cmds = prog.instantiate(&Bindings::standard(pin)).unwrap();
            for (pos, t) in cmds.iter().enumerate() {
                for rn in [[0u8; 8], [0xFF; 8], [0x5A; 8]] {
                    assert!(prog.is_globally_legal(pos, &t.resolve(&rn).unwrap()), "{} {pos}", prog.id);
                }
            }
        }
    }

    #[test]
    fn distinct_headers_are_not_cross_legal() {
        let p = p1();
        let cmds: Vec<CommandApdu> = p
            .instantiate(&Bindings::standard(PIN.to_vec()))
            .unwrap()
            .iter()
            .map(|t| t.resolve(&[1; 8]).unwrap())
            .collect();
        // Nodes 1,5 = 1,8 and 1,6 = 1,9 share a pattern and are mutually legal.
        let same = |a: usize, b: usize| a == b || [(4, 7), (7, 4), (5, 8), (8, 5)].contains(&(a, b));
        for (p_idx, cmd) in cmds.iter().enumerate() {
            for q in 0..cmds.len() {
                assert_eq!(p.is_globally_legal(q, cmd), same(p_idx, q), "cmd {p_idx} at {q}");
            }
        }
    }

    #[test]
    fn tracker_resyncs_only_after_external() {
        let p = p1();
        let mut t = ProgressTracker::new();
        let restore = apdu("00 22 F3 03 00");
        assert_eq!(t.check(&p, &restore), Legality::External);
        t.record(Legality::External, true);
        assert_eq!(t.check(&p, &restore), Legality::Expected(2));
        t.record(Legality::Expected(2), false);
        assert_eq!(t.position(), 0);
        t.record(Legality::Expected(2), true);
        assert_eq!(t.position(), 3);
        // No external since the match: skipping ahead is external.
        assert_eq!(t.check(&p, &apdu("00 84 00 00 08")), Legality::External);
    }

    #[test]
    fn document_errors() {
        assert_eq!(load_program("[program]\nid=p\ncard_profile_id=c\n"), Err(ProgramError::Empty));
        let e = load_program(
            "[program]\nid=p\ncard_profile_id=c\n[step]\nnode=1,2\napdu=00 A4 00 00\n[step]\nnode=1,1\napdu=00 A4 00 00\n",
        )
        .unwrap_err();
        assert_eq!(e, ProgramError::NonIncreasingNode(NodeLabel::new(1, 1)));
        assert!(matches!(
            load_program("[program]\nid=p\ncard_profile_id=c\n[step]\nnode=x\napdu=00\n"),
            Err(ProgramError::Syntax(_))
        ));
    }
}
