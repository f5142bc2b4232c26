use std::fmt;

use thiserror::Error;

use crate::apdu::{CommandApdu, StatusWord};
use crate::doc::{Document, Section, SyntaxError};
use crate::hex::{parse_hex, parse_hex_token};

use super::CardState;

pub type FileId = u16;

pub const MASTER_FILE: FileId = 0x3F00;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfileError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("line {line}: unknown effect `{name}`")]
    UnknownEffect { line: usize, name: String },
    #[error("line {line}: unknown state predicate `{name}`")]
    UnknownPredicate { line: usize, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BytePattern {
    Any,
    OneOf(Vec<u8>),
}

impl BytePattern {
    pub fn matches(&self, b: u8) -> bool {
        match self {
            BytePattern::Any => true,
            BytePattern::OneOf(set) => set.contains(&b),
        }
    }

    fn intersects(&self, other: &BytePattern) -> bool {
        match (self, other) {
            (BytePattern::OneOf(a), BytePattern::OneOf(b)) => a.iter().any(|x| b.contains(x)),
            _ => true,
        }
    }

    fn parse(token: &str) -> Result<Self, String> {
        if token == "*" {
            return Ok(BytePattern::Any);
        }
        token
            .split('|')
            .map(|alt| match parse_hex_token(alt) {
                Ok(b) if b.len() == 1 => Ok(b[0]),
                _ => Err(format!("bad byte pattern {token:?}")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(BytePattern::OneOf)
    }
}

/// Constraint on the optional `lc` or `le` byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LengthPattern {
    /// Absent or any value.
    Any,
    Absent,
    /// Present with any value.
    Present,
    OneOf(Vec<u8>),
}

impl LengthPattern {
    pub fn matches(&self, value: Option<u8>) -> bool {
        match (self, value) {
            (LengthPattern::Any, _) => true,
            (LengthPattern::Absent, v) => v.is_none(),
            (LengthPattern::Present, v) => v.is_some(),
            (LengthPattern::OneOf(set), Some(v)) => set.contains(&v),
            (LengthPattern::OneOf(_), None) => false,
        }
    }

    fn intersects(&self, other: &LengthPattern) -> bool {
        use LengthPattern::*;
        match (self, other) {
            (Any, _) | (_, Any) => true,
            (Absent, Absent) => true,
            (Absent, _) | (_, Absent) => false,
            (OneOf(a), OneOf(b)) => a.iter().any(|x| b.contains(x)),
            _ => true,
        }
    }

    fn parse(token: &str) -> Result<Self, String> {
        match token {
            "*" => Ok(LengthPattern::Any),
            "none" => Ok(LengthPattern::Absent),
            "+" => Ok(LengthPattern::Present),
            _ => match BytePattern::parse(token)? {
                BytePattern::OneOf(set) => Ok(LengthPattern::OneOf(set)),
                BytePattern::Any => Ok(LengthPattern::Any),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandPattern {
    pub header: [BytePattern; 4],
    pub lc: LengthPattern,
    pub le: LengthPattern,
}

impl CommandPattern {
    pub fn any() -> Self {
        CommandPattern {
            header: [BytePattern::Any, BytePattern::Any, BytePattern::Any, BytePattern::Any],
            lc: LengthPattern::Any,
            le: LengthPattern::Any,
        }
    }

    pub fn matches(&self, cmd: &CommandApdu) -> bool {
        self.header.iter().zip(cmd.header()).all(|(p, b)| p.matches(b))
            && self.lc.matches(cmd.lc())
            && self.le.matches(cmd.le)
    }

    pub fn intersects(&self, other: &CommandPattern) -> bool {
        self.header.iter().zip(&other.header).all(|(a, b)| a.intersects(b))
            && self.lc.intersects(&other.lc)
            && self.le.intersects(&other.le)
    }

    /// `00 A4 * * lc=02|08 le=none`
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut pattern = CommandPattern::any();
        let mut header = Vec::new();
        for token in text.split_whitespace() {
            if let Some(v) = token.strip_prefix("lc=") {
                pattern.lc = LengthPattern::parse(v)?;
            } else if let Some(v) = token.strip_prefix("le=") {
                pattern.le = LengthPattern::parse(v)?;
            } else {
                header.push(BytePattern::parse(token)?);
            }
        }
        pattern.header = header
            .try_into()
            .map_err(|h: Vec<_>| format!("header pattern needs 4 bytes, found {}", h.len()))?;
        Ok(pattern)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predicate {
    SeoPresent,
    SeRestored,
    SeKeyrefSet,
    PinVerified,
    MfSelected,
    FileSelected,
    ChallengePending,
    Destroyed,
}

impl Predicate {
    const NAMES: [(&'static str, Predicate); 8] = [
        ("seo_present", Predicate::SeoPresent),
        ("se_restored", Predicate::SeRestored),
        ("se_keyref_set", Predicate::SeKeyrefSet),
        ("pin_verified", Predicate::PinVerified),
        ("mf_selected", Predicate::MfSelected),
        ("file_selected", Predicate::FileSelected),
        ("challenge_pending", Predicate::ChallengePending),
        ("destroyed", Predicate::Destroyed),
    ];

    pub fn holds(self, state: &CardState) -> bool {
        match self {
            Predicate::SeoPresent => state.seo_present,
            Predicate::SeRestored => state.se_restored,
            Predicate::SeKeyrefSet => state.se_keyref_set,
            Predicate::PinVerified => state.pin_verified,
            Predicate::MfSelected => state.selected_file == Some(MASTER_FILE),
            Predicate::FileSelected => state.selected_file.is_some(),
            Predicate::ChallengePending => state.last_challenge.is_some(),
            Predicate::Destroyed => state.destroyed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requirement {
    pub predicate: Predicate,
    pub negated: bool,
}

impl Requirement {
    pub fn holds(&self, state: &CardState) -> bool {
        self.predicate.holds(state) != self.negated
    }
}

/// Fixed catalogue of rule effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effect {
    SelectMf,
    SelectEf,
    MseRestore,
    MseSet,
    MseErase,
    GetChallenge,
    GiveChallenge,
    VerifyPin,
    PsoSign,
    Noop,
}

impl Effect {
    const NAMES: [(&'static str, Effect); 10] = [
        ("select_mf", Effect::SelectMf),
        ("select_ef", Effect::SelectEf),
        ("mse_restore", Effect::MseRestore),
        ("mse_set", Effect::MseSet),
        ("mse_erase", Effect::MseErase),
        ("get_challenge", Effect::GetChallenge),
        ("give_challenge", Effect::GiveChallenge),
        ("verify_pin", Effect::VerifyPin),
        ("pso_sign", Effect::PsoSign),
        ("noop", Effect::Noop),
    ];

    pub fn name(self) -> &'static str {
        Self::NAMES.iter().find(|(_, e)| *e == self).map(|(n, _)| *n).unwrap()
    }
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub name: String,
    pub pattern: CommandPattern,
    pub require: Vec<Requirement>,
    pub effect: Effect,
    pub sw_ok: StatusWord,
    pub sw_fail: StatusWord,
}

impl Rule {
    pub fn catch_all() -> Self {
        Rule {
            name: "catch_all".into(),
            pattern: CommandPattern::any(),
            require: Vec::new(),
            effect: Effect::Noop,
            sw_ok: StatusWord::INS_NOT_SUPPORTED,
            sw_fail: StatusWord::INS_NOT_SUPPORTED,
        }
    }

    fn is_catch_all(&self) -> bool {
        self.pattern == CommandPattern::any() && self.require.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPolicy {
    /// Use the seed supplied when the card is reset.
    Caller,
    Fixed(u64),
}

/// Behavioral rules of one card type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CardProfile {
    pub id: String,
    pub pin: Vec<u8>,
    pub pin_tries: u8,
    pub seo_present_initially: bool,
    pub files: Vec<FileId>,
    pub seed_policy: SeedPolicy,
    rules: Vec<Rule>,
    warnings: Vec<String>,
}

impl CardProfile {
    /// Builds a profile, appending a catch-all rule unless the last rule
    /// already matches every command.
    pub fn new(id: impl Into<String>, pin: Vec<u8>, seo_present_initially: bool, mut rules: Vec<Rule>) -> Self {
        if !rules.last().is_some_and(Rule::is_catch_all) {
            rules.push(Rule::catch_all());
        }
        let warnings = overlap_warnings(&rules);
        CardProfile {
            id: id.into(),
            pin,
            pin_tries: 3,
            seo_present_initially,
            files: vec![MASTER_FILE],
            seed_policy: SeedPolicy::Caller,
            rules,
            warnings,
        }
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// Overlapping rule patterns found at load time. First match wins, so
    /// these are informational.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn rule_for(&self, cmd: &CommandApdu) -> &Rule {
        self.rules
            .iter()
            .find(|r| r.pattern.matches(cmd))
            .expect("catch-all rule matches every command")
    }

    pub fn parse(text: &str) -> Result<Self, ProfileError> {
        load_profile(text)
    }
}

fn overlap_warnings(rules: &[Rule]) -> Vec<String> {
    let mut out = Vec::new();
    for (j, later) in rules.iter().enumerate() {
        if later.is_catch_all() {
            continue;
        }
        for earlier in &rules[..j] {
            if earlier.pattern.intersects(&later.pattern) {
                out.push(format!("rule `{}` overlaps earlier rule `{}`", later.name, earlier.name));
            }
        }
    }
    out
}

/// Parses a profile document.
pub fn load_profile(text: &str) -> Result<CardProfile, ProfileError> {
    let doc = Document::parse(text)?;
    doc.check_sections(&["profile", "rule"])?;
    let header = doc.single("profile")?;
    header.check_keys(&["id", "pin", "seo", "files", "seed", "pin_tries"])?;

    let id = header.require("id")?.value.clone();
    let pin_entry = header.require("pin")?;
    let pin = parse_hex(&pin_entry.value).map_err(|e| SyntaxError::new(pin_entry.line, e.to_string()))?;
    let seo = match header.get("seo") {
        None => true,
        Some(e) => parse_bool(&e.value).ok_or_else(|| SyntaxError::new(e.line, "seo must be true or false"))?,
    };

    let mut rules = Vec::new();
    for (i, section) in doc.sections("rule").enumerate() {
        rules.push(parse_rule(section, i)?);
    }
    let mut profile = CardProfile::new(id, pin, seo, rules);

    if let Some(e) = header.get("files") {
        let mut files = vec![MASTER_FILE];
        for token in e.value.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            let fid = u16::from_str_radix(token, 16)
                .map_err(|_| SyntaxError::new(e.line, format!("bad file id {token:?}")))?;
            if !files.contains(&fid) {
                files.push(fid);
            }
        }
        profile.files = files;
    }
    if let Some(e) = header.get("seed") {
        profile.seed_policy = match e.value.as_str() {
            "caller" => SeedPolicy::Caller,
            v => SeedPolicy::Fixed(
                v.parse().map_err(|_| SyntaxError::new(e.line, "seed must be `caller` or an integer"))?,
            ),
        };
    }
    if let Some(e) = header.get("pin_tries") {
        profile.pin_tries = match e.value.parse() {
            Ok(n) if n > 0 => n,
            _ => return Err(SyntaxError::new(e.line, "pin_tries must be a positive integer").into()),
        };
    }
    Ok(profile)
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn parse_rule(section: &Section, index: usize) -> Result<Rule, ProfileError> {
    section.check_keys(&["name", "match", "require", "effect", "sw_ok", "sw_fail"])?;
    let m = section.require("match")?;
    let pattern = CommandPattern::parse(&m.value).map_err(|msg| SyntaxError::new(m.line, msg))?;

    let effect_entry = section.require("effect")?;
    let effect = Effect::NAMES
        .iter()
        .find(|(n, _)| *n == effect_entry.value)
        .map(|(_, e)| *e)
        .ok_or_else(|| ProfileError::UnknownEffect { line: effect_entry.line, name: effect_entry.value.clone() })?;

    let mut require = Vec::new();
    if let Some(e) = section.get("require") {
        for token in e.value.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (negated, name) = match token.strip_prefix('!') {
                Some(rest) => (true, rest.trim()),
                None => (false, token),
            };
            let predicate = Predicate::NAMES
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, p)| *p)
                .ok_or_else(|| ProfileError::UnknownPredicate { line: e.line, name: name.to_string() })?;
            require.push(Requirement { predicate, negated });
        }
    }

    let sw = |key: &str, default: StatusWord| -> Result<StatusWord, SyntaxError> {
        match section.get(key) {
            None => Ok(default),
            Some(e) => e
                .value
                .parse()
                .map_err(|_| SyntaxError::new(e.line, format!("bad status word {:?}", e.value))),
        }
    };

    Ok(Rule {
        name: section.value("name").map(str::to_string).unwrap_or_else(|| format!("rule{}", index + 1)),
        pattern,
        require,
        effect,
        sw_ok: sw("sw_ok", StatusWord::SUCCESS)?,
        sw_fail: sw("sw_fail", StatusWord::CONDITIONS_NOT_SATISFIED)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_parsing() {
        let p = CommandPattern::parse("80|81|8C|8F 86 * * lc=02|08").unwrap();
        let ok = CommandApdu::new(0x8F, 0x86, 0x12, 0x34).with_data(vec![0x14, 0x00]).unwrap().with_le(0);
        assert!(p.matches(&ok));
        assert!(!p.matches(&CommandApdu::new(0x82, 0x86, 0, 0).with_data(vec![1, 2]).unwrap()));
        assert!(!p.matches(&CommandApdu::new(0x80, 0x86, 0, 0)));
        assert!(CommandPattern::parse("00 A4 00").is_err());
        assert!(CommandPattern::parse("00 A4 00 0").is_err());
    }

    #[test]
    fn le_constraints() {
        let p = CommandPattern::parse("00 A4 00 00 lc=none le=+").unwrap();
        assert!(p.matches(&CommandApdu::new(0, 0xA4, 0, 0).with_le(0xFF)));
        assert!(!p.matches(&CommandApdu::new(0, 0xA4, 0, 0)));
    }

    #[test]
    fn empty_document_answers_ins_not_supported() {
        let p = load_profile("[profile]\nid = blank\npin = 00\n").unwrap();
        assert_eq!(p.rules().len(), 1);
        assert_eq!(p.rule_for(&CommandApdu::new(0, 0xA4, 0, 0)).sw_ok, StatusWord::INS_NOT_SUPPORTED);
    }

    #[test]
    fn unknown_effect_and_predicate() {
        let e = load_profile("[profile]\nid=x\npin=00\n[rule]\nmatch=* * * *\neffect=explode\n").unwrap_err();
        assert_eq!(e, ProfileError::UnknownEffect { line: 6, name: "explode".into() });
        let e = load_profile("[profile]\nid=x\npin=00\n[rule]\nmatch=* * * *\neffect=noop\nrequire=happy\n")
            .unwrap_err();
        assert!(matches!(e, ProfileError::UnknownPredicate { line: 7, .. }));
    }

    #[test]
    fn overlaps_are_warnings_not_errors() {
        let p = load_profile(
            "[profile]\nid=x\npin=00\n[rule]\nname=a\nmatch=80 86 00 00\neffect=noop\n[rule]\nname=b\nmatch=80 86 * *\neffect=noop\n",
        )
        .unwrap();
        assert_eq!(p.warnings(), &["rule `b` overlaps earlier rule `a`".to_string()]);
    }

    #[test]
    fn syntax_errors() {
        assert!(matches!(load_profile("[profile]\nid=x\n"), Err(ProfileError::Syntax(_))));
        assert!(matches!(load_profile("[profile]\nid=x\npin=zz\n"), Err(ProfileError::Syntax(_))));
        assert!(matches!(load_profile("[profile]\nid=x\npin=00\n[bogus]\n"), Err(ProfileError::Syntax(_))));
    }
}
