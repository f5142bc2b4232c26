//! Directive interpreter behind `cps repl` and `cps run`.
//!
//! ```text
//! # comment
//! reset
//! apdu 00 A4 00 00 FF
//! expect 9000
//! bind PIN 31 32 33 34
//! bind PAYLOAD 4 01 02 03 04
//! run scripts/table2.seq
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::apdu::{ResponseApdu, StatusWord};
use crate::card::{Card, CardProfile};
use crate::catalog::Catalog;
use crate::engine::{parse_sequence, Classification, RunReport, Runner};
use crate::hex::{format_hex, format_hex_compact, parse_hex};
use crate::program::{Legality, ProgressTracker, StraightLineProgram};
use crate::template::{ApduTemplate, Bindings, RnBinder, TemplateError};

const MAX_NESTING: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    Reset,
    Apdu(ApduTemplate),
    Expect(StatusWord),
    BindPin(Vec<u8>),
    BindPayload(Vec<u8>),
    Run(PathBuf),
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Directive::Reset => f.write_str("reset"),
            Directive::Apdu(t) => write!(f, "apdu {t}"),
            Directive::Expect(sw) => write!(f, "expect {sw}"),
            Directive::BindPin(p) => write!(f, "bind PIN {}", format_hex(p)),
            Directive::BindPayload(p) => write!(f, "bind PAYLOAD {} {}", p.len(), format_hex(p)),
            Directive::Run(p) => write!(f, "run {}", p.display()),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConsoleError {
    #[error("{0}")]
    Parse(String),
    #[error("expected {expected}, card answered {actual}")]
    ExpectationFailed { expected: StatusWord, actual: StatusWord },
    #[error("expect before any apdu")]
    NothingToExpect,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Script { path: String, line: usize, source: Box<ConsoleError> },
    #[error("no reference program for profile {0:?}")]
    NoProgram(String),
    #[error("scripts nested deeper than {MAX_NESTING}")]
    TooDeep,
}

impl ConsoleError {
    /// True if the error is a failed `expect`, possibly inside a nested
    /// script.
    pub fn is_assertion(&self) -> bool {
        match self {
            ConsoleError::ExpectationFailed { .. } => true,
            ConsoleError::Script { source, .. } => source.is_assertion(),
            _ => false,
        }
    }
}

/// Parses one line. Blank lines and comments give `None`.
pub fn parse_directive(line: &str) -> Result<Option<Directive>, ConsoleError> {
    let content = line.split('#').next().unwrap_or("").trim();
    let Some((word, rest)) = content.split_once(char::is_whitespace).or(Some((content, ""))).filter(|(w, _)| !w.is_empty())
    else {
        return Ok(None);
    };
    let rest = rest.trim();
    let bad = |m: &str| ConsoleError::Parse(format!("{word}: {m}"));
    let hex = |t: &str| parse_hex(t).map_err(|e| bad(&e.to_string()));
    let d = match word.to_ascii_lowercase().as_str() {
        "reset" if rest.is_empty() => Directive::Reset,
        "reset" => return Err(bad("takes no arguments")),
        "apdu" => Directive::Apdu(ApduTemplate::parse_wire(rest).map_err(|e| bad(&e.to_string()))?),
        "expect" => Directive::Expect(rest.parse().map_err(|_| bad("status word must be 4 hex digits"))?),
        "bind" => {
            let (what, value) = rest.split_once(char::is_whitespace).ok_or_else(|| bad("bind PIN|PAYLOAD ..."))?;
            match what {
                "PIN" => Directive::BindPin(hex(value)?),
                "PAYLOAD" => {
                    let (n, bytes) = value.trim().split_once(char::is_whitespace).ok_or_else(|| bad("bind PAYLOAD <n> <hex>"))?;
                    let n: usize = n.parse().map_err(|_| bad("payload length must be decimal"))?;
                    let bytes = hex(bytes)?;
                    if bytes.len() != n {
                        return Err(TemplateError::PayloadLengthMismatch { expected: n, actual: bytes.len() }.into());
                    }
                    Directive::BindPayload(bytes)
                }
                _ => return Err(bad("bind PIN|PAYLOAD ...")),
            }
        }
        "run" if !rest.is_empty() => Directive::Run(PathBuf::from(rest)),
        "run" => return Err(bad("missing path")),
        _ => return Err(ConsoleError::Parse(format!("unknown directive {word:?}"))),
    };
    Ok(Some(d))
}

/// One card plus the state a directive session needs.
#[derive(Debug)]
pub struct Console {
    catalog: Arc<Catalog>,
    profile: Arc<CardProfile>,
    program: Option<Arc<StraightLineProgram>>,
    card: Card,
    rn: RnBinder,
    bindings: Bindings,
    tracker: ProgressTracker,
    last: Option<ResponseApdu>,
    depth: usize,
}

impl Console {
    /// `program`, when set, classifies every `apdu` and is the reference
    /// for `run`; otherwise `run` uses the catalog's default program for the
    /// profile.
    pub fn new(
        catalog: Arc<Catalog>,
        profile: Arc<CardProfile>,
        program: Option<Arc<StraightLineProgram>>,
        seed: u64,
    ) -> Self {
        let program = program.map(|p| match p.reference_pin() {
            None if p.card_profile_id == profile.id => Arc::new((*p).clone().with_reference_pin(profile.pin.clone())),
            _ => p,
        });
        Console {
            catalog,
            card: Card::new(profile.clone(), seed),
            bindings: Bindings::standard(profile.pin.clone()),
            profile,
            program,
            rn: RnBinder::default(),
            tracker: ProgressTracker::new(),
            last: None,
            depth: 0,
        }
    }

    pub fn card(&self) -> &Card {
        &self.card
    }

    pub fn last_response(&self) -> Option<&ResponseApdu> {
        self.last.as_ref()
    }

    /// Parses and executes one line, returning what to print.
    pub fn execute_line(&mut self, line: &str, base: &Path) -> Result<Vec<String>, ConsoleError> {
        match parse_directive(line)? {
            Some(d) => self.execute(&d, base),
            None => Ok(Vec::new()),
        }
    }

    pub fn execute(&mut self, directive: &Directive, base: &Path) -> Result<Vec<String>, ConsoleError> {
        match directive {
            Directive::Reset => {
                self.card.warm_reset();
                self.rn = RnBinder::default();
                self.tracker = ProgressTracker::new();
                self.last = None;
                Ok(vec!["reset".into()])
            }
            Directive::Apdu(t) => {
                let cmd = t.bind(&self.bindings)?.resolve(&self.rn.current())?;
                let legality = self.program.as_ref().map(|p| self.tracker.check(p, &cmd));
                let response = self.card.transmit(&cmd);
                self.rn.observe(&cmd, &response);
                let mut line = format_hex_compact(&response.to_bytes());
                if let Some(legality) = legality {
                    self.tracker.record(legality, response.is_success());
                    let class = Classification::of(response.is_success(), legality != Legality::External);
                    line = format!("{line} {class} position {}", self.tracker.position());
                }
                self.last = Some(response);
                Ok(vec![line])
            }
            Directive::Expect(sw) => {
                let actual = self.last.as_ref().ok_or(ConsoleError::NothingToExpect)?.sw;
                if actual != *sw {
                    return Err(ConsoleError::ExpectationFailed { expected: *sw, actual });
                }
                Ok(Vec::new())
            }
            Directive::BindPin(pin) => {
                self.bindings.pin = Some(pin.clone());
                Ok(vec!["bound PIN".into()])
            }
            Directive::BindPayload(p) => {
                self.bindings.set_payload(p.len(), p.clone())?;
                Ok(vec![format!("bound PAYLOAD:{}", p.len())])
            }
            Directive::Run(path) => {
                let path = if path.is_absolute() { path.clone() } else { base.join(path) };
                if path.extension().is_some_and(|e| e == "seq") {
                    let report = self.run_sequence_file(&path)?;
                    Ok(report_lines(&report))
                } else {
                    self.run_script(&path)
                }
            }
        }
    }

    /// Runs a sequence file on this console's card; card state carries over.
    pub fn run_sequence_file(&mut self, path: &Path) -> Result<RunReport, ConsoleError> {
        let text = read(path)?;
        let items = parse_sequence(&text).map_err(|e| ConsoleError::Script {
            path: path.display().to_string(),
            line: e.line,
            source: Box::new(ConsoleError::Parse(e.message)),
        })?;
        let program = match &self.program {
            Some(p) => p.clone(),
            None => self
                .catalog
                .default_program_for(&self.profile.id)
                .ok_or_else(|| ConsoleError::NoProgram(self.profile.id.clone()))?,
        };
        let runner = Runner::new(self.profile.clone(), program, self.card.seed()).with_bindings(self.bindings.clone());
        let report = runner.run_on(&mut self.card, &items)?;
        self.last = report.records.last().map(|r| r.response.clone());
        Ok(report)
    }

    /// Runs a directive script; relative `run` paths resolve against the
    /// script's directory.
    pub fn run_script(&mut self, path: &Path) -> Result<Vec<String>, ConsoleError> {
        if self.depth >= MAX_NESTING {
            return Err(ConsoleError::TooDeep);
        }
        let text = read(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        self.depth += 1;
        let result = self.run_text(&text, &base).map_err(|(line, source)| ConsoleError::Script {
            path: path.display().to_string(),
            line,
            source: Box::new(source),
        });
        self.depth -= 1;
        result
    }

    /// Runs directive text, stopping at the first error (with its line).
    pub fn run_text(&mut self, text: &str, base: &Path) -> Result<Vec<String>, (usize, ConsoleError)> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            out.extend(self.execute_line(line, base).map_err(|e| (i + 1, e))?);
        }
        Ok(out)
    }
}

fn read(path: &Path) -> Result<String, ConsoleError> {
    fs::read_to_string(path).map_err(|source| ConsoleError::Io { path: path.display().to_string(), source })
}

/// One line per step record, then the summary.
pub fn report_lines(report: &RunReport) -> Vec<String> {
    let mut out: Vec<String> = report
        .records
        .iter()
        .map(|r| {
            format!(
                "{:>3} {:<20} {} -> {} {}",
                r.sequence_index,
                r.source.to_string(),
                format_hex_compact(&r.command.to_bytes()),
                format_hex_compact(&r.response.to_bytes()),
                r.classification
            )
        })
        .collect();
    out.push(format!("summary: {}, errors: {}", report.verdict, report.errors()));
    out
}
