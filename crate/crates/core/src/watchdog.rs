//! Online filter between clients and shared cards.
//!
//! Every command a session submits is checked against the session's
//! certified program before it reaches the card. All access to one card is
//! serialized through that card's lock, and the decision, the card exchange
//! and the session update happen under it, so the order in which commands
//! take the lock is exactly the interleaving the card sees.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};
use thiserror::Error;

use crate::apdu::{CommandApdu, ResponseApdu, StatusWord};
use crate::card::{Card, CardProfile, CHALLENGE_LEN};
use crate::catalog::Catalog;
use crate::hex::format_hex_compact;
use crate::program::{Legality, ProgressTracker, StraightLineProgram};
use crate::template::{ApduTemplate, Bindings, RnBinder, TemplateError};

/// Data byte of the synthetic response to a blocked command.
pub const BLOCK_MARKER: u8 = 0x57;

pub fn blocked_response() -> ResponseApdu {
    ResponseApdu::new(vec![BLOCK_MARKER], StatusWord::NO_PRECISE_DIAGNOSIS)
}

/// True for the synthetic response a blocked command receives.
pub fn is_blocked_response(r: &ResponseApdu) -> bool {
    r.sw == StatusWord::NO_PRECISE_DIAGNOSIS && r.data == [BLOCK_MARKER]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    /// Forward everything, warn on deviations.
    Monitor,
    /// Forward only the certified sequence.
    Strict,
    /// Forward at most one deviation per session.
    ChainGuard,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Monitor => "monitor",
            Policy::Strict => "strict",
            Policy::ChainGuard => "chainguard",
        })
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "monitor" => Ok(Policy::Monitor),
            "strict" => Ok(Policy::Strict),
            "chainguard" | "chain-guard" => Ok(Policy::ChainGuard),
            _ => Err(format!("unknown policy {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Forward,
    Block,
    WarnAndForward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reason {
    MatchedExpected,
    ExternalCommand,
    AnomalyChainLimit,
    ProgramComplete,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FilterDecision {
    pub action: Action,
    pub reason: Reason,
}

impl FilterDecision {
    const fn new(action: Action, reason: Reason) -> Self {
        FilterDecision { action, reason }
    }

    pub fn forwarded(&self) -> bool {
        self.action != Action::Block
    }

    pub fn warned(&self) -> bool {
        self.action == Action::WarnAndForward
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WatchdogError {
    #[error("unknown card {0:?}")]
    UnknownCard(String),
    #[error("unknown program {0:?}")]
    UnknownProgram(String),
    #[error("unknown profile {0:?}")]
    UnknownProfile(String),
    #[error("program is certified for {program_profile:?}, card runs {card_profile:?}")]
    ProfileMismatch { card_profile: String, program_profile: String },
    #[error("session {0} is closed")]
    SessionClosed(u64),
    #[error("card {0:?} already exists")]
    DuplicateCard(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// One filtered command, as logged per session and per card.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord {
    /// Arrival order at the card.
    pub seq: u64,
    pub timestamp_ms: u64,
    pub session_id: u64,
    pub client_id: String,
    pub decision: FilterDecision,
    pub command: CommandApdu,
    pub response: ResponseApdu,
    /// Position after the command.
    pub position: usize,
    pub anomaly_count: usize,
}

impl AuditRecord {
    pub fn to_json(&self) -> Value {
        json!({
            "seq": self.seq,
            "timestamp": self.timestamp_ms,
            "session_id": self.session_id,
            "client_id": self.client_id,
            "decision": self.decision.action.to_string(),
            "reason": self.decision.reason.to_string(),
            "command": format_hex_compact(&self.command.to_bytes()),
            "response": format_hex_compact(&self.response.to_bytes()),
            "position": self.position,
            "anomaly_count": self.anomaly_count,
        })
    }
}

pub fn audit_json_lines(records: &[AuditRecord]) -> String {
    records.iter().map(|r| r.to_json().to_string() + "\n").collect()
}

#[derive(Debug)]
struct CardSlot {
    card: Card,
    rn: RnBinder,
    next_seq: u64,
    transcript: Vec<AuditRecord>,
}

type SharedSlot = Arc<Mutex<CardSlot>>;

fn lock(slot: &SharedSlot) -> MutexGuard<'_, CardSlot> {
    // A panic while holding the lock leaves the slot in a consistent state:
    // every update happens after the card exchange.
    slot.lock().unwrap_or_else(|p| p.into_inner())
}

/// A client's view of one card, tracked against one certified program.
#[derive(Debug)]
pub struct Session {
    pub session_id: u64,
    pub client_id: String,
    pub card_id: String,
    pub policy: Policy,
    pub misrouted: bool,
    program: Arc<StraightLineProgram>,
    bindings: Bindings,
    tracker: ProgressTracker,
    anomaly_count: usize,
    log: Vec<AuditRecord>,
    closed: bool,
    slot: SharedSlot,
}

impl Session {
    pub fn program(&self) -> &Arc<StraightLineProgram> {
        &self.program
    }

    pub fn position(&self) -> usize {
        self.tracker.position()
    }

    pub fn is_complete(&self) -> bool {
        self.tracker.is_complete(&self.program)
    }

    pub fn anomaly_count(&self) -> usize {
        self.anomaly_count
    }

    pub fn log(&self) -> &[AuditRecord] {
        &self.log
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn bindings(&self) -> &Bindings {
        &self.bindings
    }

    pub fn set_bindings(&mut self, bindings: Bindings) {
        self.bindings = bindings;
    }
}

/// Summary handed back when a session closes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionAudit {
    pub session_id: u64,
    pub client_id: String,
    pub card_id: String,
    pub program_id: String,
    pub policy: Policy,
    pub position: usize,
    pub completed: bool,
    pub anomaly_count: usize,
    pub forwarded: usize,
    pub blocked: usize,
    pub warned: usize,
}

impl SessionAudit {
    pub fn to_json(&self) -> Value {
        json!({
            "session_id": self.session_id,
            "client_id": self.client_id,
            "card_id": self.card_id,
            "program": self.program_id,
            "policy": self.policy.to_string(),
            "position": self.position,
            "completed": self.completed,
            "anomaly_count": self.anomaly_count,
            "forwarded": self.forwarded,
            "blocked": self.blocked,
            "warned": self.warned,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub decision: FilterDecision,
    pub command: CommandApdu,
    /// The card's response, or [`blocked_response`].
    pub response: ResponseApdu,
}

#[derive(Debug)]
pub struct Watchdog {
    catalog: Arc<Catalog>,
    cards: BTreeMap<String, SharedSlot>,
    next_session: AtomicU64,
}

impl Watchdog {
    pub fn new(catalog: Arc<Catalog>) -> Self {
        Watchdog { catalog, cards: BTreeMap::new(), next_session: AtomicU64::new(1) }
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    /// Adds a fresh card instance running `profile_id`.
    pub fn add_card(&mut self, card_id: &str, profile_id: &str, seed: u64) -> Result<(), WatchdogError> {
        let profile = self
            .catalog
            .profile(profile_id)
            .ok_or_else(|| WatchdogError::UnknownProfile(profile_id.to_string()))?;
        if self.cards.contains_key(card_id) {
            return Err(WatchdogError::DuplicateCard(card_id.to_string()));
        }
        let slot = CardSlot { card: Card::new(profile, seed), rn: RnBinder::default(), next_seq: 0, transcript: Vec::new() };
        self.cards.insert(card_id.to_string(), Arc::new(Mutex::new(slot)));
        Ok(())
    }

    pub fn card_ids(&self) -> impl Iterator<Item = &str> {
        self.cards.keys().map(String::as_str)
    }

    fn slot(&self, card_id: &str) -> Result<&SharedSlot, WatchdogError> {
        self.cards.get(card_id).ok_or_else(|| WatchdogError::UnknownCard(card_id.to_string()))
    }

    /// A copy of the card's current state.
    pub fn card_snapshot(&self, card_id: &str) -> Result<Card, WatchdogError> {
        Ok(lock(self.slot(card_id)?).card.clone())
    }

    /// Every command that reached this card's lock, in arrival order.
    pub fn transcript(&self, card_id: &str) -> Result<Vec<AuditRecord>, WatchdogError> {
        Ok(lock(self.slot(card_id)?).transcript.clone())
    }

    pub fn card_profile(&self, card_id: &str) -> Result<Arc<CardProfile>, WatchdogError> {
        Ok(lock(self.slot(card_id)?).card.profile().clone())
    }

    /// Opens a session at position 0. A program certified for another
    /// profile is refused unless `misroute` is set.
    pub fn open_session(
        &self,
        client_id: &str,
        card_id: &str,
        program_id: &str,
        policy: Policy,
        misroute: bool,
    ) -> Result<Session, WatchdogError> {
        let slot = self.slot(card_id)?.clone();
        let program =
            self.catalog.program(program_id).ok_or_else(|| WatchdogError::UnknownProgram(program_id.to_string()))?;
        let card_profile = lock(&slot).card.profile().id.clone();
        if program.card_profile_id != card_profile && !misroute {
            return Err(WatchdogError::ProfileMismatch {
                card_profile,
                program_profile: program.card_profile_id.clone(),
            });
        }
        let pin = self.catalog.profile(&program.card_profile_id).map(|p| p.pin.clone());
        let (program, bindings) = match pin {
            Some(pin) if program.reference_pin().is_none() => {
                (Arc::new((*program).clone().with_reference_pin(pin.clone())), Bindings::standard(pin))
            }
            Some(pin) => (program, Bindings::standard(pin)),
            None => (program, Bindings::new()),
        };
        Ok(Session {
            session_id: self.next_session.fetch_add(1, Ordering::Relaxed),
            client_id: client_id.to_string(),
            card_id: card_id.to_string(),
            policy,
            misrouted: program.card_profile_id != card_profile,
            program,
            bindings,
            tracker: ProgressTracker::new(),
            anomaly_count: 0,
            log: Vec::new(),
            closed: false,
            slot,
        })
    }

    /// Filters one concrete command and, unless blocked, sends it to the
    /// card.
    pub fn submit(&self, session: &mut Session, cmd: &CommandApdu) -> Result<Outcome, WatchdogError> {
        let cmd = cmd.clone();
        submit_with(session, move |_| Ok(cmd))
    }

    /// Like [`Watchdog::submit`] for a template. `${PIN}` and `${PAYLOAD}`
    /// come from the session bindings; `${RN}` is the card's most recent
    /// challenge, read under the card lock.
    pub fn submit_template(&self, session: &mut Session, template: &ApduTemplate) -> Result<Outcome, WatchdogError> {
        let bound = template.bind(&session.bindings)?;
        submit_with(session, move |rn| Ok(bound.resolve(rn)?))
    }

    /// Warm-resets the session's card and puts the session back at
    /// position 0 with no anomalies.
    pub fn reset(&self, session: &mut Session) -> Result<(), WatchdogError> {
        if session.closed {
            return Err(WatchdogError::SessionClosed(session.session_id));
        }
        let mut slot = lock(&session.slot);
        slot.card.warm_reset();
        slot.rn = RnBinder::default();
        session.tracker = ProgressTracker::new();
        session.anomaly_count = 0;
        Ok(())
    }

    pub fn close_session(&self, session: &mut Session) -> SessionAudit {
        session.closed = true;
        let count = |f: fn(&FilterDecision) -> bool| session.log.iter().filter(|r| f(&r.decision)).count();
        SessionAudit {
            session_id: session.session_id,
            client_id: session.client_id.clone(),
            card_id: session.card_id.clone(),
            program_id: session.program.id.clone(),
            policy: session.policy,
            position: session.position(),
            completed: session.is_complete(),
            anomaly_count: session.anomaly_count,
            forwarded: count(FilterDecision::forwarded),
            blocked: count(|d| !d.forwarded()),
            warned: count(FilterDecision::warned),
        }
    }

    /// Replays scripted arrivals: `(session index, command)` pairs in the
    /// order they reach the card.
    pub fn multiplex(
        &self,
        sessions: &mut [Session],
        arrivals: &[(usize, ApduTemplate)],
    ) -> Result<Vec<Outcome>, WatchdogError> {
        arrivals.iter().map(|(i, t)| self.submit_template(&mut sessions[*i], t)).collect()
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn submit_with(
    session: &mut Session,
    make: impl FnOnce(&[u8; CHALLENGE_LEN]) -> Result<CommandApdu, WatchdogError>,
) -> Result<Outcome, WatchdogError> {
    if session.closed {
        return Err(WatchdogError::SessionClosed(session.session_id));
    }
    let slot_ref = session.slot.clone();
    let mut slot = lock(&slot_ref);
    let cmd = make(&slot.rn.current())?;
    let legality = session.tracker.check(&session.program, &cmd);
    let decision = decide(session, &slot, legality, &cmd);
    let response = if decision.forwarded() {
        let response = slot.card.transmit(&cmd);
        slot.rn.observe(&cmd, &response);
        session.tracker.record(legality, response.is_success());
        if decision.warned() {
            session.anomaly_count += 1;
        }
        response
    } else {
        blocked_response()
    };
    let record = AuditRecord {
        seq: slot.next_seq,
        timestamp_ms: now_ms(),
        session_id: session.session_id,
        client_id: session.client_id.clone(),
        decision,
        command: cmd.clone(),
        response: response.clone(),
        position: session.tracker.position(),
        anomaly_count: session.anomaly_count,
    };
    slot.next_seq += 1;
    slot.transcript.push(record.clone());
    session.log.push(record);
    Ok(Outcome { decision, command: cmd, response })
}

fn decide(session: &Session, slot: &CardSlot, legality: Legality, cmd: &CommandApdu) -> FilterDecision {
    use Action::*;
    use Reason::*;
    if let Legality::Expected(_) = legality {
        return FilterDecision::new(Forward, MatchedExpected);
    }
    let reason = if session.is_complete() { ProgramComplete } else { ExternalCommand };
    match session.policy {
        Policy::Monitor => FilterDecision::new(WarnAndForward, reason),
        Policy::Strict => FilterDecision::new(Block, reason),
        Policy::ChainGuard if reason == ProgramComplete => FilterDecision::new(Block, reason),
        Policy::ChainGuard if session.anomaly_count > 0 => FilterDecision::new(Block, AnomalyChainLimit),
        Policy::ChainGuard if still_completes(session, slot, cmd) => FilterDecision::new(WarnAndForward, reason),
        Policy::ChainGuard => FilterDecision::new(Block, reason),
    }
}

/// Dry run on a copy of the card: after `cmd`, do the remaining certified
/// steps all still succeed?
fn still_completes(session: &Session, slot: &CardSlot, cmd: &CommandApdu) -> bool {
    let Ok(steps) = session.program.instantiate(&session.bindings) else { return false };
    let mut card = slot.card.clone();
    let mut rn = slot.rn;
    let mut tracker = session.tracker;
    let response = card.transmit(cmd);
    rn.observe(cmd, &response);
    tracker.record(Legality::External, response.is_success());
    while !tracker.is_complete(&session.program) {
        let Ok(next) = steps[tracker.position()].resolve(&rn.current()) else { return false };
        let legality = tracker.check(&session.program, &next);
        let response = card.transmit(&next);
        rn.observe(&next, &response);
        if !response.is_success() || legality == Legality::External {
            return false;
        }
        tracker.record(legality, true);
    }
    true
}
