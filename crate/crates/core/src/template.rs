//! Command templates: APDUs whose data field may contain placeholders.
//!
//! * `${RN}`: the 8-byte challenge, bound late from the card's most
//!   recent Get Challenge response.
//! * `${PIN}`: the reference PIN.
//! * `${PAYLOAD:n}`: `n` bytes of data to sign, bound per run.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::apdu::{CodecError, CommandApdu, ResponseApdu, MAX_DATA_LEN};
use crate::card::CHALLENGE_LEN;
use crate::hex::{parse_hex_token, HexError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("no binding for {0}")]
    MissingBinding(String),
    #[error("payload binding has {actual} bytes, placeholder wants {expected}")]
    PayloadLengthMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Hex(#[from] HexError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("bad placeholder {0:?}")]
    BadPlaceholder(String),
    #[error("malformed template: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DataPart {
    Bytes(Vec<u8>),
    Rn,
    Pin,
    Payload(usize),
}

impl fmt::Display for DataPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataPart::Bytes(b) => f.write_str(&crate::hex::format_hex(b)),
            DataPart::Rn => f.write_str("${RN}"),
            DataPart::Pin => f.write_str("${PIN}"),
            DataPart::Payload(n) => write!(f, "${{PAYLOAD:{n}}}"),
        }
    }
}

/// Values for `${PIN}` and `${PAYLOAD:n}`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings {
    pub pin: Option<Vec<u8>>,
    payloads: BTreeMap<usize, Vec<u8>>,
    counting_payload: bool,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// PIN bound, and any unbound `${PAYLOAD:n}` filled with the counting
    /// vector `00 01 .. n-1`.
    pub fn standard(pin: Vec<u8>) -> Self {
        Bindings { pin: Some(pin), payloads: BTreeMap::new(), counting_payload: true }
    }

    pub fn with_pin(mut self, pin: Vec<u8>) -> Self {
        self.pin = Some(pin);
        self
    }

    pub fn set_payload(&mut self, len: usize, bytes: Vec<u8>) -> Result<(), TemplateError> {
        if bytes.len() != len {
            return Err(TemplateError::PayloadLengthMismatch { expected: len, actual: bytes.len() });
        }
        self.payloads.insert(len, bytes);
        Ok(())
    }

    pub fn with_payload(mut self, len: usize, bytes: Vec<u8>) -> Result<Self, TemplateError> {
        self.set_payload(len, bytes)?;
        Ok(self)
    }

    pub fn payload(&self, len: usize) -> Option<Vec<u8>> {
        match self.payloads.get(&len) {
            Some(p) => Some(p.clone()),
            None if self.counting_payload => Some((0..len).map(|i| i as u8).collect()),
            None => None,
        }
    }
}

/// Tracks the challenge that `${RN}` resolves to: the data of the most
/// recent successful Get Challenge response, or zeros if there was none.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RnBinder {
    last: Option<[u8; CHALLENGE_LEN]>,
}

impl RnBinder {
    pub fn observe(&mut self, cmd: &CommandApdu, response: &ResponseApdu) {
        if cmd.ins == 0x84 && response.is_success() {
            if let Ok(rn) = <[u8; CHALLENGE_LEN]>::try_from(response.data.as_slice()) {
                self.last = Some(rn);
            }
        }
    }

    pub fn current(&self) -> [u8; CHALLENGE_LEN] {
        self.last.unwrap_or([0; CHALLENGE_LEN])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ApduTemplate {
    pub cla: u8,
    pub ins: u8,
    pub p1: u8,
    pub p2: u8,
    pub parts: Vec<DataPart>,
    pub le: Option<u8>,
}

impl From<&CommandApdu> for ApduTemplate {
    fn from(cmd: &CommandApdu) -> Self {
        let parts = if cmd.data().is_empty() { Vec::new() } else { vec![DataPart::Bytes(cmd.data().to_vec())] };
        ApduTemplate { cla: cmd.cla, ins: cmd.ins, p1: cmd.p1, p2: cmd.p2, parts, le: cmd.le }
    }
}

impl From<CommandApdu> for ApduTemplate {
    fn from(cmd: CommandApdu) -> Self {
        ApduTemplate::from(&cmd)
    }
}

enum Token {
    Byte(u8),
    Part(DataPart),
    /// An lc written as `??`.
    UnknownLc,
}

fn tokenize(text: &str) -> Result<Vec<Token>, TemplateError> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        if let Some(inner) = raw.strip_prefix("${").and_then(|r| r.strip_suffix('}')) {
            let part = match inner {
                "RN" => DataPart::Rn,
                "PIN" => DataPart::Pin,
                _ => match inner.strip_prefix("PAYLOAD:").and_then(|n| n.parse().ok()) {
                    Some(n) => DataPart::Payload(n),
                    None => return Err(TemplateError::BadPlaceholder(raw.to_string())),
                },
            };
            out.push(Token::Part(part));
        } else if raw == "??" {
            out.push(Token::UnknownLc);
        } else if raw.starts_with('$') {
            return Err(TemplateError::BadPlaceholder(raw.to_string()));
        } else {
            out.extend(parse_hex_token(raw)?.into_iter().map(Token::Byte));
        }
    }
    Ok(out)
}

fn token_len(t: &Token) -> usize {
    match t {
        Token::Byte(_) => 1,
        Token::Part(DataPart::Rn) => CHALLENGE_LEN,
        Token::Part(DataPart::Payload(n)) => *n,
        Token::Part(_) | Token::UnknownLc => 0,
    }
}

/// Whether `tokens` can form a data field of exactly `lc` bytes. A single
/// `${PIN}` absorbs whatever length is left (at least one byte).
fn data_fits(tokens: &[Token], lc: usize) -> bool {
    let pins = tokens.iter().filter(|t| matches!(t, Token::Part(DataPart::Pin))).count();
    let fixed: usize = tokens.iter().map(token_len).sum();
    match pins {
        0 => fixed == lc && lc > 0,
        1 => fixed < lc,
        _ => false,
    }
}

fn push_byte(parts: &mut Vec<DataPart>, b: u8) {
    match parts.last_mut() {
        Some(DataPart::Bytes(bytes)) => bytes.push(b),
        _ => parts.push(DataPart::Bytes(vec![b])),
    }
}

fn collect_parts(tokens: impl Iterator<Item = Token>) -> Result<Vec<DataPart>, TemplateError> {
    let mut parts = Vec::new();
    for t in tokens {
        match t {
            Token::Byte(b) => push_byte(&mut parts, b),
            Token::Part(p) => parts.push(p),
            Token::UnknownLc => return Err(TemplateError::Malformed("`??` outside the lc position".into())),
        }
    }
    Ok(parts)
}

fn header(tokens: &[Token]) -> Result<[u8; 4], TemplateError> {
    let mut h = [0u8; 4];
    for (i, slot) in h.iter_mut().enumerate() {
        match tokens.get(i) {
            Some(Token::Byte(b)) => *slot = *b,
            Some(_) => return Err(TemplateError::Malformed("placeholder in header".into())),
            None => return Err(TemplateError::Codec(CodecError::TooShort { len: i, min: 4 })),
        }
    }
    Ok(h)
}

impl ApduTemplate {
    /// Header followed by the data field, without lc or le: the form used in
    /// program documents.
    pub fn parse_fields(text: &str, le: Option<u8>) -> Result<Self, TemplateError> {
        let tokens = tokenize(text)?;
        let [cla, ins, p1, p2] = header(&tokens)?;
        let parts = collect_parts(tokens.into_iter().skip(4))?;
        let t = ApduTemplate { cla, ins, p1, p2, parts, le };
        t.check_len()?;
        Ok(t)
    }

    /// Wire form with placeholders: `80 86 00 00 08 ${RN} 00`. Without
    /// placeholders this is exactly [`CommandApdu::parse`]. With them, lc is
    /// mandatory and the length of `${PIN}` is whatever lc leaves over. An
    /// lc of `??` leaves the `${PIN}` length to the binding.
    pub fn parse_wire(text: &str) -> Result<Self, TemplateError> {
        let tokens = tokenize(text)?;
        if tokens.iter().all(|t| matches!(t, Token::Byte(_))) {
            let bytes: Vec<u8> = tokens
                .iter()
                .map(|t| match t {
                    Token::Byte(b) => *b,
                    _ => unreachable!(),
                })
                .collect();
            return Ok(ApduTemplate::from(CommandApdu::parse(&bytes)?));
        }
        let [cla, ins, p1, p2] = header(&tokens)?;
        let lc = match tokens.get(4) {
            Some(Token::Byte(b)) => Some(*b as usize),
            Some(Token::UnknownLc) => None,
            _ => return Err(TemplateError::Malformed("lc byte required before placeholders".into())),
        };
        let body: Vec<Token> = tokens.into_iter().skip(5).collect();
        let data_fits = |tokens: &[Token], lc: Option<usize>| match lc {
            Some(lc) => data_fits(tokens, lc),
            None => tokens.iter().filter(|t| matches!(t, Token::Part(DataPart::Pin))).count() == 1,
        };
        // Try the reading with a trailing le byte first, then without.
        let with_le = match body.last() {
            Some(Token::Byte(b)) => data_fits(&body[..body.len() - 1], lc).then_some(Some(*b)),
            _ => None,
        };
        let le = match with_le {
            Some(le) => le,
            None if data_fits(&body, lc) => None,
            None => {
                let Some(lc) = lc else {
                    return Err(TemplateError::Malformed("`??` lc needs exactly one ${PIN}".into()));
                };
                let available = body.iter().map(token_len).sum();
                return Err(TemplateError::Codec(CodecError::LengthMismatch { lc, available }));
            }
        };
        let data_tokens = if le.is_some() { body.len() - 1 } else { body.len() };
        let parts = collect_parts(body.into_iter().take(data_tokens))?;
        let t = ApduTemplate { cla, ins, p1, p2, parts, le };
        t.check_len()?;
        Ok(t)
    }

    fn check_len(&self) -> Result<(), TemplateError> {
        let fixed: usize = self.parts.iter().map(|p| self.part_len(p, None).unwrap_or(0)).sum();
        if fixed > MAX_DATA_LEN {
            return Err(CodecError::DataTooLong(fixed).into());
        }
        Ok(())
    }

    fn part_len(&self, part: &DataPart, pin: Option<&[u8]>) -> Option<usize> {
        match part {
            DataPart::Bytes(b) => Some(b.len()),
            DataPart::Rn => Some(CHALLENGE_LEN),
            DataPart::Payload(n) => Some(*n),
            DataPart::Pin => pin.map(<[u8]>::len),
        }
    }

    pub fn header(&self) -> [u8; 4] {
        [self.cla, self.ins, self.p1, self.p2]
    }

    pub fn has_rn(&self) -> bool {
        self.parts.contains(&DataPart::Rn)
    }

    /// Replaces `${PIN}` and `${PAYLOAD:n}`; `${RN}` is left for
    /// [`ApduTemplate::resolve`].
    pub fn bind(&self, bindings: &Bindings) -> Result<ApduTemplate, TemplateError> {
        let mut parts = Vec::new();
        for part in &self.parts {
            match part {
                DataPart::Pin => {
                    let pin = bindings.pin.clone().ok_or_else(|| TemplateError::MissingBinding("PIN".into()))?;
                    parts.push(DataPart::Bytes(pin));
                }
                DataPart::Payload(n) => {
                    let p = bindings
                        .payload(*n)
                        .ok_or_else(|| TemplateError::MissingBinding(format!("PAYLOAD:{n}")))?;
                    parts.push(DataPart::Bytes(p));
                }
                other => parts.push(other.clone()),
            }
        }
        let mut bound = ApduTemplate { parts, ..self.clone() };
        bound.merge_bytes();
        bound.check_len()?;
        Ok(bound)
    }

    fn merge_bytes(&mut self) {
        let mut merged = Vec::with_capacity(self.parts.len());
        for part in self.parts.drain(..) {
            match (merged.last_mut(), part) {
                (Some(DataPart::Bytes(acc)), DataPart::Bytes(b)) => acc.extend(b),
                (_, p) => merged.push(p),
            }
        }
        self.parts = merged;
    }

    /// Produces the concrete command, substituting `rn` for `${RN}`.
    pub fn resolve(&self, rn: &[u8; CHALLENGE_LEN]) -> Result<CommandApdu, TemplateError> {
        let mut data = Vec::new();
        for part in &self.parts {
            match part {
                DataPart::Bytes(b) => data.extend_from_slice(b),
                DataPart::Rn => data.extend_from_slice(rn),
                DataPart::Pin => return Err(TemplateError::MissingBinding("PIN".into())),
                DataPart::Payload(n) => return Err(TemplateError::MissingBinding(format!("PAYLOAD:{n}"))),
            }
        }
        Ok(CommandApdu::new(self.cla, self.ins, self.p1, self.p2).with_data(data)?.with_le(self.le))
    }

    /// True iff `cmd` is an instance of this template: header and le equal,
    /// `${RN}` any 8 bytes, `${PAYLOAD:n}` any `n` bytes, `${PIN}` equal to
    /// `pin` (or any bytes filling the remaining length when `pin` is None).
    pub fn matches(&self, cmd: &CommandApdu, pin: Option<&[u8]>) -> bool {
        if self.header() != cmd.header() || self.le != cmd.le {
            return false;
        }
        let data = cmd.data();
        let known: usize = self.parts.iter().filter_map(|p| self.part_len(p, pin)).sum();
        let open = self.parts.iter().filter(|p| self.part_len(p, pin).is_none()).count();
        let open_len = match open {
            0 if known == data.len() => 0,
            1 if known < data.len() => data.len() - known,
            _ => return false,
        };
        let mut offset = 0;
        for part in &self.parts {
            let len = self.part_len(part, pin).unwrap_or(open_len);
            let chunk = &data[offset..offset + len];
            let ok = match part {
                DataPart::Bytes(b) => chunk == b.as_slice(),
                DataPart::Pin => pin.is_none_or(|p| chunk == p),
                DataPart::Rn | DataPart::Payload(_) => true,
            };
            if !ok {
                return false;
            }
            offset += len;
        }
        true
    }
}

impl fmt::Display for ApduTemplate {
    /// Wire form; lc is printed when every part has a known length.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02X} {:02X} {:02X} {:02X}", self.cla, self.ins, self.p1, self.p2)?;
        if !self.parts.is_empty() {
            let lens: Option<usize> = self.parts.iter().map(|p| self.part_len(p, None)).sum();
            match lens {
                Some(n) => write!(f, " {n:02X}")?,
                None => write!(f, " ??")?,
            }
            for p in &self.parts {
                write!(f, " {p}")?;
            }
        }
        if let Some(le) = self.le {
            write!(f, " {le:02X}")?;
        }
        Ok(())
    }
}
