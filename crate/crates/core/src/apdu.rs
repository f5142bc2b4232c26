//! ISO 7816-4 short APDU encoding and decoding.
//!
//! Only short coding is supported: a single `lc` byte, at most 255 data
//! bytes and a single `le` byte. Extended lengths are rejected.

use std::fmt;

use thiserror::Error;

use crate::hex::format_hex;

pub const MAX_DATA_LEN: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("apdu too short: {len} bytes, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("{0} trailing bytes after a complete apdu")]
    TrailingGarbage(usize),
    #[error("lc {lc} disagrees with {available} available data bytes")]
    LengthMismatch { lc: usize, available: usize },
    #[error("data field of {0} bytes exceeds short apdu limit")]
    DataTooLong(usize),
}

/// Two status bytes ending every response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatusWord(pub u16);

impl StatusWord {
    pub const SUCCESS: StatusWord = StatusWord(0x9000);
    pub const WRONG_LENGTH: StatusWord = StatusWord(0x6700);
    pub const VERIFICATION_FAILED: StatusWord = StatusWord(0x6300);
    pub const AUTH_METHOD_BLOCKED: StatusWord = StatusWord(0x6983);
    pub const CONDITIONS_NOT_SATISFIED: StatusWord = StatusWord(0x6985);
    pub const FILE_NOT_FOUND: StatusWord = StatusWord(0x6A82);
    pub const INS_NOT_SUPPORTED: StatusWord = StatusWord(0x6D00);
    /// Used by the watchdog for commands it refused to forward.
    pub const NO_PRECISE_DIAGNOSIS: StatusWord = StatusWord(0x6F00);

    pub fn from_bytes(sw1: u8, sw2: u8) -> Self {
        StatusWord(u16::from_be_bytes([sw1, sw2]))
    }

    pub fn sw1(self) -> u8 {
        (self.0 >> 8) as u8
    }

    pub fn sw2(self) -> u8 {
        self.0 as u8
    }

    pub fn is_success(self) -> bool {
        self == Self::SUCCESS
    }
}

impl fmt::Display for StatusWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04X}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("status word must be 4 hex digits, got {0:?}")]
pub struct StatusWordParseError(pub String);

impl std::str::FromStr for StatusWord {
    type Err = StatusWordParseError;

    /// `9000` or `90 00`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let compact: String = s.split_whitespace().collect();
        if compact.len() != 4 || !compact.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(StatusWordParseError(s.to_string()));
        }
        u16::from_str_radix(&compact, 16).map(StatusWord).map_err(|_| StatusWordParseError(s.to_string()))
    }
}

/// A command APDU. An empty data field means the body (lc + data) is
/// absent, so `lc = 0` is not representable on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CommandApdu {
    pub cla: u8,
    pub ins: u8,
    pub p1: u8,
    pub p2: u8,
    data: Vec<u8>,
    pub le: Option<u8>,
}

impl CommandApdu {
    /// Header only (case 1).
    pub fn new(cla: u8, ins: u8, p1: u8, p2: u8) -> Self {
        CommandApdu { cla, ins, p1, p2, data: Vec::new(), le: None }
    }

    pub fn with_data(mut self, data: impl Into<Vec<u8>>) -> Result<Self, CodecError> {
        let data = data.into();
        if data.len() > MAX_DATA_LEN {
            return Err(CodecError::DataTooLong(data.len()));
        }
        self.data = data;
        Ok(self)
    }

    pub fn with_le(mut self, le: impl Into<Option<u8>>) -> Self {
        self.le = le.into();
        self
    }

    pub fn header(&self) -> [u8; 4] {
        [self.cla, self.ins, self.p1, self.p2]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// `None` when the body is absent.
    pub fn lc(&self) -> Option<u8> {
        if self.data.is_empty() {
            None
        } else {
            Some(self.data.len() as u8)
        }
    }

    /// ISO 7816-4 short case number (1 to 4).
    pub fn case(&self) -> u8 {
        match (self.data.is_empty(), self.le.is_some()) {
            (true, false) => 1,
            (true, true) => 2,
            (false, false) => 3,
            (false, true) => 4,
        }
    }

    pub fn parse(raw: &[u8]) -> Result<Self, CodecError> {
        parse_command(raw)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serialize_command(self)
    }
}

impl fmt::Display for CommandApdu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_hex(&self.to_bytes()))
    }
}

/// Decodes a short command APDU.
///
/// A single trailing byte is `le` (case 2). Otherwise the first trailing
/// byte is `lc`: exactly `lc` further bytes is case 3, `lc` bytes plus one
/// is case 4. A zero first trailing byte followed by more bytes is the
/// extended-length marker and is rejected.
pub fn parse_command(raw: &[u8]) -> Result<CommandApdu, CodecError> {
    if raw.len() < 4 {
        return Err(CodecError::TooShort { len: raw.len(), min: 4 });
    }
    let mut cmd = CommandApdu::new(raw[0], raw[1], raw[2], raw[3]);
    let trailer = &raw[4..];
    match trailer.len() {
        0 => {}
        1 => cmd.le = Some(trailer[0]),
        n => {
            let lc = trailer[0] as usize;
            let available = n - 1;
            if lc == 0 || available < lc {
                return Err(CodecError::LengthMismatch { lc, available });
            }
            cmd.data = trailer[1..=lc].to_vec();
            match available - lc {
                0 => {}
                1 => cmd.le = Some(trailer[n - 1]),
                extra => return Err(CodecError::TrailingGarbage(extra - 1)),
            }
        }
    }
    Ok(cmd)
}

pub fn serialize_command(cmd: &CommandApdu) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + cmd.data.len());
    out.extend_from_slice(&cmd.header());
    if let Some(lc) = cmd.lc() {
        out.push(lc);
        out.extend_from_slice(&cmd.data);
    }
    if let Some(le) = cmd.le {
        out.push(le);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResponseApdu {
    pub data: Vec<u8>,
    pub sw: StatusWord,
}

impl ResponseApdu {
    pub fn new(data: impl Into<Vec<u8>>, sw: StatusWord) -> Self {
        ResponseApdu { data: data.into(), sw }
    }

    pub fn status(sw: StatusWord) -> Self {
        ResponseApdu { data: Vec::new(), sw }
    }

    pub fn sw1(&self) -> u8 {
        self.sw.sw1()
    }

    pub fn sw2(&self) -> u8 {
        self.sw.sw2()
    }

    pub fn is_success(&self) -> bool {
        self.sw.is_success()
    }

    pub fn parse(raw: &[u8]) -> Result<Self, CodecError> {
        parse_response(raw)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.data.clone();
        out.push(self.sw1());
        out.push(self.sw2());
        out
    }
}

impl fmt::Display for ResponseApdu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_hex(&self.to_bytes()))
    }
}

pub fn parse_response(raw: &[u8]) -> Result<ResponseApdu, CodecError> {
    if raw.len() < 2 {
        return Err(CodecError::TooShort { len: raw.len(), min: 2 });
    }
    let (data, sw) = raw.split_at(raw.len() - 2);
    Ok(ResponseApdu { data: data.to_vec(), sw: StatusWord::from_bytes(sw[0], sw[1]) })
}
