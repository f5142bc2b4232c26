//! Hex text used by scripts, the TCP protocol and reports.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HexError {
    #[error("odd number of hex digits in {0:?}")]
    OddLength(String),
    #[error("non-hex character {0:?}")]
    NonHexCharacter(char),
}

/// Uppercase, space separated pairs: `83 01 10`.
pub fn format_hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 3);
    for (i, b) in bytes.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format!("{b:02X}"));
    }
    out
}

/// Uppercase, no separators: `9000`. This is the form used on the wire.
pub fn format_hex_compact(bytes: &[u8]) -> String {
    hex::encode_upper(bytes)
}

/// Accepts whitespace separated or contiguous pairs, in either case.
pub fn parse_hex(text: &str) -> Result<Vec<u8>, HexError> {
    let mut out = Vec::new();
    for token in text.split_whitespace() {
        out.extend(parse_hex_token(token)?);
    }
    Ok(out)
}

pub(crate) fn parse_hex_token(token: &str) -> Result<Vec<u8>, HexError> {
    if let Some(c) = token.chars().find(|c| !c.is_ascii_hexdigit()) {
        return Err(HexError::NonHexCharacter(c));
    }
    if !token.len().is_multiple_of(2) {
        return Err(HexError::OddLength(token.to_string()));
    }
    // Only ascii hex digits remain, so decode cannot fail.
    Ok(hex::decode(token).expect("validated hex"))
}
