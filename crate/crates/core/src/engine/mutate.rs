use std::ops::RangeInclusive;

use itertools::iproduct;
use thiserror::Error;

use crate::apdu::{CommandApdu, MAX_DATA_LEN};
use crate::card::CHALLENGE_LEN;
use crate::hex::parse_hex;
use crate::template::{ApduTemplate, DataPart};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MutationError {
    #[error("invalid override: {0}")]
    InvalidOverride(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldOverride {
    Byte(u8),
    Range(RangeInclusive<u8>),
}

impl FieldOverride {
    fn choices(&self) -> Vec<u8> {
        match self {
            FieldOverride::Byte(b) => vec![*b],
            FieldOverride::Range(r) => r.clone().collect(),
        }
    }

    fn parse(text: &str) -> Result<Self, MutationError> {
        let byte = |t: &str| {
            u8::from_str_radix(t, 16).map_err(|_| MutationError::InvalidOverride(format!("bad byte {t:?}")))
        };
        match text.split_once("..") {
            Some((lo, hi)) => Ok(FieldOverride::Range(byte(lo)?..=byte(hi)?)),
            None => Ok(FieldOverride::Byte(byte(text)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LeOverride {
    Absent,
    Value(FieldOverride),
}

/// Which fields of a command to replace. Unset fields are kept.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MutationSpec {
    pub cla: Option<FieldOverride>,
    pub ins: Option<FieldOverride>,
    pub p1: Option<FieldOverride>,
    pub p2: Option<FieldOverride>,
    /// Must agree with the (possibly overridden) data length.
    pub lc: Option<u8>,
    pub data: Option<Vec<u8>>,
    pub le: Option<LeOverride>,
}

impl MutationSpec {
    /// `cla=81 ins=86 p1=00..FF le=none data=14,00 lc=02`
    pub fn parse(text: &str) -> Result<Self, MutationError> {
        let mut spec = MutationSpec::default();
        for token in text.split_whitespace() {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| MutationError::InvalidOverride(format!("expected field=value, got {token:?}")))?;
            match key {
                "cla" => spec.cla = Some(FieldOverride::parse(value)?),
                "ins" => spec.ins = Some(FieldOverride::parse(value)?),
                "p1" => spec.p1 = Some(FieldOverride::parse(value)?),
                "p2" => spec.p2 = Some(FieldOverride::parse(value)?),
                "lc" => match FieldOverride::parse(value)? {
                    FieldOverride::Byte(b) => spec.lc = Some(b),
                    FieldOverride::Range(_) => {
                        return Err(MutationError::InvalidOverride("lc cannot be a range".into()))
                    }
                },
                "data" => {
                    let bytes = parse_hex(&value.replace(',', " "))
                        .map_err(|e| MutationError::InvalidOverride(e.to_string()))?;
                    spec.data = Some(bytes);
                }
                "le" if value == "none" => spec.le = Some(LeOverride::Absent),
                "le" => spec.le = Some(LeOverride::Value(FieldOverride::parse(value)?)),
                _ => return Err(MutationError::InvalidOverride(format!("unknown field {key:?}"))),
            }
        }
        Ok(spec)
    }

    /// Number of variants this spec produces.
    pub fn variant_count(&self) -> usize {
        let n = |o: &Option<FieldOverride>| o.as_ref().map_or(1, |f| f.choices().len());
        let le = match &self.le {
            Some(LeOverride::Value(f)) => f.choices().len(),
            _ => 1,
        };
        n(&self.cla) * n(&self.ins) * n(&self.p1) * n(&self.p2) * le
    }
}

fn known_len(parts: &[DataPart]) -> Option<usize> {
    parts
        .iter()
        .map(|p| match p {
            DataPart::Bytes(b) => Some(b.len()),
            DataPart::Rn => Some(CHALLENGE_LEN),
            DataPart::Payload(n) => Some(*n),
            DataPart::Pin => None,
        })
        .sum()
}

/// Applies `spec` to a template. Range overrides yield one variant per
/// combination, generated lazily.
pub fn mutate_template(
    template: &ApduTemplate,
    spec: &MutationSpec,
) -> Result<impl Iterator<Item = ApduTemplate>, MutationError> {
    let parts = match &spec.data {
        Some(d) if d.len() > MAX_DATA_LEN => {
            return Err(MutationError::InvalidOverride(format!("data of {} bytes", d.len())))
        }
        Some(d) if d.is_empty() => Vec::new(),
        Some(d) => vec![DataPart::Bytes(d.clone())],
        None => template.parts.clone(),
    };
    if let Some(lc) = spec.lc {
        match known_len(&parts) {
            Some(len) if len == lc as usize => {}
            Some(len) => {
                return Err(MutationError::InvalidOverride(format!("lc {lc:02X} but data has {len} bytes")))
            }
            None => return Err(MutationError::InvalidOverride("lc with a data field of unknown length".into())),
        }
    }
    let pick = |o: &Option<FieldOverride>, keep: u8| o.as_ref().map_or(vec![keep], FieldOverride::choices);
    let les: Vec<Option<u8>> = match &spec.le {
        None => vec![template.le],
        Some(LeOverride::Absent) => vec![None],
        Some(LeOverride::Value(f)) => f.choices().into_iter().map(Some).collect(),
    };
    let base = ApduTemplate { parts, ..template.clone() };
    Ok(iproduct!(
        pick(&spec.cla, template.cla),
        pick(&spec.ins, template.ins),
        pick(&spec.p1, template.p1),
        pick(&spec.p2, template.p2),
        les
    )
    .map(move |(cla, ins, p1, p2, le)| ApduTemplate { cla, ins, p1, p2, le, ..base.clone() }))
}

/// Applies `spec` to a concrete command.
pub fn mutate_apdu(
    cmd: &CommandApdu,
    spec: &MutationSpec,
) -> Result<impl Iterator<Item = CommandApdu>, MutationError> {
    let variants = mutate_template(&ApduTemplate::from(cmd), spec)?;
    Ok(variants.map(|t| t.resolve(&[0; CHALLENGE_LEN]).expect("concrete template")))
}
