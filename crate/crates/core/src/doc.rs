//! The line-oriented document format shared by profiles, programs and the
//! daemon config:
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Sections may repeat; their order and the order of keys is preserved.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub message: String,
}

impl SyntaxError {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        SyntaxError { line, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn value(&self, key: &str) -> Option<&str> {
        self.get(key).map(|e| e.value.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&Entry, SyntaxError> {
        self.get(key)
            .ok_or_else(|| SyntaxError::new(self.line, format!("[{}] is missing key `{key}`", self.name)))
    }

    /// Fails on keys outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<(), SyntaxError> {
        match self.entries.iter().find(|e| !known.contains(&e.key.as_str())) {
            Some(e) => Err(SyntaxError::new(e.line, format!("unknown key `{}` in [{}]", e.key, self.name))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self, SyntaxError> {
        let mut sections: Vec<Section> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| SyntaxError::new(line, "unterminated section header"))?
                    .trim();
                if name.is_empty() {
                    return Err(SyntaxError::new(line, "empty section name"));
                }
                sections.push(Section { name: name.to_string(), line, entries: Vec::new() });
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| SyntaxError::new(line, format!("expected `key = value`, found {content:?}")))?;
            let section = sections
                .last_mut()
                .ok_or_else(|| SyntaxError::new(line, "key outside of any section"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(SyntaxError::new(line, "empty key"));
            }
            section.entries.push(Entry { key: key.to_string(), value: value.trim().to_string(), line });
        }
        Ok(Document { sections })
    }

    pub fn sections<'a, 'n>(&'a self, name: &'n str) -> impl Iterator<Item = &'a Section> + 'n
    where
        'a: 'n,
    {
        self.sections.iter().filter(move |s| s.name == name)
    }

    /// The single section called `name`.
    pub fn single(&self, name: &str) -> Result<&Section, SyntaxError> {
        let mut found = self.sections.iter().filter(|s| s.name == name);
        let first = found
            .next()
            .ok_or_else(|| SyntaxError::new(1, format!("missing [{name}] section")))?;
        if let Some(dup) = found.next() {
            return Err(SyntaxError::new(dup.line, format!("duplicate [{name}] section")));
        }
        Ok(first)
    }

    pub fn check_sections(&self, known: &[&str]) -> Result<(), SyntaxError> {
        match self.sections.iter().find(|s| !known.contains(&s.name.as_str())) {
            Some(s) => Err(SyntaxError::new(s.line, format!("unknown section [{}]", s.name))),
            None => Ok(()),
        }
    }
}
