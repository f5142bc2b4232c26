//! Registry of card profiles and certified programs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::card::{load_profile, CardProfile, ProfileError};
use crate::program::{load_program, ProgramError, StraightLineProgram};

pub const BUILTIN_PROFILES: &[(&str, &str)] = &[
    ("incrypto", include_str!("../profiles/incrypto.profile")),
    ("infineon", include_str!("../profiles/infineon.profile")),
];

pub const BUILTIN_PROGRAMS: &[(&str, &str)] = &[
    ("incrypto_P1", include_str!("../programs/incrypto_P1.program")),
    ("infineon_P2", include_str!("../programs/infineon_P2.program")),
    ("incrypto_challenge", include_str!("../programs/incrypto_challenge.program")),
    ("table2_P2", include_str!("../programs/table2_P2.program")),
    ("mse_erase", include_str!("../programs/mse_erase.program")),
];

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("{path}: {source}")]
    Profile { path: String, source: ProfileError },
    #[error("{path}: {source}")]
    Program { path: String, source: ProgramError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    profiles: BTreeMap<String, Arc<CardProfile>>,
    programs: BTreeMap<String, Arc<StraightLineProgram>>,
}

impl Catalog {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The built-in Incrypto and Infineon profiles and their programs.
    pub fn builtin() -> Self {
        let mut c = Catalog::empty();
        for (name, text) in BUILTIN_PROFILES {
            let p = load_profile(text).unwrap_or_else(|e| panic!("builtin profile {name}: {e}"));
            c.add_profile(p);
        }
        for (name, text) in BUILTIN_PROGRAMS {
            let p = load_program(text).unwrap_or_else(|e| panic!("builtin program {name}: {e}"));
            c.add_program(p);
        }
        c
    }

    pub fn add_profile(&mut self, profile: CardProfile) -> Arc<CardProfile> {
        let p = Arc::new(profile);
        self.profiles.insert(p.id.clone(), p.clone());
        p
    }

    pub fn add_program(&mut self, program: StraightLineProgram) -> Arc<StraightLineProgram> {
        let p = Arc::new(program);
        self.programs.insert(p.id.clone(), p.clone());
        p
    }

    pub fn profile(&self, id: &str) -> Option<Arc<CardProfile>> {
        self.profiles.get(id).cloned()
    }

    pub fn program(&self, id: &str) -> Option<Arc<StraightLineProgram>> {
        self.programs.get(id).cloned()
    }

    pub fn profiles(&self) -> impl Iterator<Item = &Arc<CardProfile>> {
        self.profiles.values()
    }

    pub fn programs(&self) -> impl Iterator<Item = &Arc<StraightLineProgram>> {
        self.programs.values()
    }

    /// The first program (by id) certified for `profile_id`, preferring
    /// programs whose id starts with the profile id.
    pub fn default_program_for(&self, profile_id: &str) -> Option<Arc<StraightLineProgram>> {
        let mut candidates: Vec<_> = self.programs.values().filter(|p| p.card_profile_id == profile_id).collect();
        candidates.sort_by_key(|p| (!p.id.starts_with(profile_id), p.len() < 3, p.id.clone()));
        candidates.first().map(|p| (*p).clone())
    }

    /// Loads every `*.profile` file in `dir`, replacing same-id entries.
    pub fn load_profiles_dir(&mut self, dir: &Path) -> Result<usize, CatalogError> {
        let mut n = 0;
        for (path, text) in read_dir_with_ext(dir, "profile")? {
            let p = load_profile(&text).map_err(|source| CatalogError::Profile { path, source })?;
            self.add_profile(p);
            n += 1;
        }
        Ok(n)
    }

    /// Loads every `*.program` file in `dir`, replacing same-id entries.
    pub fn load_programs_dir(&mut self, dir: &Path) -> Result<usize, CatalogError> {
        let mut n = 0;
        for (path, text) in read_dir_with_ext(dir, "program")? {
            let p = load_program(&text).map_err(|source| CatalogError::Program { path, source })?;
            self.add_program(p);
            n += 1;
        }
        Ok(n)
    }
}

fn read_dir_with_ext(dir: &Path, ext: &str) -> Result<Vec<(String, String)>, CatalogError> {
    let io = |path: &Path, source| CatalogError::Io { path: path.display().to_string(), source };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(|e| io(&p, e))?;
            Ok((p.display().to_string(), text))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_load() {
        let c = Catalog::builtin();
        assert_eq!(c.program("incrypto_P1").unwrap().len(), 10);
        assert_eq!(c.program("infineon_P2").unwrap().len(), 5);
        assert_eq!(c.program("table2_P2").unwrap().len(), 10);
        assert_eq!(c.default_program_for("incrypto").unwrap().id, "incrypto_P1");
        assert_eq!(c.default_program_for("infineon").unwrap().id, "infineon_P2");
        // The tolerance rules deliberately overlap the Give Challenge rules.
        assert!(!c.profile("incrypto").unwrap().warnings().is_empty());
    }

    #[test]
    fn loads_shipped_directories() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR"));
        let mut c = Catalog::empty();
        assert_eq!(c.load_profiles_dir(&root.join("profiles")).unwrap(), 2);
        assert_eq!(c.load_programs_dir(&root.join("programs")).unwrap(), 5);
        assert!(c.load_profiles_dir(&root.join("no-such-dir")).is_err());
    }
}
