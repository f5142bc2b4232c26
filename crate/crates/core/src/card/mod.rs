//! Virtual signature card.
//!
//! A [`Card`] is one physical card instance: a [`CardProfile`] plus mutable
//! [`CardState`]. Commands are matched against the profile's rules in
//! order; the first matching rule decides the outcome. All failures are
//! in-band status words.

mod profile;

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::apdu::{CommandApdu, ResponseApdu, StatusWord};

pub use profile::{
    load_profile, BytePattern, CardProfile, CommandPattern, Effect, FileId, LengthPattern, Predicate,
    ProfileError, Requirement, Rule, SeedPolicy, MASTER_FILE,
};

pub const CHALLENGE_LEN: usize = 8;
pub const SIGNATURE_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CardState {
    pub selected_file: Option<FileId>,
    pub seo_present: bool,
    pub se_restored: bool,
    pub se_keyref_set: bool,
    pub pin_verified: bool,
    pub pin_tries_left: u8,
    pub last_challenge: Option<[u8; CHALLENGE_LEN]>,
    pub host_challenge_given: bool,
    /// Signature function permanently lost. Survives warm resets.
    pub destroyed: bool,
    rng: ChaCha8Rng,
}

impl CardState {
    /// Fresh state for `profile`.
    pub fn reset(profile: &CardProfile, seed: u64) -> Self {
        let seed = match profile.seed_policy {
            SeedPolicy::Caller => seed,
            SeedPolicy::Fixed(s) => s,
        };
        CardState {
            selected_file: None,
            seo_present: profile.seo_present_initially,
            se_restored: false,
            se_keyref_set: false,
            pin_verified: false,
            pin_tries_left: profile.pin_tries,
            last_challenge: None,
            host_challenge_given: false,
            destroyed: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Runs one command. Returns the response; `self` is updated in place.
    pub fn execute(&mut self, profile: &CardProfile, cmd: &CommandApdu) -> ResponseApdu {
        let rule = profile.rule_for(cmd);
        if !rule.require.iter().all(|r| r.holds(self)) {
            return ResponseApdu::status(rule.sw_fail);
        }
        match self.apply(profile, rule.effect, cmd) {
            Ok(data) => ResponseApdu::new(data, rule.sw_ok),
            Err(sw) => ResponseApdu::status(sw),
        }
    }

    fn apply(&mut self, profile: &CardProfile, effect: Effect, cmd: &CommandApdu) -> Result<Vec<u8>, StatusWord> {
        match effect {
            Effect::Noop => {}
            Effect::SelectMf => self.selected_file = Some(MASTER_FILE),
            Effect::SelectEf => {
                let fid: [u8; 2] = cmd.data().try_into().map_err(|_| StatusWord::WRONG_LENGTH)?;
                let fid = u16::from_be_bytes(fid);
                if !profile.files.contains(&fid) {
                    return Err(StatusWord::FILE_NOT_FOUND);
                }
                self.selected_file = Some(fid);
            }
            Effect::MseRestore => self.se_restored = true,
            Effect::MseSet => self.se_keyref_set = true,
            Effect::MseErase => {
                self.seo_present = false;
                self.se_restored = false;
                self.se_keyref_set = false;
                self.destroyed = true;
            }
            Effect::GetChallenge => {
                let mut challenge = [0u8; CHALLENGE_LEN];
                self.rng.fill_bytes(&mut challenge);
                self.last_challenge = Some(challenge);
                self.host_challenge_given = false;
                return Ok(challenge.to_vec());
            }
            Effect::GiveChallenge => {
                // The echoed value is not checked.
                self.last_challenge = None;
                self.host_challenge_given = true;
            }
            Effect::VerifyPin => {
                if self.pin_tries_left == 0 {
                    return Err(StatusWord::AUTH_METHOD_BLOCKED);
                }
                if cmd.data() == profile.pin.as_slice() {
                    self.pin_verified = true;
                    self.pin_tries_left = profile.pin_tries;
                } else {
                    self.pin_verified = false;
                    self.pin_tries_left -= 1;
                    return Err(StatusWord::VERIFICATION_FAILED);
                }
            }
            Effect::PsoSign => return Ok(dummy_signature(&profile.id, cmd.data()).to_vec()),
        }
        Ok(Vec::new())
    }
}

/// Deterministic stand-in for a signature: SHA-256 in counter mode over
/// the profile id and the input.
pub fn dummy_signature(profile_id: &str, data: &[u8]) -> [u8; SIGNATURE_LEN] {
    let mut out = [0u8; SIGNATURE_LEN];
    for (counter, chunk) in out.chunks_mut(32).enumerate() {
        let mut h = Sha256::new();
        h.update(profile_id.as_bytes());
        h.update([0u8]);
        h.update(data);
        h.update((counter as u32).to_be_bytes());
        chunk.copy_from_slice(&h.finalize());
    }
    out
}

/// One card instance. Not internally synchronized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Card {
    profile: Arc<CardProfile>,
    seed: u64,
    state: CardState,
}

impl Card {
    pub fn new(profile: Arc<CardProfile>, seed: u64) -> Self {
        let state = CardState::reset(&profile, seed);
        Card { profile, seed, state }
    }

    pub fn profile(&self) -> &Arc<CardProfile> {
        &self.profile
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> &CardState {
        &self.state
    }

    pub fn transmit(&mut self, cmd: &CommandApdu) -> ResponseApdu {
        self.state.execute(&self.profile, cmd)
    }

    /// Power cycle. Volatile state is cleared and the RNG reseeded; the
    /// security environment object, the destroyed flag and the PIN retry
    /// counter live in EEPROM and are kept.
    pub fn warm_reset(&mut self) {
        let fresh = CardState::reset(&self.profile, self.seed);
        let old = std::mem::replace(&mut self.state, fresh);
        self.state.seo_present = old.seo_present;
        self.state.destroyed = old.destroyed;
        self.state.pin_tries_left = old.pin_tries_left;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;
    use crate::hex::parse_hex;

    fn incrypto() -> Arc<CardProfile> {
        Catalog::builtin().profile("incrypto").unwrap()
    }

    fn infineon() -> Arc<CardProfile> {
        Catalog::builtin().profile("infineon").unwrap()
    }

    fn apdu(hex: &str) -> CommandApdu {
        CommandApdu::parse(&parse_hex(hex).unwrap()).unwrap()
    }

    const PIN: &str = "31 32 33 34 35 36 37 38";

    #[test]
    fn reset_examples() {
        let p = incrypto();
        let s = CardState::reset(&p, 7);
        assert!(s.seo_present);
        assert!(!s.pin_verified);
        assert_eq!(s.selected_file, None);
        assert_eq!(CardState::reset(&p, 7), s);

        let mut a = Card::new(p.clone(), 7);
        let mut b = Card::new(p, 7);
        let gc = apdu("00 84 00 00 08");
        assert_eq!(a.transmit(&gc), b.transmit(&gc));

        let mut no_seo = (*incrypto()).clone();
        no_seo.seo_present_initially = false;
        assert!(!CardState::reset(&no_seo, 7).seo_present);
    }

    #[test]
    fn select_mf_succeeds_on_fresh_card() {
        let mut card = Card::new(incrypto(), 7);
        let r = card.transmit(&apdu("00 A4 00 00 FF"));
        assert_eq!(r.sw, StatusWord::SUCCESS);
        assert_eq!(card.state().selected_file, Some(MASTER_FILE));
    }

    #[test]
    fn mse_erase_destroys_without_pin() {
        let mut card = Card::new(incrypto(), 7);
        card.transmit(&apdu("00 A4 00 00 FF"));
        card.transmit(&apdu("00 A4 00 00 02 14 00 FF"));
        assert!(!card.state().pin_verified);
        let r = card.transmit(&apdu("00 22 F4 03"));
        assert!(r.is_success());
        assert!(card.state().destroyed);
        assert!(!card.state().seo_present);
        let r = card.transmit(&apdu("00 22 F3 03 00"));
        assert_eq!(r.sw, StatusWord::CONDITIONS_NOT_SATISFIED);
    }

    #[test]
    fn destruction_survives_warm_reset() {
        let mut card = Card::new(incrypto(), 7);
        card.transmit(&apdu("00 22 F4 03"));
        card.warm_reset();
        assert!(card.state().destroyed);
        assert!(!card.state().seo_present);
        assert_eq!(card.transmit(&apdu("00 22 F3 03 00")).sw, StatusWord::CONDITIONS_NOT_SATISFIED);
    }

    #[test]
    fn undefined_class_86_is_a_silent_noop() {
        let mut card = Card::new(incrypto(), 7);
        card.transmit(&apdu("00 A4 00 00 FF"));
        let before = card.state().clone();
        let r = card.transmit(&apdu("8F 86 00 00 02 14 00 00"));
        assert_eq!(r.sw, StatusWord::SUCCESS);
        assert_eq!(card.state(), &before);
    }

    #[test]
    fn infineon_accepts_challenge_pair_anywhere() {
        let mut card = Card::new(infineon(), 3);
        let r = card.transmit(&apdu("00 84 00 00 08"));
        assert!(r.is_success());
        assert_eq!(r.data.len(), CHALLENGE_LEN);
        let mut give = parse_hex("80 86 00 00 08").unwrap();
        give.extend_from_slice(&r.data);
        give.push(0x00);
        assert!(card.transmit(&CommandApdu::parse(&give).unwrap()).is_success());
        assert!(card.state().last_challenge.is_none());
    }

    #[test]
    fn give_challenge_without_pending_challenge_succeeds() {
        let mut card = Card::new(incrypto(), 1);
        let r = card.transmit(&apdu("80 86 00 00 08 00 00 00 00 00 00 00 00 00"));
        assert!(r.is_success());
        assert!(card.state().host_challenge_given);
    }

    #[test]
    fn pso_requires_pin_and_keyref() {
        let mut card = Card::new(incrypto(), 7);
        let payload: String = (0..0x75u8).map(|b| format!("{b:02X} ")).collect();
        let pso = apdu(&format!("0C 2A 9E 9A 75 {payload} FF"));
        assert_eq!(card.transmit(&pso).sw, StatusWord::CONDITIONS_NOT_SATISFIED);
        card.transmit(&apdu("00 22 F3 03 00"));
        card.transmit(&apdu("00 22 F1 B6 03 83 01 10 00"));
        assert_eq!(card.transmit(&pso).sw, StatusWord::CONDITIONS_NOT_SATISFIED);
        assert!(card.transmit(&apdu(&format!("0C 20 00 9A 08 {PIN} 00"))).is_success());
        let r = card.transmit(&pso);
        assert!(r.is_success());
        assert_eq!(r.data, dummy_signature("incrypto", pso.data()).to_vec());
    }

    #[test]
    fn pin_retry_counter_blocks_after_three() {
        let mut card = Card::new(incrypto(), 7);
        let wrong = apdu("0C 20 00 9A 08 00 00 00 00 00 00 00 00 00");
        for _ in 0..3 {
            assert_eq!(card.transmit(&wrong).sw, StatusWord::VERIFICATION_FAILED);
        }
        assert_eq!(card.transmit(&wrong).sw, StatusWord::AUTH_METHOD_BLOCKED);
        let right = apdu(&format!("0C 20 00 9A 08 {PIN} 00"));
        assert_eq!(card.transmit(&right).sw, StatusWord::AUTH_METHOD_BLOCKED);
        card.warm_reset();
        assert_eq!(card.transmit(&right).sw, StatusWord::AUTH_METHOD_BLOCKED);
    }

    #[test]
    fn unknown_instruction() {
        let mut card = Card::new(incrypto(), 7);
        assert_eq!(card.transmit(&apdu("00 B0 00 00 10")).sw, StatusWord::INS_NOT_SUPPORTED);
    }

    #[test]
    fn select_unknown_file() {
        let mut card = Card::new(incrypto(), 7);
        assert_eq!(card.transmit(&apdu("00 A4 00 00 02 99 99 FF")).sw, StatusWord::FILE_NOT_FOUND);
    }

    #[test]
    fn signature_is_deterministic_and_input_bound() {
        let a = dummy_signature("incrypto", b"abc");
        assert_eq!(a, dummy_signature("incrypto", b"abc"));
        assert_ne!(a, dummy_signature("infineon", b"abc"));
        assert_ne!(a, dummy_signature("incrypto", b"abd"));
    }
}
