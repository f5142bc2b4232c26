//! Crypto probing system: an APDU codec, a rule-driven smart-card
//! simulator, certified straight-line programs, an interleaving engine that
//! classifies every command of a merged run, and a watchdog that filters
//! commands per session before they reach a shared card.

pub mod apdu;
pub mod card;
pub mod catalog;
pub mod doc;
pub mod engine;
pub mod hex;
pub mod program;
pub mod template;
pub mod watchdog;
pub mod console;
pub mod daemon;
pub mod reproduce;
