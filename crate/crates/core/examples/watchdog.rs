//! Replay a destructive sequence through each watchdog policy.

use std::sync::Arc;

use cps::catalog::Catalog;
use cps::engine::parse_sequence;
use cps::watchdog::{Policy, Watchdog};

fn main() -> anyhow::Result<()> {
    let catalog = Arc::new(Catalog::builtin());
    let items = parse_sequence(include_str!("../scripts/fig3.seq"))?;
    for policy in [Policy::Monitor, Policy::Strict, Policy::ChainGuard] {
        let mut wd = Watchdog::new(catalog.clone());
        wd.add_card("card", "incrypto", 7)?;
        let mut session = wd.open_session("demo", "card", "incrypto_P1", policy, false)?;
        println!("{policy}:");
        for item in &items {
            let out = wd.submit_template(&mut session, &item.template)?;
            println!("  {:<12} {:?}/{:?} -> {}", item.source.to_string(), out.decision.action, out.decision.reason, out.response.sw);
        }
        let audit = wd.close_session(&mut session);
        let destroyed = wd.card_snapshot("card")?.state().destroyed;
        println!("  position {} warned {} blocked {} card destroyed {destroyed}", audit.position, audit.warned, audit.blocked);
    }
    Ok(())
}
