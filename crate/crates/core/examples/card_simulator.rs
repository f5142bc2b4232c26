//! Drive a simulated Incrypto card by hand and watch its state change.

use cps::apdu::CommandApdu;
use cps::card::Card;
use cps::catalog::Catalog;
use cps::hex::{format_hex, parse_hex};

fn send(card: &mut Card, hex: &str) -> anyhow::Result<()> {
    let cmd = CommandApdu::parse(&parse_hex(hex)?)?;
    let resp = card.transmit(&cmd);
    println!("{hex:<40} -> {} {}", resp.sw, format_hex(&resp.data));
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let catalog = Catalog::builtin();
    let mut card = Card::new(catalog.profile("incrypto").unwrap(), 42);
    send(&mut card, "00 A4 00 00 FF")?;
    send(&mut card, "00 84 00 00 08")?;
    send(&mut card, "00 84 00 00 08")?;
    send(&mut card, "FF FF 00 00")?;
    let st = card.state();
    println!("selected {:?} seo {} tries {} challenge {:?}", st.selected_file, st.seo_present, st.pin_tries_left, st.last_challenge);

    // Erasing the security environment destroys the signature function for good.
    send(&mut card, "00 22 F4 03")?;
    send(&mut card, "00 22 F3 03 00")?;
    card.warm_reset();
    println!("after warm reset: destroyed={}", card.state().destroyed);
    Ok(())
}
