//! Encode and decode short APDUs in all four ISO 7816-4 cases.

use cps::apdu::{CommandApdu, ResponseApdu, StatusWord};
use cps::hex::{format_hex, parse_hex};

fn main() -> anyhow::Result<()> {
    let commands = [
        CommandApdu::new(0x00, 0x84, 0x00, 0x00).with_le(0x08),
        CommandApdu::new(0x00, 0xA4, 0x00, 0x00).with_le(0xFF),
        CommandApdu::new(0x00, 0x22, 0xF3, 0x01),
        CommandApdu::new(0x80, 0x86, 0x00, 0x00).with_data(vec![0x11; 8])?.with_le(0x00),
    ];
    for cmd in &commands {
        let bytes = cmd.to_bytes();
        assert_eq!(&CommandApdu::parse(&bytes)?, cmd);
        println!("case {}  {}", cmd.case(), format_hex(&bytes));
    }

    // Lc must agree with the bytes that follow it.
    let raw = parse_hex("00 B0 00 00 00 10")?;
    match CommandApdu::parse(&raw) {
        Ok(cmd) => println!("parsed {}", format_hex(&cmd.to_bytes())),
        Err(e) => println!("rejected {}: {e}", format_hex(&raw)),
    }

    let resp = ResponseApdu::parse(&parse_hex("DE AD 90 00")?)?;
    println!("response data {} sw {} success {}", format_hex(&resp.data), resp.sw, resp.is_success());
    let sw: StatusWord = "6985".parse()?;
    println!("{sw} success {}", sw.is_success());
    Ok(())
}
