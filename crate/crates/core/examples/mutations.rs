//! Derive command variants from a template by overriding header fields.

use cps::engine::{mutate_template, MutationSpec};
use cps::template::ApduTemplate;

fn main() -> anyhow::Result<()> {
    let give_challenge = ApduTemplate::parse_wire("80 86 00 00 08 ${RN} 00")?;
    let spec = MutationSpec::parse("p1=AC p2=40..47")?;
    for variant in mutate_template(&give_challenge, &spec)? {
        println!("{variant}");
    }
    let restore = ApduTemplate::parse_wire("00 22 F3 01")?;
    for variant in mutate_template(&restore, &MutationSpec::parse("cla=81 le=none")?)? {
        println!("{variant}");
    }
    Ok(())
}
