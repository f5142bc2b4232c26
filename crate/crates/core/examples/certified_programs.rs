//! Classify a modified command sequence against a certified program.

use cps::catalog::Catalog;
use cps::engine::{parse_sequence, render_table, Runner};

fn main() -> anyhow::Result<()> {
    let catalog = Catalog::builtin();
    let program = catalog.program("incrypto_P1").unwrap();
    for step in program.steps() {
        println!("{:>5}  {:<28} {}", step.node.to_string(), step.name, step.pattern);
    }

    let runner = Runner::new(catalog.profile("incrypto").unwrap(), program, 7);
    for (name, text) in [
        ("certified", include_str!("../scripts/table1.seq")),
        ("modified", include_str!("../scripts/table2.seq")),
    ] {
        let report = runner.run(&parse_sequence(text)?)?;
        println!("\n{name}:\n{}", render_table(&report));
    }
    Ok(())
}
