//! Run directive scripts the same way `cps run` and `cps repl` do.

use std::path::Path;
use std::sync::Arc;

use cps::catalog::Catalog;
use cps::console::Console;

fn main() -> anyhow::Result<()> {
    let catalog = Arc::new(Catalog::builtin());
    let profile = catalog.profile("incrypto").unwrap();
    let program = catalog.program("incrypto_P1");
    let mut console = Console::new(catalog, profile, program, 7);
    let base = Path::new(env!("CARGO_MANIFEST_DIR")).join("scripts");
    for line in ["apdu 00 A4 00 00 FF", "expect 9000", "apdu 00 84 00 00 08", "reset", "run fig3.cps"] {
        println!("> {line}");
        for out in console.execute_line(line, &base)? {
            println!("{out}");
        }
    }
    println!("> expect 9000");
    if let Err(e) = console.execute_line("expect 9000", &base) {
        println!("error: {e}");
    }
    Ok(())
}
