//! Re-run the three scripted experiments and print their checks.

use cps::reproduce::{check_lines, run_figure, Figure, DEFAULT_SEED};

fn main() -> anyhow::Result<()> {
    for fig in [Figure::Fig1, Figure::Fig2, Figure::Fig3] {
        let outcome = run_figure(fig, DEFAULT_SEED)?;
        for line in check_lines(&outcome) {
            println!("{line}");
        }
    }
    Ok(())
}
