//! Count, enumerate and sample order-preserving interleavings, then run a
//! small exhaustive sweep.

use cps::catalog::Catalog;
use cps::engine::{block_insertions, brute_force_cost, count_interleavings, enumerate_interleavings, sample_interleavings};
use cps::reproduce::{sweep, SweepMode};

fn main() -> anyhow::Result<()> {
    println!("C(20,10) = {}", count_interleavings(10, 10));
    println!("brute force with 16-bit inputs = {}", brute_force_cost(10, 10, 16));

    let a = ['a', 'b', 'c'];
    let b = ['X', 'Y'];
    for s in enumerate_interleavings(&a, &b) {
        println!("{}", s.iter().collect::<String>());
    }
    println!("adjacent only: {}", block_insertions(&a, &b).len());
    println!("sampled: {:?}", sample_interleavings(&a, &b, 3, 1));

    let (summary, _) = sweep(&Catalog::builtin(), "infineon_P2", "incrypto_challenge", SweepMode::Exhaustive, 7, 2)?;
    print!("\n{summary}");
    Ok(())
}
