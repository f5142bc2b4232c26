//! Sequence execution, classification and interleaving generation.

mod combinatorics;
mod mutate;
mod render;
mod run;

pub use combinatorics::{
    block_insertions, brute_force_cost, count_interleavings, enumerate_interleavings, interleaving_sampler, merge,
    sample_interleavings, InterleavingSampler, Interleavings,
};
pub use mutate::{mutate_apdu, mutate_template, FieldOverride, LeOverride, MutationError, MutationSpec};
pub use render::render_table;
pub use run::{
    format_sequence, parse_sequence, program_items, run_sequence, Classification, RunReport, Runner, SequenceError,
    SequenceItem, Source, StepRecord, Verdict,
};
