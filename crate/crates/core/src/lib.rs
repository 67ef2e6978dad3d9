//! Detects recall-vs-reasoning specialization in transformer internals from
//! final-token activation traces.

pub mod dataset;
pub mod features;
pub mod pipelines;
pub mod stats;
pub mod synth;
pub mod trace;
