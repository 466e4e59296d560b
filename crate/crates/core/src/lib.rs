//! Two-part counterpoint as sequence-to-sequence translation.

pub mod cli;
pub mod corpus;
pub mod dataset;
pub mod decoding;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod midi;
pub mod tokenizer;
pub mod time;
