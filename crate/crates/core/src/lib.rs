//! Approximate unlearning for small causal language models.
//!
//! The pipeline replaces idiosyncratic terms of an unlearn target with
//! generic translations, asks a baseline model what it would predict on the
//! translated text, suppresses whatever a model reinforced on the target
//! upweights, and fine-tunes the baseline toward those generic labels.

pub mod anchors;
pub mod corpus;
pub mod eval;
pub mod labels;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod tokenizer;
pub mod translate;
