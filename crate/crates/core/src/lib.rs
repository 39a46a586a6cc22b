//! Explainable detection of coordinated troll accounts.
//!
//! The pipeline encodes user timelines with a small Transformer, fuses four
//! LoRA adapters (appraisal, propaganda identification, propaganda strategy,
//! task) through a softmax gate, selects token-level rationales under
//! sparsity and continuity constraints, and assembles a template explanation
//! for every decision. Everything runs on the reverse-mode engine in
//! [`numeric`].

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod datagen;
pub mod encoder;
pub mod explain;
pub mod layers;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod rationale;
pub mod training;
