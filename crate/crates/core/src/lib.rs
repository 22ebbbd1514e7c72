//! Dual-task pipeline for AI-generated text detection (Task A) and
//! generator attribution (Task B), with chain-of-thought reasoning
//! injected into the classifier input.
//!
//! The pipeline stages are independent modules that communicate through
//! plain data types and files:
//!
//! * [`corpus`] — dataset parsing, validation, label vocabulary, splits
//! * [`reasoning`] — prompt construction, reasoning generation, caching
//! * [`encoding`] — (document + reasoning) composition and text encoders
//! * [`classifier`] — dual heads, losses, and the cascade decision rule
//! * [`training`] — mini-batch fine-tuning with validation checkpointing
//! * [`evaluation`] — F1 scoring, confusion matrices, method tables
//! * [`synth`] — synthetic corpus generation for tests and demos

pub mod classifier;
pub mod corpus;
pub mod encoding;
pub mod evaluation;
pub mod reasoning;
pub mod synth;
pub mod training;
