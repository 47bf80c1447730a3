//! MCI-to-AD progression prediction from clinical notes.
//!
//! The crate is organized as the pipeline runs:
//!
//! * [`synth`] generates reproducible synthetic EHR rosters with a planted signal.
//! * [`cohort`] applies inclusion/exclusion rules and labels patients for the
//!   no-restrict and fixed-window prediction settings.
//! * [`preprocess`] deidentifies, cleans and splits notes into sections.
//! * [`tokenizer`] builds a WordPiece vocabulary and encodes sections.
//! * [`encoder`] is a compact BERT-style encoder with analytic gradients,
//!   Adam and checkpointing.
//! * [`pretrain`] runs masked-LM / next-sentence pretraining.
//! * [`finetune`] trains the max-pooled patient classifier with a stratified
//!   batch sampler and per-batch class weights.
//! * [`eval`] holds splitting, metrics and the bag-of-words baseline.
//! * [`pipeline`] wires everything behind the `adbert` command line.

pub mod cohort;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod pipeline;
pub mod preprocess;
pub mod pretrain;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
