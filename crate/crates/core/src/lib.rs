//! Rationale-centric data augmentation with a human in the loop.
//!
//! The pipeline marks rationales on a small gold set, generates label-preserving
//! (semi-factual) variants by rewriting everything except the rationales,
//! surfaces what a trained model relies on, and turns human or oracle review
//! of those spans into a second round of corrective examples.

pub mod active;
pub mod augment;
pub mod corpus;
pub mod correction;
pub mod error;
pub mod eval;
pub mod model;
pub mod report;
pub mod rng;
pub mod saliency;
pub mod service;
pub mod session;
pub mod synonyms;
pub mod synth;

pub use corpus::{Dataset, Document, Label, Provenance, RationaleSpan, SplitTag, Token};
pub use error::{Error, Result};
pub use model::{ClassifierModel, LinearTextModel, ModelConfig, TrainReport};
pub use synonyms::{SynonymLexicon, SynonymProvider};
