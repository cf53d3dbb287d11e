//! Counterfactual gender-bias auditing and mitigation for text classifiers.
//!
//! The pipeline runs lexicon-driven gender swapping ([`transform`]), a
//! max-pooled embedding classifier ([`model`]), mitigation training
//! strategies ([`training`]) and paired-prediction bias metrics ([`metrics`]).

pub mod cli;
pub mod error;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
pub use lexicon::{Gender, GenderedLexicon, NameGazetteer};
pub use metrics::{BiasReport, MismatchCount};
pub use model::{ClassifierParams, Model, Vocabulary};
pub use training::{MitigationConfig, Strategy};
pub use transform::{LabeledSample, PairedSample, TokenSequence};
