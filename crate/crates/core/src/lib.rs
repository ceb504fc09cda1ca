//! Early lung-cancer risk prediction from free-text primary-care notes.
//!
//! The crate covers the whole experimental pipeline at desk scale:
//! synthetic corpora ([`corpus`]), cohort and dataset construction
//! ([`cohort`]), tokenization ([`text`]), a small autodiff core
//! ([`numcore`]), a transformer encoder trained by full fine-tuning or
//! soft-prompt tuning ([`encoder`]), a subword embedding baseline ([`wem`]),
//! and per-note/per-patient evaluation ([`eval`]).

pub mod cohort;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numcore;
pub mod text;
pub mod wem;

pub use cohort::{CohortConfig, DatasetBundle, FewShotSet, SplitSpec};
pub use corpus::{Corpus, GeneratorConfig, Note, Patient};
pub use encoder::{EncoderConfig, NoteClassifier, Schedule};
pub use error::{Error, Result};
pub use eval::{AggregationRule, MetricReport, PredictionSet};
pub use wem::{WemConfig, WemModel};
