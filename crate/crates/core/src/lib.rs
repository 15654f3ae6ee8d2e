//! Two-stage complex query answering over knowledge graphs.
//!
//! Stage one pretrains a neural link predictor ([`kge`]) on one-hop triples.
//! Stage two trains a distance-biased graph transformer ([`encoder`]) that
//! turns any EFO-1 query into a single `(head, relation)` pair scored by the
//! frozen link predictor. The symbolic engine ([`symbolic`]) supplies exact
//! answers for dataset generation and evaluation.

pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod kg;
pub mod kge;
pub mod query;
pub mod symbolic;
pub mod synth;
pub mod train;

pub use dataset::{QueryRecord, SampledDataset};
pub use error::{Error, Result};
pub use kg::{GraphIndex, KnowledgeGraph, SplitFamily, SplitLabel, Triple};
pub use query::{build_from_template, parse_nested, to_dnf, ConjunctiveGraph, DnfQuery, QueryExpr, QueryType};
pub use symbolic::{answer_dnf, brute_force_answers, AnswerSet};
pub use encoder::{EncoderConfig, EncoderParams};
pub use encoding::{EncodingConfig, EncodingMode, SequenceInput};
pub use eval::EvalReport;
pub use kge::{KgeModel, PretrainConfig, Scorer};
pub use train::{EvalTarget, TrainRunConfig};
