//! Sequential recommendation with imaginary history items.
//!
//! A masked-item transformer ("enricher") fills gaps in user histories,
//! and a causal self-attentive recommender is evaluated on the edited
//! histories. Models are generic over the scalar type; the `*32` aliases
//! are what the command-line tools use, the `*64` ones serve numeric
//! checks.

pub mod checkpoint;
pub mod corpus;
pub mod enricher;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod recommender;
pub mod scalar;
pub mod scenario;
pub mod seed;

pub use corpus::{Corpus, CorpusOptions, EvalCase, Interaction, ItemIndex, SplitCorpus, UserHistory, Vocab, MASK, PAD};
pub use enricher::{train_enricher, Enricher, EnricherConfig, MaskPredictor, MaskedExample};
pub use error::{Error, Result};
pub use evaluation::{MetricSummary, NextItemScorer};
pub use recommender::{train_recommender, RecConfig, Recommender, TrainingStep};
pub use scalar::Scalar;
pub use scenario::{EnrichedHistory, ScenarioSpec, Strategy};

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Enricher32 = Enricher<f32>;
pub type Enricher64 = Enricher<f64>;
pub type Recommender32 = Recommender<f32>;
pub type Recommender64 = Recommender<f64>;
