//! English to Vietnamese translation of Wikipedia category names: corpus
//! harvesting, diacritic encoding, a small encoder–decoder Transformer
//! trained from scratch, decoding and evaluation.

pub mod attention;
pub mod autograd;
pub mod corpus;
pub mod error;
pub mod harvester;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod vicodec;

pub use corpus::{CategoryPair, CorpusStats, Dataset, Side, Split, SplitSpec};
pub use error::{Error, Result};
pub use harvester::{EntityRecord, HarvestConfig, HarvestOutcome, HarvestStatus, QidBatch};
pub use inference::{DecodeConfig, Hypothesis, Strategy, Translator};
pub use metrics::{EvalPair, EvalReport};
pub use model::{Example, Memory, ModelConfig, ModelParams, Transformer};
pub use rng::SplitMix64;
pub use tensor::Matrix;
pub use tokenizer::{TokenSequence, Vocab};
pub use trainer::{Checkpoint, TrainConfig, TrainOutcome};
pub use vicodec::DiacriticTable;
