pub mod cli;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod fnet;
pub mod metrics;
pub mod numerics;
pub mod rerank;
pub mod sentic;
pub mod synth;
pub mod textio;

pub use error::{Error, Result};

/// Double-precision aliases for the scalar-generic types.
pub type Matrix = numerics::DenseMatrix<f64>;
pub type Embeddings = embed::EmbeddingSet<f64>;
pub type LabelEmbedding = fnet::LabelEmbeddingMatrix<f64>;
pub type TypingModel = fnet::JointEmbeddingModel<f64>;
pub type Drbm = rerank::DrbmParams<f64>;
pub type Slp = rerank::SlpModel<f64>;
pub type Sentic = sentic::SenticParams<f64>;
