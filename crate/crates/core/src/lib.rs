//! Aspect-centric latent tree induction.
//!
//! Sentences are encoded into node states, a Matrix-Tree computation turns
//! pairwise edge scores and root scores into exact arborescence marginals,
//! and a root-refinement loss pulls the root distribution onto the aspect
//! span. The marginals drive a structured-attention (or GCN) tree encoder
//! feeding a three-way sentiment classifier.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod inducer;
pub mod model;
pub mod snapshot;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod tree_encoder;
pub mod trees;
pub mod verify;

pub use autodiff::{grad_check, Gradients, Init, NodeId, ParamStore, Tape};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use config::Config;
pub use data::{EmbeddingTable, Instance, Lexicon, Polarity};
pub use encoder::Vocab;
pub use inducer::{marginals, ScoreSet, TreeMarginals};
pub use model::{Model, Prediction};
pub use train::{evaluate, train, EpochLog, EvalReport, TrainOutcome};
pub use trees::{cle_extract, hop_distance, Arborescence, DistanceReport, TreeSource};
