//! Knowledge-graph link prediction with a single-block, many-headed
//! self-attention encoder over `(source, relation)` pairs.
//!
//! The crate carries its own reverse-mode autodiff tape ([`autodiff`]), the
//! encoder block ([`encoder`]), TwoMult and Tucker decoders ([`decoder`]),
//! 1-N training with Adam ([`training`]), filtered ranking evaluation
//! ([`evaluation`]) and the dataset tooling around them ([`data`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{Mode, Tape, Var};
pub use config::ModelConfig;
pub use data::{Dataset, FilterIndex, Triple, TripleStore, Vocabulary};
pub use decoder::{DecodeFrom, DecoderKind};
pub use encoder::{count_embedding_params, count_nonembedding_params};
pub use error::{KgeError, Result};
pub use evaluation::{evaluate, rank_query, EvalOptions, EvalReport, Scorer};
pub use model::Model;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use training::{bce_loss, fit, lr_at_epoch, Trainer};
