//! Joint unsupervised induction of discrete syntactic structure and latent
//! word embeddings.
//!
//! The generative story: a structured discrete prior (a Markov chain over
//! tags, or a dependency model with valence over trees and tags) generates
//! per-token latent states; each state emits a latent embedding from a
//! diagonal Gaussian; a volume-preserving invertible projector maps latent
//! embeddings to the observed (pre-trained) word vectors. Because the
//! projector has unit Jacobian determinant, the marginal likelihood of the
//! observed vectors is exact: apply the inverse projection and run the
//! ordinary forward or inside dynamic program, plus a (here identically
//! zero) log-determinant correction.
//!
//! Modules:
//! - [`data`]: embedding tables, corpora, filters, latent export
//! - [`flow`]: the invertible volume-preserving projector
//! - [`markov`]: Markov-structured syntax model (tagging)
//! - [`dmv`]: dependency-model-with-valence syntax model (parsing)
//! - [`joint`]: flow + Gaussian emissions + syntax model glued together
//! - [`optim`]: Adam, training loops, restarts, checkpoints
//! - [`eval`]: many-to-one, V-measure, one-to-one mapping, attachment accuracy
//! - [`oracles`]: brute-force reference implementations used by the test suites

pub mod data;
pub mod dmv;
pub mod error;
pub mod eval;
pub mod flow;
pub mod joint;
pub mod markov;
pub mod matrix;
pub mod optim;
pub mod oracles;
pub mod scalar;

pub use error::{Error, Result};
pub use matrix::Mat;
pub use scalar::Scalar;

/// Concrete scalar type used by the CLI and the acceptance suite.
pub type Real = f64;

pub use data::{Corpus, EmbeddingTable, Sentence, UnkPolicy};
pub use eval::ContingencyTable;
pub use dmv::{DependencyParse, Direction, DmvParams, Valence};
pub use flow::Flow;
pub use joint::{GaussianEmissions, JointModel, LengthDist, SyntaxParams};
pub use markov::{EmissionScores, MarkovParams};
pub use optim::{AdamState, Checkpoint, InitMode, Structure, TrainConfig};
