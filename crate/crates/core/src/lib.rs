//! Learned prompt contexts for open-vocabulary region classification.
//!
//! A shared set of context vectors is prepended (or inserted around) a class
//! token and passed through a frozen text encoder to give one embedding per
//! class. Region embeddings are classified by cosine similarity to those
//! class embeddings. Contexts are trained on base classes only, from
//! positive proposals graded by IoU plus background proposals, and are then
//! reused unchanged for novel classes.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod prompt;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Encoder = encoder::FrozenTextEncoder<f64>;
pub type Encoder32 = encoder::FrozenTextEncoder<f32>;
pub type Context = prompt::PromptContext<f64>;
pub type Context32 = prompt::PromptContext<f32>;
pub type TokenTable = prompt::ClassTokenTable<f64>;
pub type TokenTable32 = prompt::ClassTokenTable<f32>;
pub type Record = geometry::ProposalRecord<f64>;
pub type Record32 = geometry::ProposalRecord<f32>;
pub type Run = trainer::TrainRun<f64>;
pub type Run32 = trainer::TrainRun<f32>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
