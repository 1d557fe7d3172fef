//! Neural comprehension models for MC-IC: a feed-forward pair classifier and
//! a vector-to-sequence captioner with a classification head, trained with
//! ADAGRAD.

pub mod checkpoint;
pub mod data;
pub mod ffnn;
pub mod gradcheck;
pub mod gru;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod vec2seq;

pub use data::{ItemSet, Pair};
pub use ffnn::{FfnnConfig, FfnnParams, LossParts, PairModel};
pub use train::{TrainConfig, TrainLog, TrainOutcome};
pub use vec2seq::{Vec2seqConfig, Vec2seqParams};
