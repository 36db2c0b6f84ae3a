//! Period-adaptive patch forecasting.
//!
//! A series is cut into non-overlapping patches of one cycle length each, the
//! patches are projected to tokens through reference-size weights that are
//! resized on the fly by a pseudoinverse transform, a RoPE encoder–decoder
//! processes the tokens, and all future patches are decoded in one pass.

pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod linalg;
pub mod model;
pub mod periodicity;
pub mod selftest;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
pub use linalg::Matrix;
pub use model::{DecodingMode, ForecastResult, Model, ModelConfig, Patching, ReplicatedToken};
pub use tokenizer::ResizeMode;
pub use training::{TrainConfig, Trainer};
