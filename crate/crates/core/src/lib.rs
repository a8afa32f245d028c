//! RGB-thermal semantic segmentation with cross-modal complementary
//! reasoning, global context modeling and detail aggregation, trained through
//! a small reverse-mode autodiff engine.

pub mod arlm;
pub mod aux_targets;
pub mod backbone;
pub mod cacr;
pub mod config;
pub mod dataset;
pub mod detail;
pub mod error;
pub mod gcm;
pub mod gradsuite;
pub mod instrument;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{CaiNet, ModelConfig, Pass, Preset};
pub use tensor::{Float, ParamStore, Tape, Tensor, Var};
