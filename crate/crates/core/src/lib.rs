//! A transformer encoder-decoder visual tracker built from scratch.
//!
//! Template features are encoded by self-attention; search features are
//! decoded against that memory, and three small heads predict a center
//! heatmap plus offset and size maps on the stride-8 grid. An optional online
//! branch, refitted by Gauss-Newton/conjugate gradient during tracking, is
//! blended into the offline heatmap.

pub mod attention;
pub mod error;
pub mod init;
pub mod localize;
pub mod loss;
pub mod online;
pub mod pipeline;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, TransformerWeights, Var};
