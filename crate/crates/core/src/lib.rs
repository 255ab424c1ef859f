//! Recognition with an internal hierarchical segmenter.
//!
//! Images are tokenized into superpixel segment tokens, contextualized with
//! transformer blocks and progressively merged by graph pooling. The soft
//! assignment matrices chain into a nested segmentation hierarchy that comes
//! for free with the recognition forward pass.

pub mod error;
pub mod eval;
pub mod graphpool;
pub mod learn;
pub mod model;
pub mod pixelio;
pub mod rng;
pub mod superpixel;
pub mod tensorcore;
pub mod tokenizer;

pub use error::{Error, Result};
pub use pixelio::{Image, LabelMap};
pub use tensorcore::{Graph, ParamStore, Tensor, Var};
