//! Desk-scale soft prompt tuning on a frozen encoder-decoder transformer.
//!
//! The only parameters that ever receive gradients during tuning form a small
//! matrix prepended to the encoder's input embeddings; everything else is
//! trained once, frozen, and shared across tasks. The crate covers the whole
//! pipeline: a tape-based autodiff core, a toy tokenizer, span-corruption and
//! LM-adaptation objectives, the transformer itself, prompt initialization
//! strategies, Adafactor training, prompt ensembling, nearest-neighbor
//! interpretability probes, and parameter accounting for the adaptation
//! methods this approach is usually compared against.

pub mod error;
pub mod objectives;
pub mod real;
pub mod tape;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use real::Real;

/// Concrete scalar instantiations. The pipeline defaults to `f64`.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
