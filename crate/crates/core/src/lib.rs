//! Sequencer2D: vision backbones that mix tokens with bidirectional LSTMs
//! run along image rows and columns.
//!
//! The crate is self-contained: a small tensor type with a reverse-mode
//! tape ([`Tape`]), recurrent cells, the BiLSTM2D layer and its ablation
//! variants, staged model builders, parameter/FLOP accounting, effective
//! receptive fields, and a desk-scale trainer.

pub mod analysis;
pub mod autograd;
pub mod bilstm2d;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod params;
pub mod recurrent;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Init, Module, Param, ParamId};
pub use tensor::Tensor;
