//! Joint hyperspectral unmixing and single-object tracking with
//! frequency-decomposed material prompts.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: f64 tensors and a reverse-mode tape with exact adjoints.
//! - [`nn`], [`optim`]: parameter storage, layers, AdamW.
//! - [`wavelets`]: orthonormal 1-D channel and 2-D spatial Haar transforms.
//! - [`unmixing`]: autoencoder unmixer, reconstruction losses, abundance
//!   adaptor and decomposition.
//! - [`backbone`]: patch-token transformer and the relevance mask.
//! - [`prompts`]: material patch embedding, wavelet prompt blocks, fusion
//!   and injection.
//! - [`objectives`]: prediction head, box decoding and the loss stack.
//! - [`synthdata`]: synthetic hyperspectral sequences and the HSVC format.
//! - [`harness`]: model assembly, training, one-pass evaluation,
//!   checkpoints and configuration.

pub mod backbone;
pub mod harness;
pub mod kv;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod prompts;
pub mod synthdata;
pub mod tensor;
pub mod unmixing;
pub mod wavelets;

pub use tensor::{Tape, Tensor, TensorError, Var};
