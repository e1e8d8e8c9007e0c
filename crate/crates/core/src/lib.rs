//! Learning to repair discrete sequences from unpaired data.
//!
//! An attention encoder–decoder generator emits soft one-hot rows that a
//! weight-clipped Wasserstein critic scores directly; two self-regularizers
//! keep each output tied to its input.

pub mod critic;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod seqmodel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Generator32 = seqmodel::Generator<f32>;
pub type Generator64 = seqmodel::Generator<f64>;
pub type Critic32 = critic::Critic<f32>;
pub type Critic64 = critic::Critic<f64>;
