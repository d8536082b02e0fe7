//! Desk-scale contrastive language-image pretraining.
//!
//! Shared tiny image and text encoders trained with any combination of the
//! CLIP, SLIP, FILIP, DeCLIP and DeFILIP supervision terms, plus the data,
//! augmentation, optimisation, zero-shot evaluation and corpus-statistics
//! machinery around them.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod data;
pub mod encoders;
pub mod faults;
pub mod gradcheck;
pub mod params;
pub mod supervision;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod zeroshot;

pub use tensor::{Graph, Tensor, TensorError, Var};
