//! Typing-style person identification from hand-joint sequences.
//!
//! The crate covers the hand skeleton graph, joint/bone data handling, a
//! synthetic typing corpus generator, a small reverse-mode autodiff engine,
//! the two-stream network, its training loop and the evaluation protocols.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod hand_graph;
pub mod harness;
pub mod model;
pub mod seed;
pub mod skeleton;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use hand_graph::{HandGraph, Hands};
pub use model::{ModelConfig, StyleNet, Variant};
pub use skeleton::{DatasetManifest, InputMode, JointSample};
pub use trainer::{TrainConfig, Trainer};
