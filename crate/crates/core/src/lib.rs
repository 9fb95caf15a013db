//! Knowledge-base visual question answering: embedding-similarity fact
//! retrieval, relation filtering, and a graph convolutional answer selector.

pub mod answer_model;
pub mod dataset;
pub mod embeddings;
pub mod encoders;
pub mod error;
pub mod kb;
pub mod numerics;
pub mod pipeline;
pub mod relation_model;
pub mod retrieval;

pub use error::{Error, Result};
