//! Cross-domain recommendation from recipe trees: synthetic data, graph
//! construction, tree embeddings, gated fusion and evaluation.

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod fusion;
pub mod hetgraph;
pub mod numerics;
pub mod pipeline;
pub mod textembed;
pub mod tree2vec;
pub mod treegraph;
pub mod verify;
