//! Zero-shot node classification across text-attributed graphs.
//!
//! A low-rank adapter over text embeddings is pre-trained on labeled source
//! graphs (k-hop subgraphs with a prompting node, parameter-free
//! neighborhood aggregation, similarity cross-entropy against class
//! description embeddings) and then used to classify the nodes of unseen
//! target graphs whose label sets are disjoint from the sources.

pub mod adapter;
pub mod aggregate;
pub mod embed;
pub mod error;
pub mod graph;
pub mod infer;
pub mod loss;
pub mod optim;
pub mod pipeline;
pub mod sampler;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
