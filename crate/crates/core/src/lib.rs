//! Retrieval-augmented generative question answering.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`corpus`]: passage and QA record ingestion, persisted corpus store.
//! - [`embed`]: dense query/passage encoders (hashed text encoder or vectors loaded from file).
//! - [`index`]: exact inner-product search, HNSW approximate search and a BM25 baseline.
//! - [`fid`]: a small fusion-in-decoder encoder-decoder transformer with hand-written backprop.
//! - [`decode`]: greedy and beam decoding, answer normalization, ensemble selection.
//! - [`metrics`]: hit@k, exact match, VQA score and aggregate reports.
//! - [`pipeline`]: the command implementations behind the `fidqa` binary.

pub mod binio;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod embed;
pub mod error;
pub mod fid;
pub mod index;
pub mod metrics;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
