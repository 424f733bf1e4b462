//! Massive-candidate embedding ranking engine.
//!
//! Candidate embeddings live in a flat binary store ([`store`]). A query is
//! conditioned on a compact summary of its candidate pool: the pool is
//! clustered with mini-batch K-means ([`clustering`]), the centroids are
//! concatenated and projected into a conditioning vector ([`aggregator`]),
//! and the reference encoder ([`encoder`]) maps `[query ; conditioning]` to a
//! query embedding. Candidates are ranked by exact inner product
//! ([`scorer`]).
//!
//! Training ([`trainer`]) optimizes the projector and encoder with InfoNCE over
//! random candidate partitions. At inference time, [`tts`] refines the query
//! embedding by repeated partition / eliminate / re-encode rounds and ensembles
//! the scores. [`metrics`] and [`harness`] provide evaluation, synthetic data,
//! ingestion and the experiment pipeline.

// Numeric kernels index several parallel arrays by the same loop variable, and
// parameter checks use `!(x > 0.0)` so that NaN is rejected.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregator;
pub mod clustering;
pub mod encoder;
pub mod error;
pub mod harness;
mod linalg;
pub mod metrics;
pub mod remote;
pub mod scorer;
pub mod seed;
pub mod store;
pub mod trainer;
pub mod tts;

pub use error::{Error, ErrorClass, Result};
pub use store::{read_store, write_store, EmbeddingMatrix, Rows, TruncatedView};

/// Configure the global rayon pool from `LRANKER_THREADS`, if set.
///
/// Safe to call more than once; only the first successful call takes effect.
pub fn init_threads_from_env() {
    if let Ok(v) = std::env::var("LRANKER_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}
