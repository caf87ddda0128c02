//! Concurrent multi-dataset embedding training with dataset-aware softmax
//! and slow-drift-gated fusion of conflicting class proxies, validated end
//! to end on synthetic identity data with known ground-truth conflicts.
//!
//! The pipeline: [`synthetic`] plants identities on the unit hypersphere
//! and splits them into overlapping dataset shards; [`trainer`] runs
//! margin-softmax training where each sample's softmax pool is restricted
//! to its own dataset ([`loss`]); once proxies stabilize, [`fusion`] scans
//! proxy cosine similarities, merges conflicting classes above a
//! threshold, and the run switches to one dataset-agnostic pool; [`eval`]
//! scores verification pairs and merge precision/recall against the
//! generator's exact conflict manifest.

mod bytes;

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod linalg;
pub mod loss;
pub mod net;
pub mod shard_file;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
