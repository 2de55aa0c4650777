//! Text-to-multimodal product retrieval: contrastive training with
//! probability-corrected negative sampling, a clustered ANN index, Boolean
//! attribute filtering, and offline relevance metrics.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`catalog`] loads products and estimates per-product sampling
//!    probabilities from interaction logs.
//! 2. [`querynorm`] canonicalizes query text into sorted tokens and a 32-bit
//!    qid.
//! 3. [`encoder`] embeds queries (token mean) and products (title + image
//!    patches) into a shared unit sphere.
//! 4. [`losses`] scores pairs with the probability-corrected similarity and
//!    drives two training objectives: query-product matching and masked patch
//!    prediction.
//! 5. [`negsampling`] supplies memory-bank and cross-device negatives on a
//!    warmup schedule.
//! 6. [`trainer`] runs the simulated multi-device loop with Adam and a linear
//!    warmup/decay learning rate.
//! 7. [`index`] clusters product embeddings for approximate search.
//! 8. [`filter`] intersects ANN candidates with attribute postings.
//! 9. [`metrics`] computes Recall@K and the two relevance proxies offline.
//!
//! Run `cargo run --example end_to_end` for the full loop in one place, or
//! the `mmr` binary for the file-based command-line interface.

pub mod catalog;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod filter;
pub mod index;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod negsampling;
pub mod querynorm;
pub mod trainer;

pub use catalog::{Catalog, Interaction, Product, Query, Vocab};
pub use encoder::{Dims, EncoderParams};
pub use error::{Error, Result};
pub use index::HcIndex;
pub use losses::Temperature;
pub use negsampling::{DeviceGroup, MemoryBank, Schedule};
pub use trainer::{TrainConfig, Trainer};
