//! Red-green watermarking for discrete-token autoregressive image generators.
//!
//! Tokens of a vector-quantized codebook are grouped into clusters with
//! k-means. At every generation step the cluster of the previous token seeds
//! a keyed hash, which selects a fraction of clusters as "green"; sampling is
//! biased towards green tokens. Verification re-encodes an image (or predicts
//! clusters directly with a small classifier), counts green positions and runs
//! a one-tailed binomial test.
//!
//! The crate covers everything a verifier needs and nothing that requires the
//! generator: codebooks and clustering, green sets, the patch codec, image
//! perturbations, statistics and the cluster classifier.

pub mod classifier;
pub mod codebook;
pub mod error;
pub mod greenset;
pub mod perturb;
pub mod pixelcodec;
pub mod rng;
pub mod tokens;
pub mod verifier;

pub use codebook::{cluster_of, kmeans_cluster, quantize, sample_codebook, ClusterTable, Codebook};
pub use error::{Error, Result};
pub use greenset::{compute_green_set, hash_context, token_is_green, GreenSet, Watermark, WatermarkConfig};
pub use pixelcodec::{decode, encode, Image};
pub use rng::SplitMix64;
pub use tokens::TokenGrid;
