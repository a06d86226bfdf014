//! Multiple-code hashing: a base hash layer over precomputed features, a
//! learned policy that adds region codes to database items, a multi-code
//! bucket index, and the metrics to compare it with single-code retrieval.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the common instantiations.

pub mod agent;
pub mod basemodel;
pub mod datagen;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hamming;
pub mod index;
pub mod io;
pub mod loss;
pub mod pipeline;
pub mod scalar;

pub use error::{Error, Result};
pub use hamming::HashCode;
pub use index::{BucketIndex, ItemId};
pub use scalar::Scalar;

pub type BaseHashModel64 = basemodel::BaseHashModel<f64>;
pub type BaseHashModel32 = basemodel::BaseHashModel<f32>;
pub type PolicyNetwork64 = agent::PolicyNetwork<f64>;
pub type PolicyNetwork32 = agent::PolicyNetwork<f32>;
pub type LossSpec64 = loss::LossSpec<f64>;
pub type LossSpec32 = loss::LossSpec<f32>;
pub type Dataset64 = dataset::Dataset<f64>;
pub type Dataset32 = dataset::Dataset<f32>;
pub type MultiCodeEntry64 = encoder::MultiCodeEntry<f64>;
pub type MultiCodeEntry32 = encoder::MultiCodeEntry<f32>;
