//! Shape and appearance embedding pipeline for multimodal person
//! identification.
//!
//! The shape branch ([`pse`]) fuses silhouette and body-model features, pools
//! them into horizontal bins and appends a skeleton-motion bin. The appearance
//! branch ([`aae`]) combines an attention pyramid over 8-frame groups with
//! gamma-flattened frame averaging. [`gallery`] registers identities as
//! embedding centroids, [`matcher`] fuses per-modality scores and
//! [`metrics`] computes CMC and mAP. [`losses`] holds the training objectives
//! and a toy trainer; [`synth`] generates seeded synthetic datasets.
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`, which is what the command-line driver uses.

pub mod aae;
pub mod encoders;
pub mod error;
pub mod gallery;
mod io;
pub mod losses;
pub mod math;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod pse;
pub mod scalar;
pub mod synth;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use scalar::Real;

pub type RealVector = math::Vector<f64>;
pub type RealMatrix = math::Matrix<f64>;
pub type RealGrid = math::FeatureGrid<f64>;
pub type ShapeEmbedding = pse::ShapeEmbedding<f64>;
pub type AppearanceEmbedding = aae::AppearanceEmbedding<f64>;
pub type GalleryIndex = gallery::GalleryIndex<f64>;
pub type TrackletRecord = gallery::TrackletRecord<f64>;
pub type ScoreMatrix = matcher::ScoreMatrix<f64>;
pub type Model = model::Model<f64>;

pub type Vector32 = math::Vector<f32>;
pub type Grid32 = math::FeatureGrid<f32>;
pub type Model32 = model::Model<f32>;
