//! Multimodal 3D object retrieval from point clouds and rendered views.
//!
//! The pipeline extracts a global point-cloud feature with dynamic-graph
//! EdgeConv layers and per-view CNN feature maps, aggregates the view tokens
//! with class-token self-attention and point-queried cross-attention, fuses
//! the aggregated features into a unit-norm descriptor trained with an
//! additive angular margin loss, and evaluates cosine retrieval with
//! mAP, F1@N and NDCG@N.

pub mod aggregate;
mod error;
pub mod head;
pub mod manifest;
pub mod nn;
pub mod numkit;
pub mod pointbranch;
pub mod retrieval;
pub mod trainer;
pub mod viewbranch;

pub use error::{Error, Result};
