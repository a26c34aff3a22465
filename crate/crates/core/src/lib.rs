//! Clothing-change person re-identification with a dual-stream network that
//! separates identity cues from clothing cues.

pub mod config;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod masking;
pub mod model;
pub mod network;
pub mod nn;
pub mod sampler;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelSpec, Variant};
