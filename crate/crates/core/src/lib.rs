//! Training-free style transfer for annotated cell microscopy datasets.
//!
//! Source images are DDIM-inverted together with an unannotated target
//! image; during regeneration the decoder self-attention layers read the
//! target's keys and values, with scores rescaled by an adaptive ratio.
//! Target images are first rescaled so their cells match the source size.
//! The styled images reuse the source annotations unchanged.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod alpha;
pub mod attention;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod imaging;
pub mod inversion;
pub mod metrics;
pub mod scalar;
pub mod size_match;
pub mod stylize;
pub mod synthetic;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ImageF32 = imaging::Image<f32>;
pub type ImageF64 = imaging::Image<f64>;
pub type ToyUNetF32 = diffusion::ToyUNet<f32>;
pub type ToyUNetF64 = diffusion::ToyUNet<f64>;
pub type NoiseScheduleF32 = diffusion::NoiseSchedule<f32>;
pub type NoiseScheduleF64 = diffusion::NoiseSchedule<f64>;
pub type AttentionCacheF32 = attention::AttentionCache<f32>;
pub type AttentionCacheF64 = attention::AttentionCache<f64>;
pub type InjectionPlanF32 = attention::InjectionPlan<f32>;
pub type InjectionPlanF64 = attention::InjectionPlan<f64>;
