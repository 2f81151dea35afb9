//! Allocation-only numerical core for joint image/camera generative modeling.
//!
//! Everything in this crate is a pure function of its inputs and builds
//! without `std`: Plücker ray maps and pose recovery ([`geometry`]), vector
//! quantization primitives ([`quantizer`]), the shared token vocabulary and
//! sequence/mask layouts ([`sequence`]), the procedural scene generator and
//! ray-cast renderer ([`scenes`]), and evaluation metrics ([`metrics`]).
//!
//! The `gst` crate layers the neural networks, file formats and CLI on top.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod geometry;
pub mod metrics;
pub mod quantizer;
pub mod scenes;
pub mod seed;
pub mod sequence;

pub use geometry::{CameraPose, Convention, Intrinsics, PluckerRay, RayMap, SceneNormalization};
pub use quantizer::{Codebook, QuantizeResult, UsageCounter};
pub use scenes::{CameraSampler, Primitive, PrimitiveKind, SceneSpec};
pub use sequence::{
    AttentionMask, MaskMode, Modality, Ordering, PositionTag, SampleLayout, TokenGrid, Vocabulary,
};
