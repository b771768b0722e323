//! Building blocks for oriented object detection in aerial imagery.
//!
//! * Tensor substrate: [`tensor`], [`conv`], [`ops`], [`graph`], [`layer`], [`gradcheck`].
//! * Feature blocks: [`wavelet`] (Haar cascade, WTConv, C2f-WTC), [`dynconv`]
//!   (expert-mixture convolution, ghost module, C2f-GDC) and [`okm`]
//!   (OmniKernel CSP, SPD convolution, P2/P3 pyramid fusion).
//! * Detection plumbing: [`geometry`] (rotated IoU, NMS), [`eval`] (VOC AP)
//!   and [`pipeline`] (DOTA files, patch tiling, splits, model configs and
//!   parameter/FLOP accounting).

pub mod conv;
pub mod dynconv;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod layer;
pub mod okm;
pub mod ops;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use par::Exec;
pub use tensor::Tensor;
